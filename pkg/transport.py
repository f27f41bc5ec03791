"""
フレームを運ぶトランスポート

- InProcessTransport: 同一プロセス内のキューによる双方向チャネル
- SocketTransport: ループバックのTCPソケット（Bob側がサーバソケット）
- CapturingTransport / TamperingTransport / ReplayTransport: 検査・故障注入・再生用のラッパー

いずれも順序どおり・欠落なしの配送を前提とする。
"""
import logging
import os
import queue
import socket
import threading
import time
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from protocol import HEADER_SIZE, Frame, FramingError

# 環境変数の読み込み
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_RECV_TIMEOUT = float(os.getenv("PPGD_RECV_TIMEOUT", "30"))

_CLOSED = object()


class TransportError(ConnectionError):
    """送受信に失敗した（切断・タイムアウトなど）"""


class Transport:
    """
    トランスポートの基底クラス

    各方向について読み手1つ・書き手1つから安全に使える。
    """

    def send_frame(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv_frame(self) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class InProcessTransport(Transport):
    """
    キューを使ったプロセス内の双方向チャネルの片端
    """

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue,
                 timeout: Optional[float] = None, name: str = "inproc"):
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = DEFAULT_RECV_TIMEOUT if timeout is None else timeout
        self._closed = threading.Event()
        self.name = name

    @classmethod
    def pair(cls, timeout: Optional[float] = None) -> Tuple["InProcessTransport", "InProcessTransport"]:
        """接続済みの両端を返す"""
        a_to_b: queue.Queue = queue.Queue()
        b_to_a: queue.Queue = queue.Queue()
        return (cls(b_to_a, a_to_b, timeout, name="inproc-a"),
                cls(a_to_b, b_to_a, timeout, name="inproc-b"))

    def send_frame(self, frame: Frame) -> None:
        if self._closed.is_set():
            raise TransportError(f"{self.name}: 閉じたチャネルには送信できません。")
        self._outbox.put(frame.to_bytes())

    def recv_frame(self) -> Frame:
        try:
            item = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError(f"{self.name}: 受信がタイムアウトしました ({self._timeout}秒)。")
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportError(f"{self.name}: 相手がチャネルを閉じました。")
        return Frame.from_bytes(item)

    def close(self) -> None:
        if not self._closed.is_set():
            self._closed.set()
            self._outbox.put(_CLOSED)


class SocketTransport(Transport):
    """
    TCPソケット上のトランスポート
    """

    def __init__(self, sock: socket.socket, timeout: Optional[float] = None, name: str = "socket"):
        self._sock = sock
        self._sock.settimeout(DEFAULT_RECV_TIMEOUT if timeout is None else timeout)
        self._closed = False
        self.name = name

    @staticmethod
    def listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 2) -> socket.socket:
        """サーバソケットを作る（Bob側）"""
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError as e:
            srv.close()
            raise TransportError(f"{host}:{port} にバインドできません: {e}")
        srv.listen(backlog)
        logger.debug("待ち受けを開始しました: %s:%d", *srv.getsockname()[:2])
        return srv

    @classmethod
    def accept(cls, listener: socket.socket, timeout: Optional[float] = None) -> "SocketTransport":
        listener.settimeout(DEFAULT_RECV_TIMEOUT if timeout is None else timeout)
        try:
            conn, addr = listener.accept()
        except OSError as e:
            raise TransportError(f"接続を受け付けられません: {e}")
        logger.debug("接続を受け付けました: %s:%d", *addr[:2])
        return cls(conn, timeout, name="socket-server")

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = None,
                retry_for: float = 0.0) -> "SocketTransport":
        """
        サーバソケットに接続する（Alice側）

        Args:
            retry_for: 接続拒否されたときに再試行する秒数（別プロセスの起動待ち用）
        """
        deadline = time.monotonic() + retry_for
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout or DEFAULT_RECV_TIMEOUT)
                break
            except ConnectionRefusedError as e:
                if time.monotonic() >= deadline:
                    raise TransportError(f"{host}:{port} に接続できません: {e}")
                time.sleep(0.1)
            except OSError as e:
                raise TransportError(f"{host}:{port} に接続できません: {e}")
        return cls(sock, timeout, name="socket-client")

    @classmethod
    def loopback_pairs(cls, count: int, host: str = "127.0.0.1", port: int = 0,
                       timeout: Optional[float] = None) -> List[Tuple["SocketTransport", "SocketTransport"]]:
        """
        1つのサーバソケットから (クライアント端, サーバ端) の組を count 個作る
        """
        listener = cls.listen(host, port, backlog=count)
        try:
            bound_host, bound_port = listener.getsockname()[:2]
            pairs = []
            for _ in range(count):
                client = cls.connect(bound_host, bound_port, timeout)
                server = cls.accept(listener, timeout)
                pairs.append((client, server))
            return pairs
        finally:
            listener.close()

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise TransportError(f"{self.name}: 受信がタイムアウトしました。")
            except OSError as e:
                raise TransportError(f"{self.name}: 受信に失敗しました: {e}")
            if not chunk:
                if buf:
                    raise FramingError(f"{self.name}: フレームの途中で接続が切れました。")
                raise TransportError(f"{self.name}: 相手が接続を閉じました。")
            buf.extend(chunk)
        return bytes(buf)

    def send_frame(self, frame: Frame) -> None:
        if self._closed:
            raise TransportError(f"{self.name}: 閉じたソケットには送信できません。")
        try:
            self._sock.sendall(frame.to_bytes())
        except OSError as e:
            raise TransportError(f"{self.name}: 送信に失敗しました: {e}")

    def recv_frame(self) -> Frame:
        length = Frame.parse_header(self._recv_exact(HEADER_SIZE))
        return Frame(self._recv_exact(length) if length else b"")

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class CapturingTransport(Transport):
    """
    通過したフレームのバイト列を記録するラッパー
    """

    def __init__(self, inner: Transport):
        self.inner = inner
        self.sent: List[bytes] = []
        self.received: List[bytes] = []

    def send_frame(self, frame: Frame) -> None:
        self.inner.send_frame(frame)
        self.sent.append(frame.to_bytes())

    def recv_frame(self) -> Frame:
        frame = self.inner.recv_frame()
        self.received.append(frame.to_bytes())
        return frame

    def close(self) -> None:
        self.inner.close()

    def wire_bytes(self) -> bytes:
        return b"".join(self.sent + self.received)


class TamperingTransport(Transport):
    """
    frame_index 番目（0始まり）の送信フレームの暗号文1バイトを反転させる
    """

    def __init__(self, inner: Transport, frame_index: int, byte_offset: int = 0):
        self.inner = inner
        self.frame_index = frame_index
        self.byte_offset = byte_offset
        self._count = 0

    def send_frame(self, frame: Frame) -> None:
        if self._count == self.frame_index:
            data = bytearray(frame.ciphertext)
            data[self.byte_offset % len(data)] ^= 0xFF
            frame = Frame(bytes(data))
            logger.debug("フレーム %d を改ざんしました", self._count)
        self._count += 1
        self.inner.send_frame(frame)

    def recv_frame(self) -> Frame:
        return self.inner.recv_frame()

    def close(self) -> None:
        self.inner.close()


class ReplayTransport(Transport):
    """
    記録した受信フレームを順に返し、送信フレームを記録と照合する
    """

    def __init__(self, inbound: Sequence[bytes], expected_outbound: Optional[Sequence[bytes]] = None):
        self._inbound = list(inbound)
        self._expected = list(expected_outbound) if expected_outbound is not None else None
        self._sent = 0

    def send_frame(self, frame: Frame) -> None:
        if self._expected is not None:
            if self._sent >= len(self._expected):
                raise TransportError("記録より多くのフレームを送信しました。")
            if frame.to_bytes() != self._expected[self._sent]:
                raise TransportError(f"送信フレーム {self._sent} が記録と一致しません。")
        self._sent += 1

    def recv_frame(self) -> Frame:
        if not self._inbound:
            raise TransportError("記録された受信フレームがもうありません。")
        return Frame.from_bytes(self._inbound.pop(0))

    def close(self) -> None:
        pass

    @property
    def exhausted(self) -> bool:
        return not self._inbound
