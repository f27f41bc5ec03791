"""
パーティ間のメッセージプロトコルを実装するモジュール

セグメント（CON_INIT, CON_INIT_ACK, REQUEST, RESPONSE, CON_TERM, CON_TERM_ACK）を
UTF-8 の1行にエンコードし、共有鍵で暗号化して長さ付きフレームとして送る。

注意: 既定の DES/ECB は再現実験のためのもので、安全な暗号ではありません。
"""
import json
import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from Cryptodome.Cipher import DES
from Cryptodome.Util.Padding import pad, unpad

logger = logging.getLogger(__name__)

HEADER_SIZE = 4
MAX_FRAME_SIZE = 16 * 1024 * 1024  # 16 MiB

INITIATOR = "initiator"
RESPONDER = "responder"


class SegmentKind(str, Enum):
    CON_INIT = "CON_INIT"
    CON_INIT_ACK = "CON_INIT_ACK"
    REQUEST = "REQUEST"
    RESPONSE = "RESPONSE"
    CON_TERM = "CON_TERM"
    CON_TERM_ACK = "CON_TERM_ACK"


CONTROL_KINDS = frozenset({
    SegmentKind.CON_INIT, SegmentKind.CON_INIT_ACK,
    SegmentKind.CON_TERM, SegmentKind.CON_TERM_ACK,
})


class ProtocolError(RuntimeError):
    """セグメントの順序や内容がプロトコルに違反している"""


class EncodingError(ProtocolError, ValueError):
    """セグメントをエンコード・デコードできない"""


class FramingError(ProtocolError):
    """フレームが壊れている（長さ不一致など）"""


class SecurityError(ProtocolError):
    """復号に失敗した（鍵の不一致や改ざん）"""


class Direction(str, Enum):
    SENT = "->"
    RECEIVED = "<-"


def escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("|", "\\|")


def _unescape_field(text: str) -> str:
    out = []
    chars = iter(text)
    for ch in chars:
        if ch == "\\":
            nxt = next(chars, None)
            if nxt is None:
                raise EncodingError(f"末尾のエスケープが不完全です: {text!r}")
            out.append(nxt)
        else:
            out.append(ch)
    return "".join(out)


def split_response(message: str) -> Tuple[str, str]:
    """
    RESPONSE のペイロード NAME|VALUE を分割する（エスケープされていない | はちょうど1つ）
    """
    positions = []
    i = 0
    while i < len(message):
        if message[i] == "\\":
            i += 2
            continue
        if message[i] == "|":
            positions.append(i)
        i += 1
    if len(positions) != 1:
        raise EncodingError(f"RESPONSE のペイロードは NAME|VALUE の形式でなければなりません: {message!r}")
    cut = positions[0]
    name = _unescape_field(message[:cut])
    if not name:
        raise EncodingError(f"RESPONSE の名前が空です: {message!r}")
    return name, _unescape_field(message[cut + 1:])


def join_response(name: str, value: str) -> str:
    return f"{escape_field(name)}|{escape_field(value)}"


@dataclass(frozen=True)
class Segment:
    """
    プロトコルの1メッセージ
    """
    kind: SegmentKind
    message: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", SegmentKind(self.kind))
        if self.kind in CONTROL_KINDS and self.message:
            raise EncodingError(f"{self.kind.value} はペイロードを持てません。")
        if self.kind == SegmentKind.REQUEST and not self.message:
            raise EncodingError("REQUEST には名前が必要です。")
        if self.kind == SegmentKind.RESPONSE:
            split_response(self.message)

    @classmethod
    def request(cls, name: str) -> "Segment":
        return cls(SegmentKind.REQUEST, name)

    @classmethod
    def response(cls, name: str, value: str) -> "Segment":
        return cls(SegmentKind.RESPONSE, join_response(name, value))

    def __str__(self) -> str:
        return f"{self.kind.value} {self.message}" if self.message else self.kind.value


def encode_segment(segment: Segment) -> bytes:
    """
    セグメントを `<KIND> <message>\\n` 形式のUTF-8バイト列にする
    """
    if "\n" in segment.message or "\r" in segment.message:
        raise EncodingError(f"ペイロードに改行は含められません: {segment.message!r}")
    return (str(segment) + "\n").encode("utf-8")


def decode_segment(data: bytes) -> Segment:
    """
    encode_segment の逆変換
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise EncodingError(f"セグメントがUTF-8ではありません: {e}")
    if not text.endswith("\n") or "\n" in text[:-1]:
        raise EncodingError(f"セグメントは改行1つで終わる1行でなければなりません: {text!r}")
    kind_text, _, message = text[:-1].partition(" ")
    try:
        kind = SegmentKind(kind_text)
    except ValueError:
        raise EncodingError(f"不明なセグメント種別です: {kind_text!r}")
    return Segment(kind, message)


# --- 暗号 ---------------------------------------------------------------

class DesEcbCipher:
    """
    DES/ECB + PKCS#7 パディング（再現用、安全ではない）
    """
    block_size = DES.block_size
    key_size = 8

    def __init__(self, key: bytes):
        if len(key) != self.key_size:
            raise ValueError(f"DESの鍵は8バイトでなければなりません: {len(key)}バイト")
        self._key = key

    def encrypt(self, data: bytes) -> bytes:
        return DES.new(self._key, DES.MODE_ECB).encrypt(pad(data, self.block_size, style="pkcs7"))

    def decrypt(self, data: bytes) -> bytes:
        return unpad(DES.new(self._key, DES.MODE_ECB).decrypt(data), self.block_size, style="pkcs7")


_CIPHERS: Dict[str, Callable[[bytes], object]] = {"DES": DesEcbCipher}


def register_cipher(name: str, factory: Callable[[bytes], object]) -> None:
    """
    暗号方式を登録する

    factory は鍵を受け取り、block_size・encrypt・decrypt を持つオブジェクトを返すこと。
    """
    _CIPHERS[name.upper()] = factory


def available_ciphers() -> List[str]:
    return sorted(_CIPHERS)


def derive_des_key(passphrase: str) -> bytes:
    """共有パスフレーズから8バイトの鍵を作る（切り詰め、または0で埋める）"""
    raw = passphrase.encode("utf-8")[:8]
    return raw.ljust(8, b"\x00")


@dataclass(frozen=True)
class CipherConfig:
    """
    暗号設定（両パーティで同一にすること）
    """
    shared_key: bytes
    algorithm: str = "DES"
    mode: str = "ECB/PKCS7"

    def __post_init__(self):
        object.__setattr__(self, "algorithm", self.algorithm.upper())
        self.build()

    @classmethod
    def from_passphrase(cls, passphrase: str, algorithm: str = "DES") -> "CipherConfig":
        key = derive_des_key(passphrase) if algorithm.upper() == "DES" else passphrase.encode("utf-8")
        return cls(shared_key=key, algorithm=algorithm)

    def build(self):
        if self.algorithm not in _CIPHERS:
            raise ValueError(f"暗号方式 {self.algorithm} は登録されていません。利用可能: {available_ciphers()}")
        return _CIPHERS[self.algorithm](self.shared_key)


@dataclass(frozen=True)
class Frame:
    """
    長さ(4バイト, ビッグエンディアン) + 暗号文
    """
    ciphertext: bytes

    @property
    def length(self) -> int:
        return len(self.ciphertext)

    def to_bytes(self) -> bytes:
        return struct.pack("!I", self.length) + self.ciphertext

    @staticmethod
    def parse_header(header: bytes) -> int:
        if len(header) < HEADER_SIZE:
            raise FramingError("フレームヘッダが短すぎます。")
        (length,) = struct.unpack("!I", header[:HEADER_SIZE])
        if length > MAX_FRAME_SIZE:
            raise FramingError(f"フレームが大きすぎます: {length}")
        return length

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        length = cls.parse_header(data)
        body = data[HEADER_SIZE:]
        if len(body) != length:
            raise FramingError(f"フレーム長が一致しません: ヘッダ={length}, 実際={len(body)}")
        return cls(bytes(body))


def encrypt_frame(data: bytes, cfg: CipherConfig) -> Frame:
    """平文を暗号化してフレームにする"""
    return Frame(cfg.build().encrypt(data))


def decrypt_frame(frame: Frame, cfg: CipherConfig) -> bytes:
    """
    フレームを復号する

    Raises:
        FramingError: 暗号文の長さがブロック長の倍数でない
        SecurityError: パディング不正（鍵の不一致・改ざん）
    """
    cipher = cfg.build()
    if frame.length == 0 or frame.length % cipher.block_size:
        raise FramingError(f"暗号文の長さがブロック長の倍数ではありません: {frame.length}")
    try:
        return cipher.decrypt(frame.ciphertext)
    except ValueError as e:
        raise SecurityError(f"復号に失敗しました: {e}")


def seal_segment(segment: Segment, cfg: CipherConfig) -> Frame:
    return encrypt_frame(encode_segment(segment), cfg)


def open_segment(frame: Frame, cfg: CipherConfig) -> Segment:
    """
    フレームを復号してセグメントに戻す（失敗は全て SecurityError）
    """
    try:
        return decode_segment(decrypt_frame(frame, cfg))
    except SecurityError:
        raise
    except ProtocolError as e:
        raise SecurityError(f"復号したセグメントが不正です: {e}")


class Transcript:
    """
    セッション中に観測したセグメントの記録
    """

    def __init__(self, entries: Optional[Sequence[Tuple[Direction, Segment]]] = None):
        self.entries: List[Tuple[Direction, Segment]] = list(entries or [])

    def append(self, direction: Direction, segment: Segment) -> None:
        self.entries.append((direction, segment))

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Transcript) and self.entries == other.entries

    def lines(self) -> List[str]:
        return [f"{d.value}{s}" for d, s in self.entries]

    def kinds(self) -> List[Tuple[str, str]]:
        return [(d.value, s.kind.value) for d, s in self.entries]

    def is_complete(self) -> bool:
        return (bool(self.entries)
                and self.entries[0][1].kind == SegmentKind.CON_INIT
                and self.entries[-1][1].kind == SegmentKind.CON_TERM_ACK)


class Session:
    """
    1つの接続に対応するセッション

    暗号化・送受信・トランスクリプトの記録と、CON_INIT から CON_TERM_ACK までの
    状態遷移を担当する。1つのセッションは1つのタスクからのみ使うこと。
    """

    def __init__(self, transport, cipher: CipherConfig, role: str, name: str = "session"):
        if role not in (INITIATOR, RESPONDER):
            raise ValueError(f"不明な役割です: {role!r}")
        self.transport = transport
        self.cipher = cipher
        self.role = role
        self.name = name
        self.transcript = Transcript()
        self.closed = False

    def send(self, segment: Segment) -> None:
        self.transport.send_frame(seal_segment(segment, self.cipher))
        self.transcript.append(Direction.SENT, segment)
        logger.debug("[%s/%s] 送信: %s", self.name, self.role, segment)

    def recv(self, expected: SegmentKind) -> Segment:
        """
        次のセグメントを受信する（種別が違えばセッションを閉じて ProtocolError）
        """
        frame = self.transport.recv_frame()
        try:
            segment = open_segment(frame, self.cipher)
        except SecurityError:
            self.abort()
            raise
        self.transcript.append(Direction.RECEIVED, segment)
        logger.debug("[%s/%s] 受信: %s", self.name, self.role, segment)
        if segment.kind != expected:
            self.abort()
            raise ProtocolError(f"{expected.value} を待っていましたが {segment} を受信しました。")
        return segment

    def abort(self) -> None:
        if not self.closed:
            self.closed = True
            self.transport.close()

    def open(self) -> None:
        """CON_INIT / CON_INIT_ACK のハンドシェイク"""
        if self.role == INITIATOR:
            self.send(Segment(SegmentKind.CON_INIT))
            self.recv(SegmentKind.CON_INIT_ACK)
        else:
            self.recv(SegmentKind.CON_INIT)
            self.send(Segment(SegmentKind.CON_INIT_ACK))

    def _expect_response(self, wanted: str) -> str:
        name, value = split_response(self.recv(SegmentKind.RESPONSE).message)
        if name != wanted:
            self.abort()
            raise ProtocolError(f"{wanted} の RESPONSE を待っていましたが {name} を受信しました。")
        return value

    def _expect_request(self, mine: str) -> None:
        name = self.recv(SegmentKind.REQUEST).message
        if name != mine:
            self.abort()
            raise ProtocolError(f"要求された名前 {name} はこちらの {mine} と一致しません。")

    def exchange_named(self, my_name: str, my_value: str, wanted_name: str,
                       terminate: bool = False) -> str:
        """
        名前付きの値を相互に交換する

        開始側: REQUEST wanted → RESPONSE wanted|v を受信 → REQUEST mine を受信
                → RESPONSE mine|v（terminate なら続けて CON_TERM）
        応答側: REQUEST mine を受信 → RESPONSE mine|v と REQUEST wanted を続けて送信
                → RESPONSE wanted|v を受信

        Returns:
            相手の値
        """
        if self.role == INITIATOR:
            self.send(Segment.request(wanted_name))
            value = self._expect_response(wanted_name)
            self._expect_request(my_name)
            self.send(Segment.response(my_name, my_value))
            if terminate:
                self.send(Segment(SegmentKind.CON_TERM))
        else:
            self._expect_request(my_name)
            self.send(Segment.response(my_name, my_value))
            self.send(Segment.request(wanted_name))
            value = self._expect_response(wanted_name)
        return value

    def close(self, terminate_sent: bool = False) -> None:
        """CON_TERM / CON_TERM_ACK で終了し、トランスポートを閉じる"""
        if self.role == INITIATOR:
            if not terminate_sent:
                self.send(Segment(SegmentKind.CON_TERM))
            self.recv(SegmentKind.CON_TERM_ACK)
        else:
            self.recv(SegmentKind.CON_TERM)
            self.send(Segment(SegmentKind.CON_TERM_ACK))
        self.abort()


_S, _R = Direction.SENT.value, Direction.RECEIVED.value

# 第1段階のセグメント順（開始側から見た順序。応答側は向きが逆になる）
RDF_EXCHANGE_ORDER = (
    (_S, "CON_INIT"), (_R, "CON_INIT_ACK"),
    (_S, "REQUEST"), (_R, "RESPONSE"), (_R, "REQUEST"),
    (_S, "RESPONSE"), (_S, "CON_TERM"), (_R, "CON_TERM_ACK"),
)


def expected_rdf_order(role: str) -> List[Tuple[str, str]]:
    """役割ごとの第1段階のセグメント順（Transcript.kinds() と比較できる形）"""
    if role == INITIATOR:
        return list(RDF_EXCHANGE_ORDER)
    flip = {_S: _R, _R: _S}
    return [(flip[d], kind) for d, kind in RDF_EXCHANGE_ORDER]


def exchange_rdf_locations(role: str,
                           my_rdf_name: str,
                           my_rdf_url: str,
                           peer_rdf_name: str,
                           transport,
                           cipher: CipherConfig) -> Tuple[str, Transcript]:
    """
    第1段階: RDFの場所を交換する

    Returns:
        (相手のRDFの場所, トランスクリプト)
    """
    session = Session(transport, cipher, role, name="stage1")
    try:
        session.open()
        peer_url = session.exchange_named(my_rdf_name, my_rdf_url, peer_rdf_name,
                                          terminate=(role == INITIATOR))
        session.close(terminate_sent=True)
    except Exception:
        session.abort()
        raise
    logger.info("RDFの場所を交換しました: %s → %s", peer_rdf_name, peer_url[:80])
    return peer_url, session.transcript


def encode_vector(values: Sequence[float]) -> str:
    """ベクトルをJSON配列の文字列にする（往復で値が変わらない表現）"""
    values = [float(v) for v in values]
    if not values:
        raise ProtocolError("空のベクトルは送れません (n >= 1)。")
    if not all(math.isfinite(v) for v in values):
        raise ProtocolError("ベクトルに有限でない値が含まれています。")
    return json.dumps(values, separators=(",", ":"), allow_nan=False)


def _reject_constant(name: str):
    raise ProtocolError(f"ベクトルに数値でない定数が含まれています: {name}")


def decode_vector(text: str) -> np.ndarray:
    try:
        values = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"ベクトルのJSONを解析できません: {e}")
    if (not isinstance(values, list) or not values
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)):
        raise ProtocolError(f"ベクトルは数値の空でない配列でなければなりません: {text[:80]!r}")
    try:
        vector = np.array(values, dtype=np.float64)
    except OverflowError:
        raise ProtocolError(f"ベクトルの値が大きすぎます: {text[:80]!r}")
    # 1e400 のような桁あふれは json が inf にする
    if not np.all(np.isfinite(vector)):
        raise ProtocolError(f"ベクトルに有限でない値が含まれています: {text[:80]!r}")
    return vector


def exchange_vectors(session: Session,
                     my_vector_name: str,
                     my_vector: Sequence[float],
                     wanted_name: str) -> np.ndarray:
    """
    第2段階: 確立済みセッション上で名前付きベクトルを交換する

    Returns:
        相手のベクトル
    """
    try:
        payload = encode_vector(my_vector)
        peer = decode_vector(session.exchange_named(my_vector_name, payload, wanted_name))
    except Exception:
        session.abort()
        raise
    if peer.size != len(my_vector):
        session.abort()
        raise ProtocolError(f"ベクトル長が一致しません: {peer.size} != {len(my_vector)}")
    return peer
