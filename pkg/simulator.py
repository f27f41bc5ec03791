"""
2パーティのセッションを通して実行するシミュレータ

分割 → RDF生成 → RDFの場所の交換 → 第1段階の予測 → 暗号化したベクトルの反復交換 → 第2段階
を、AliceとBobの2つのスレッドで実行する。パーティ間の通信はトランスポートのフレームだけで行う。
"""
import json
import logging
import re
import shutil
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Tuple, Union

import numpy as np

from config import SessionConfig
from dataset import (PARTY_A, PARTY_B, Dataset, ExpectedVector, PartitionedView, PartitionSpec,
                     expected_vector, partition_vertical)
from first_stage import FirstStageVector, first_stage_predict
from gradient_engine import RunStats, run_party_loop
from ontology_rdf import (MAX_PREFIX, MIN_PREFIX, OntologyModel, category_extrema, format_amount, generate_rdf, inline_location,
                          location_for, parse_rdf_xml, read_rdf_location, serialize_rdf_xml, write_rdf)
from protocol import (INITIATOR, RESPONDER, Direction, ProtocolError, SegmentKind, Session, Transcript, decode_vector,
                      exchange_rdf_locations, exchange_vectors, split_response)
from transport import CapturingTransport, InProcessTransport, ReplayTransport, SocketTransport, TransportError

logger = logging.getLogger(__name__)

STAGE1 = "Stage1"
STAGE2 = "Stage2"

RDF_NAMES = {PARTY_A: "RDF_A", PARTY_B: "RDF_B"}
VECTOR_NAMES = {PARTY_A: "AP", PARTY_B: "BP"}
PARTY_LABELS = {PARTY_A: "Alice", PARTY_B: "Bob"}

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class StageError(RuntimeError):
    """どの段階で失敗したかを付けたエラー"""

    def __init__(self, stage: str, party_id: str, cause: BaseException):
        self.stage = stage
        self.party_id = party_id
        self.cause = cause
        super().__init__(f"[{stage}] {PARTY_LABELS.get(party_id, party_id)}: {type(cause).__name__}: {cause}")


def _peer(party_id: str) -> str:
    return PARTY_B if party_id == PARTY_A else PARTY_A


def role_for(party_id: str, swap_roles: bool = False) -> str:
    """Aliceが開始側、Bobが応答側（swap_roles で入れ替え）"""
    initiates = (party_id == PARTY_A) != swap_roles
    return INITIATOR if initiates else RESPONDER


@dataclass
class PartyOutcome:
    """1パーティの実行結果"""
    party_id: str
    role: str
    f: FirstStageVector
    stats: RunStats
    rdf_transcript: Transcript
    vector_transcript: Transcript
    rdf_path: Path


class Party:
    """
    1パーティ分の処理（RDFの公開、第1段階、第2段階）

    自分のビュー以外に持つのは、実験ハーネスが与える期待ベクトル E だけ。
    """

    def __init__(self, party_id: str, view: PartitionedView, expected: ExpectedVector,
                 cfg: SessionConfig, rdf_dir: Path):
        self.party_id = party_id
        self.view = view
        self.expected = expected
        self.cfg = cfg
        self.rdf_dir = Path(rdf_dir)
        self.role = role_for(party_id, cfg.swap_roles)
        self.rdf_path: Optional[Path] = None
        self.rdf_url: Optional[str] = None

    @property
    def label(self) -> str:
        return PARTY_LABELS[self.party_id]

    @property
    def disguise(self):
        return self.cfg.disguise_a if self.party_id == PARTY_A else self.cfg.disguise_b

    def publish(self) -> str:
        """
        RDFを生成してファイルに書き出し、相手に渡す場所を返す
        """
        if self.rdf_url is not None:
            return self.rdf_url
        try:
            ont = OntologyModel.for_schema(self.view.attributes, self.cfg.namespace)
            doc = generate_rdf(self.view, ont, self.disguise, self.cfg.subject_base)
            self.rdf_path = write_rdf(doc, self.rdf_dir / f"{RDF_NAMES[self.party_id]}.rdf")
            if self.cfg.inline_rdf:
                self.rdf_url = inline_location(serialize_rdf_xml(doc))
            else:
                self.rdf_url = location_for(self.rdf_path)
        except Exception as e:
            raise StageError(STAGE1, self.party_id, e) from e
        return self.rdf_url

    def first_stage(self, transport) -> Tuple[FirstStageVector, Transcript]:
        try:
            url = self.publish()
            peer_url, transcript = exchange_rdf_locations(
                self.role, RDF_NAMES[self.party_id], url, RDF_NAMES[_peer(self.party_id)],
                transport, self.cfg.cipher)
            peer_doc = parse_rdf_xml(read_rdf_location(peer_url))
            f = first_stage_predict(self.view, peer_doc)
        except StageError:
            transport.close()
            raise
        except Exception as e:
            transport.close()
            raise StageError(STAGE1, self.party_id, e) from e
        logger.info("[%s] 第1段階が終了しました: f[:3]=%s", self.label, f.tolist()[:3])
        return f, transcript

    def second_stage(self, f: FirstStageVector, transport) -> Tuple[RunStats, Transcript]:
        session = Session(transport, self.cfg.cipher, self.role, name="stage2")
        mine, wanted = VECTOR_NAMES[self.party_id], VECTOR_NAMES[_peer(self.party_id)]
        try:
            session.open()
            stats = run_party_loop(
                f, self.expected, self.cfg.gd,
                lambda own_p: exchange_vectors(session, mine, own_p.values, wanted),
                self.party_id)
            session.close()
        except Exception as e:
            session.abort()
            raise StageError(STAGE2, self.party_id, e) from e
        return stats, session.transcript

    def run(self, stage1_transport, stage2_transport) -> PartyOutcome:
        f, rdf_transcript = self.first_stage(stage1_transport)
        stage1_transport.close()
        try:
            stats, vector_transcript = self.second_stage(f, stage2_transport)
        finally:
            stage2_transport.close()
        return PartyOutcome(self.party_id, self.role, f, stats, rdf_transcript,
                            vector_transcript, self.rdf_path)


@dataclass
class SessionRecording:
    """
    各パーティが送受信したフレームの記録（再生用）

    frames[party][stage] = {"inbound": [bytes...], "outbound": [bytes...]}
    """
    rdf_dir: Path
    frames: Dict[str, Dict[str, Dict[str, List[bytes]]]] = field(default_factory=dict)

    def add(self, party_id: str, stage: str, capture: CapturingTransport) -> None:
        self.frames.setdefault(party_id, {})[stage] = {
            "inbound": list(capture.received),
            "outbound": list(capture.sent),
        }

    def wire_bytes(self, party_id: str) -> bytes:
        """あるパーティが送信した全フレームのバイト列"""
        stages = self.frames.get(party_id, {})
        return b"".join(b"".join(stages[s]["outbound"]) for s in (STAGE1, STAGE2) if s in stages)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        payload = {
            "rdf_dir": str(self.rdf_dir),
            "frames": {
                party: {stage: {k: [b.hex() for b in v] for k, v in d.items()} for stage, d in stages.items()}
                for party, stages in self.frames.items()
            },
        }
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SessionRecording":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        frames = {
            party: {stage: {k: [bytes.fromhex(h) for h in v] for k, v in d.items()} for stage, d in stages.items()}
            for party, stages in payload["frames"].items()
        }
        return cls(Path(payload["rdf_dir"]), frames)


@dataclass
class SessionResult:
    """
    セッション全体の結果

    stats は Alice の、peer_stats は Bob の RunStats（両者の非時間項目は一致する）。
    """
    af: FirstStageVector
    bf: FirstStageVector
    stats: RunStats
    peer_stats: RunStats
    transcript_a: Transcript
    transcript_b: Transcript
    vector_transcript_a: Transcript
    vector_transcript_b: Transcript
    rdf_paths: Tuple[Path, Path]
    expected: ExpectedVector
    recording: Optional[SessionRecording] = None

    @property
    def transcripts(self) -> Tuple[Transcript, Transcript]:
        return self.transcript_a, self.transcript_b

    def outcome(self) -> dict:
        """時間以外の結果（トランスポート間・再生の比較用）"""
        return {
            "af": self.af.tolist(),
            "bf": self.bf.tolist(),
            "stats": self.stats.outcome(),
            "peer_stats": self.peer_stats.outcome(),
            "transcript_a": self.transcript_a.lines(),
            "transcript_b": self.transcript_b.lines(),
            "vector_transcript_a": self.vector_transcript_a.lines(),
            "vector_transcript_b": self.vector_transcript_b.lines(),
        }


@contextmanager
def rdf_workspace(rdf_dir: Optional[Union[str, Path]] = None) -> Iterator[Path]:
    """
    RDFファイルの出力先

    rdf_dir を指定した場合はそのまま使う。未指定の場合は一時ディレクトリを作り、抜けるときに削除する。
    """
    if rdf_dir is not None:
        yield Path(rdf_dir)
        return
    with tempfile.TemporaryDirectory(prefix="ppgd-rdf-") as tmp:
        yield Path(tmp)


def _make_transports(cfg: SessionConfig) -> Dict[str, Tuple]:
    """
    パーティごとに (第1段階の端, 第2段階の端) を用意する

    ソケットの場合は開始側がクライアント端、応答側がサーバ端を使う。
    """
    if cfg.transport == "socket":
        pairs = SocketTransport.loopback_pairs(2, cfg.host, cfg.port)
    else:
        pairs = [InProcessTransport.pair(), InProcessTransport.pair()]
    initiator = PARTY_A if role_for(PARTY_A, cfg.swap_roles) == INITIATOR else PARTY_B
    responder = _peer(initiator)
    return {
        initiator: (pairs[0][0], pairs[1][0]),
        responder: (pairs[0][1], pairs[1][1]),
    }


def _pick_error(errors: Dict[str, BaseException]) -> BaseException:
    """両パーティが失敗した場合は、相手の切断による TransportError 以外を優先する"""
    for party_id in (PARTY_A, PARTY_B):
        err = errors.get(party_id)
        if err is not None and not isinstance(getattr(err, "cause", err), TransportError):
            return err
    return errors.get(PARTY_A) or errors[PARTY_B]


def _assemble(outcomes: Dict[str, PartyOutcome], expected: ExpectedVector,
              recording: Optional[SessionRecording]) -> SessionResult:
    a, b = outcomes[PARTY_A], outcomes[PARTY_B]
    return SessionResult(
        af=a.f, bf=b.f,
        stats=a.stats, peer_stats=b.stats,
        transcript_a=a.rdf_transcript, transcript_b=b.rdf_transcript,
        vector_transcript_a=a.vector_transcript, vector_transcript_b=b.vector_transcript,
        rdf_paths=(a.rdf_path, b.rdf_path),
        expected=expected,
        recording=recording,
    )


def prepare_parties(cfg: SessionConfig, rdf_dir: Path,
                    dataset: Optional[Dataset] = None) -> Dict[str, Party]:
    """データを分割し、2つのパーティを用意する（E はハーネスが全データから計算する）"""
    ds = dataset if dataset is not None else cfg.load_dataset()
    view_a, view_b = partition_vertical(ds, cfg.partition)
    e = expected_vector(ds)
    return {
        PARTY_A: Party(PARTY_A, view_a, e, cfg, rdf_dir),
        PARTY_B: Party(PARTY_B, view_b, e, cfg, rdf_dir),
    }


def run_full_session(cfg: SessionConfig, dataset: Optional[Dataset] = None) -> SessionResult:
    """
    2パーティのセッションを最後まで実行する

    Args:
        cfg: セッションの設定
        dataset: 読み込み済みのデータセット（省略時は cfg から読み込む）

    cfg.rdf_dir が未指定の場合、RDFファイルは一時ディレクトリに書き、セッションの終了時に削除する。

    Returns:
        SessionResult

    Raises:
        StageError: どちらかのパーティが失敗した（stage に Stage1/Stage2）
    """
    with rdf_workspace(cfg.rdf_dir) as rdf_dir:
        return _run_session(cfg, rdf_dir, dataset)


def _run_session(cfg: SessionConfig, rdf_dir: Path, dataset: Optional[Dataset]) -> SessionResult:
    parties = prepare_parties(cfg, rdf_dir, dataset)
    transports = {
        party_id: tuple(CapturingTransport(t) for t in pair)
        for party_id, pair in _make_transports(cfg).items()
    }

    outcomes: Dict[str, PartyOutcome] = {}
    errors: Dict[str, BaseException] = {}

    def worker(party_id: str):
        try:
            outcomes[party_id] = parties[party_id].run(*transports[party_id])
        except BaseException as e:
            logger.error("[%s] セッションが失敗しました: %s", PARTY_LABELS[party_id], e)
            errors[party_id] = e
            for t in transports[party_id]:
                t.close()

    # Bob（待ち受け側）を先に起動する
    threads = [threading.Thread(target=worker, args=(p,), name=PARTY_LABELS[p], daemon=True)
               for p in (PARTY_B, PARTY_A)]
    logger.info("セッションを開始します: transport=%s method=%s λ=%g",
                cfg.transport, cfg.gd.method.value, cfg.gd.lam)
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    if errors:
        raise _pick_error(errors)

    recording = SessionRecording(rdf_dir)
    for party_id, (t1, t2) in transports.items():
        recording.add(party_id, STAGE1, t1)
        recording.add(party_id, STAGE2, t2)

    result = _assemble(outcomes, parties[PARTY_A].expected, recording)
    logger.info("セッションが終了しました: 反復=%d ep=%.6g 時間=%.3fms",
                result.stats.iterations, result.stats.final_ep, result.stats.elapsed * 1000)
    return result


def replay_session(cfg: SessionConfig, recording: SessionRecording,
                   dataset: Optional[Dataset] = None) -> SessionResult:
    """
    記録したフレームを使ってセッションを再生する

    各パーティは記録された受信フレームを順に受け取り、送信フレームは記録と照合される。
    """
    # 送信フレームにRDFの場所が含まれるので、記録と同じディレクトリに書き直す
    created = not recording.rdf_dir.exists()
    try:
        parties = prepare_parties(cfg, recording.rdf_dir, dataset)
        for party in parties.values():
            party.publish()

        outcomes = {}
        for party_id, party in parties.items():
            stages = recording.frames[party_id]
            outcomes[party_id] = party.run(
                ReplayTransport(stages[STAGE1]["inbound"], stages[STAGE1]["outbound"]),
                ReplayTransport(stages[STAGE2]["inbound"], stages[STAGE2]["outbound"]),
            )
    finally:
        if created:
            shutil.rmtree(recording.rdf_dir, ignore_errors=True)
    logger.info("セッションを再生しました: 反復=%d", outcomes[PARTY_A].stats.iterations)
    return _assemble(outcomes, parties[PARTY_A].expected, recording)


def run_split_party(cfg: SessionConfig, party_id: str, listen: bool,
                    dataset: Optional[Dataset] = None, connect_retry: float = 30.0) -> PartyOutcome:
    """
    2プロセス実行用: 片方のパーティだけを実行する

    listen=True の側はサーバソケットで待ち受け、段階ごとに1つずつ接続を受け付ける。
    もう一方は cfg.host:cfg.port に接続する。
    """
    with rdf_workspace(cfg.rdf_dir) as rdf_dir:
        return _run_split_party(prepare_parties(cfg, rdf_dir, dataset)[party_id], cfg, listen, connect_retry)


def _run_split_party(party: Party, cfg: SessionConfig, listen: bool, connect_retry: float) -> PartyOutcome:
    if listen:
        listener = SocketTransport.listen(cfg.host, cfg.port)
        try:
            logger.info("[%s] 待ち受けています: %s:%d", party.label, *listener.getsockname()[:2])
            stage1 = SocketTransport.accept(listener)
            f, rdf_transcript = party.first_stage(stage1)
            stage1.close()
            stage2 = SocketTransport.accept(listener)
        finally:
            listener.close()
    else:
        stage1 = SocketTransport.connect(cfg.host, cfg.port, retry_for=connect_retry)
        f, rdf_transcript = party.first_stage(stage1)
        stage1.close()
        stage2 = SocketTransport.connect(cfg.host, cfg.port, retry_for=connect_retry)
    try:
        stats, vector_transcript = party.second_stage(f, stage2)
    finally:
        stage2.close()
    return PartyOutcome(party.party_id, party.role, f, stats, rdf_transcript, vector_transcript, party.rdf_path)


# --- 情報流の監査 ---------------------------------------------------------

@dataclass(frozen=True)
class Leak:
    party_id: str
    emp_id: int
    attribute: str
    value: float
    where: str


@dataclass
class AuditReport:
    """
    監査結果

    coincidences は、生の値と一致したが公開した一般化値（区分の最大・最小 + df）とも
    一致するため漏洩とみなさなかった数。
    """
    leaks: List[Leak]
    scanned_payloads: int
    coincidences: int = 0

    @property
    def ok(self) -> bool:
        return not self.leaks


def _payload_numbers(name: str, value: str) -> Set[float]:
    """ペイロードに含まれる数値（RDFは hasMax/hasMin のリテラル、ベクトルは要素）"""
    if name.startswith("RDF_"):
        doc = parse_rdf_xml(read_rdf_location(value))
        return {float(t.object) for t in doc.triples if t.local_name.startswith((MAX_PREFIX, MIN_PREFIX))}
    try:
        return set(decode_vector(value).tolist())
    except ProtocolError:
        return {float(t) for t in _NUMBER.findall(value)}


def _sent_payloads(transcripts: List[Transcript]) -> List[Tuple[str, Set[float]]]:
    payloads = []
    for transcript in transcripts:
        for direction, segment in transcript.entries:
            if direction != Direction.SENT or segment.kind != SegmentKind.RESPONSE:
                continue
            name, value = split_response(segment.message)
            payloads.append((name, _payload_numbers(name, value)))
    return payloads


def audit_information_flow(result: SessionResult, dataset: Dataset,
                           spec: PartitionSpec, disguise: Optional[Dict[str, float]] = None) -> AuditReport:
    """
    各パーティが送ったペイロード（参照先のRDF文書を含む）に、自分の生の属性値が含まれていないか調べる

    RDFは hasMax/hasMin のリテラル、ベクトルは要素を取り出し、送信者の生の値と数値として比較する。
    生の値が公開済みの一般化値と偶然一致する場合は漏洩に数えない。
    RDFの場所を読み直すので、RDF_DIR を指定したか INLINE_RDF で実行したセッションの結果を渡すこと。
    """
    views = dict(zip((PARTY_A, PARTY_B), partition_vertical(dataset, spec)))
    disguise = disguise or {}
    transcripts = {
        PARTY_A: [result.transcript_a, result.vector_transcript_a],
        PARTY_B: [result.transcript_b, result.vector_transcript_b],
    }

    leaks: List[Leak] = []
    scanned = 0
    coincidences = 0
    for party_id, view in views.items():
        df = disguise.get(party_id, 10.0)
        published = {float(format_amount(v + df))
                     for bounds in category_extrema(view).items() for v in bounds[1]}
        payloads = _sent_payloads(transcripts[party_id])
        scanned += len(payloads)
        for record in view.records:
            for attr, value in record.attributes.items():
                for name, numbers in payloads:
                    if value not in numbers:
                        continue
                    if value in published:
                        coincidences += 1
                        continue
                    leaks.append(Leak(party_id, record.emp_id, attr, value, name))

    if leaks:
        logger.error("生の値が送信されています: %d 件", len(leaks))
    return AuditReport(leaks, scanned, coincidences)


def expected_initial_ep(result: SessionResult) -> float:
    """ep の初期値（f の平均と E から直接計算）"""
    p0 = (result.af.values + result.bf.values) / 2.0
    e = result.expected.values
    return float(np.dot(p0, p0) / np.dot(e, e))
