"""
オントロジーモデルとRDFメタデータを扱うモジュール

区分ごとの最大値・最小値を求めて偽装係数(df)を加え、RDF/XMLとして出力する。
出力形式は rdf:RDF の下に rdf:Description を並べるだけの小さなサブセット。
"""
import base64
import io
import logging
import math
import re
import urllib.parse
import urllib.request
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape, quoteattr

from dataset import PartitionedView

logger = logging.getLogger(__name__)

RDF_NAMESPACE = "http://www.w3.org/1999/02/22-rdf-syntax-ns#"
DEFAULT_NAMESPACE = "http://www.ppgd.com/"
DEFAULT_PREFIX = "j.0"
DEFAULT_SUBJECT_BASE = "http://www.SkumarSolutions.com/ID"

MAX_PREFIX = "hasMax"
MIN_PREFIX = "hasMin"
NAME_RELATION = "hasName"
DATA_RELATION = "hasData"

_BOUND_PATTERN = re.compile(r"^(hasMax|hasMin)(.+)$")
_TRAILING_ID = re.compile(r"(\d+)$")
# 宣言されていない n.0 接頭辞は j.0 の誤記として扱う
_TYPO_PREFIX = re.compile(rb"(</?)n\.0:")


class RdfGenerationError(ValueError):
    """RDF生成時のエラー"""


class RdfParseError(ValueError):
    """RDF/XMLの解析エラー"""


class InferenceError(LookupError):
    """RDFから未知属性を推定できない場合のエラー"""


@dataclass(frozen=True)
class OntologyModel:
    """
    従業員ドメインのオントロジー

    属性 a ごとに hasMax<a> と hasMin<a> の関係を持ち、他に hasName と hasData を持つ。
    hasData は分割データそのものを表す関係で、RDFには出力しない。
    """
    namespace: str = DEFAULT_NAMESPACE
    attributes: Tuple[str, ...] = ()
    prefix: str = DEFAULT_PREFIX

    @classmethod
    def for_schema(cls, schema: Iterable[str], namespace: str = DEFAULT_NAMESPACE) -> "OntologyModel":
        return cls(namespace=namespace, attributes=tuple(schema))

    @property
    def relations(self) -> frozenset:
        names = {NAME_RELATION, DATA_RELATION}
        for a in self.attributes:
            names.add(MAX_PREFIX + a)
            names.add(MIN_PREFIX + a)
        return frozenset(names)

    def relation_for(self, attribute: str, kind: str) -> str:
        """
        属性に対応する関係の完全なIRIを返す

        Args:
            attribute: 属性名
            kind: "max" または "min"
        """
        if attribute not in self.attributes:
            raise RdfGenerationError(f"オントロジーに属性 {attribute} の関係がありません。")
        local = (MAX_PREFIX if kind == "max" else MIN_PREFIX) + attribute
        return self.namespace + local

    def name_relation(self) -> str:
        return self.namespace + NAME_RELATION


@dataclass(frozen=True)
class DisguisePolicy:
    """偽装係数 df（一般化した値に加算する金額）"""
    df: float = 10.0

    def __post_init__(self):
        if not math.isfinite(self.df) or self.df < 0:
            raise RdfGenerationError(f"偽装係数は0以上の有限値でなければなりません: {self.df}")


@dataclass(frozen=True)
class RdfTriple:
    subject: str
    predicate: str
    object: str

    @property
    def local_name(self) -> str:
        return _local_name(self.predicate)


@dataclass(frozen=True)
class RdfDocument:
    """
    RDFトリプルの並び（レコードごとに1つの記述ブロック）
    """
    triples: Tuple[RdfTriple, ...] = ()
    namespaces: Mapping[str, str] = field(default_factory=dict, compare=False)
    _blocks: Dict[str, List[RdfTriple]] = field(init=False, repr=False, compare=False)
    _ids: Dict[int, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "triples", tuple(self.triples))
        blocks: Dict[str, List[RdfTriple]] = {}
        ids: Dict[int, str] = {}
        for t in self.triples:
            if t.subject not in blocks:
                blocks[t.subject] = []
                match = _TRAILING_ID.search(t.subject)
                if match:
                    ids.setdefault(int(match.group(1)), t.subject)
            blocks[t.subject].append(t)
        object.__setattr__(self, "_blocks", blocks)
        object.__setattr__(self, "_ids", ids)

    @property
    def subjects(self) -> List[str]:
        return list(self._blocks)

    def description(self, subject: str) -> List[RdfTriple]:
        return list(self._blocks.get(subject, ()))

    def subject_for(self, emp_id: int) -> Optional[str]:
        """EmpID に対応するサブジェクトURIを探す（末尾の数字で照合）"""
        return self._ids.get(int(emp_id))

    def literals(self, subject: str) -> Dict[str, str]:
        """ローカル名 → リテラル"""
        return {t.local_name: t.object for t in self._blocks.get(subject, ())}


class ExtremaTable:
    """
    (区分, 属性) → (最大値, 最小値) の表
    """

    def __init__(self, entries: Optional[Dict[Tuple[str, str], Tuple[float, float]]] = None):
        self._entries = dict(entries or {})

    def __getitem__(self, key: Tuple[str, str]) -> Tuple[float, float]:
        return self._entries[key]

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, ExtremaTable) and self._entries == other._entries

    def items(self):
        return self._entries.items()

    def max(self, category: str, attribute: str) -> float:
        return self._entries[(category, attribute)][0]

    def min(self, category: str, attribute: str) -> float:
        return self._entries[(category, attribute)][1]


def _local_name(predicate: str) -> str:
    for sep in ("#", "/"):
        if sep in predicate:
            predicate = predicate.rsplit(sep, 1)[1]
    return predicate


def format_amount(value: float) -> str:
    """金額リテラルの文字列表現（整数値は小数点なし、それ以外は往復可能な表現）"""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def category_extrema(view: PartitionedView) -> ExtremaTable:
    """
    区分ごとに各属性の最大値と最小値を求める
    """
    entries: Dict[Tuple[str, str], Tuple[float, float]] = {}
    for record in view.records:
        for attr, value in record.attributes.items():
            key = (record.category, attr)
            if key in entries:
                hi, lo = entries[key]
                entries[key] = (max(hi, value), min(lo, value))
            else:
                entries[key] = (value, value)
    return ExtremaTable(entries)


def check_subject_base(subject_base: str) -> str:
    """
    サブジェクトURIの接頭辞を検査する

    受信側は URI 末尾の数字を EmpID として読むので、数字で終わる接頭辞は受け付けない。
    """
    if not subject_base or subject_base[-1].isdigit():
        raise RdfGenerationError(f"サブジェクトURIの接頭辞は空でなく、数字以外で終わる必要があります: {subject_base!r}")
    return subject_base


def generate_rdf(view: PartitionedView,
                 ont: OntologyModel,
                 policy: DisguisePolicy,
                 subject_base: str = DEFAULT_SUBJECT_BASE) -> RdfDocument:
    """
    分割データから偽装した一般化RDFを生成する

    各レコードの記述ブロックには、既知属性ごとに hasMax<a> = 区分最大値 + df、
    hasMin<a> = 区分最小値 + df と、最後に hasName を出力する。
    個々のレコードの生の値は出力しない。

    Args:
        view: 自分の分割データ
        ont: オントロジーモデル
        policy: 偽装係数
        subject_base: サブジェクトURIの接頭辞

    Returns:
        RdfDocument
    """
    check_subject_base(subject_base)
    for attr in view.attributes:
        ont.relation_for(attr, "max")

    extrema = category_extrema(view)
    triples = []
    for record in view.records:
        subject = f"{subject_base}{record.emp_id}"
        for attr in view.attributes:
            hi, lo = extrema[(record.category, attr)]
            triples.append(RdfTriple(subject, ont.relation_for(attr, "max"), format_amount(hi + policy.df)))
            triples.append(RdfTriple(subject, ont.relation_for(attr, "min"), format_amount(lo + policy.df)))
        triples.append(RdfTriple(subject, ont.name_relation(), record.name))

    logger.debug("RDFを生成しました: party=%s records=%d triples=%d",
                 view.party_id, view.n, len(triples))
    return RdfDocument(tuple(triples), {ont.prefix: ont.namespace, "rdf": RDF_NAMESPACE})


def _bindings_for(doc: RdfDocument) -> List[Tuple[str, str]]:
    bindings = dict(doc.namespaces)
    bindings.pop("rdf", None)
    if not bindings:
        bindings[DEFAULT_PREFIX] = DEFAULT_NAMESPACE
    counter = 0
    for t in doc.triples:
        ns = t.predicate[: len(t.predicate) - len(t.local_name)]
        if ns not in bindings.values():
            counter += 1
            bindings[f"ns{counter}"] = ns
    return list(bindings.items()) + [("rdf", RDF_NAMESPACE)]


def serialize_rdf_xml(doc: RdfDocument) -> bytes:
    """
    RdfDocument を RDF/XML（rdf:Description を並べる形式）に変換する
    """
    bindings = _bindings_for(doc)
    prefix_of = {uri: prefix for prefix, uri in bindings}

    out = io.StringIO()
    out.write('<?xml version="1.0" encoding="UTF-8"?>\n')
    out.write("<rdf:RDF")
    for prefix, uri in bindings:
        out.write(f"\n    xmlns:{prefix}={quoteattr(uri)}")
    out.write(">\n")

    for subject in doc.subjects:
        out.write(f"  <rdf:Description rdf:about={quoteattr(subject)}>\n")
        for t in doc.description(subject):
            local = t.local_name
            tag = f"{prefix_of[t.predicate[: len(t.predicate) - len(local)]]}:{local}"
            out.write(f"    <{tag}>{escape(t.object)}</{tag}>\n")
        out.write("  </rdf:Description>\n")

    out.write("</rdf:RDF>\n")
    return out.getvalue().encode("utf-8")


def _check_bound_literal(subject: str, predicate: str, text: str) -> None:
    try:
        value = float(text)
    except ValueError:
        raise RdfParseError(f"{subject} の {predicate} が数値ではありません: {text!r}")
    if not math.isfinite(value) or value < 0:
        raise RdfParseError(f"{subject} の {predicate} は0以上の有限値でなければなりません: {text!r}")


def parse_rdf_xml(data: bytes) -> RdfDocument:
    """
    RDF/XML を解析して RdfDocument を返す

    Raises:
        RdfParseError: XMLが壊れている場合、または hasMax/hasMin が数値でない場合
    """
    if b"xmlns:n.0" not in data:
        data = _TYPO_PREFIX.sub(rb"\1j.0:", data)

    namespaces: Dict[str, str] = {}
    try:
        for _, (prefix, uri) in ET.iterparse(io.BytesIO(data), events=("start-ns",)):
            namespaces.setdefault(prefix, uri)
        root = ET.fromstring(data)
    except ET.ParseError as e:
        line, column = e.position
        raise RdfParseError(f"XMLを解析できません (line {line}, column {column}): {e}")

    if root.tag != f"{{{RDF_NAMESPACE}}}RDF":
        raise RdfParseError(f"ルート要素が rdf:RDF ではありません: {root.tag}")

    triples = []
    for index, desc in enumerate(root, start=1):
        if desc.tag != f"{{{RDF_NAMESPACE}}}Description":
            raise RdfParseError(f"{index}番目の子要素が rdf:Description ではありません: {desc.tag}")
        subject = desc.get(f"{{{RDF_NAMESPACE}}}about")
        if not subject:
            raise RdfParseError(f"{index}番目の rdf:Description に rdf:about がありません")
        for prop in desc:
            if not prop.tag.startswith("{"):
                raise RdfParseError(f"{subject} のプロパティに名前空間がありません: {prop.tag}")
            ns, local = prop.tag[1:].split("}", 1)
            text = prop.text or ""
            if _BOUND_PATTERN.match(local):
                _check_bound_literal(subject, local, text)
            triples.append(RdfTriple(subject, ns + local, text))

    return RdfDocument(tuple(triples), namespaces)


def _bound_literals(doc: RdfDocument, emp_id: int,
                    attributes: Iterable[str], prefix: str) -> Dict[str, float]:
    attributes = list(attributes)
    if not attributes:
        return {}
    subject = doc.subject_for(emp_id)
    if subject is None:
        raise InferenceError(f"EmpID {emp_id} の記述ブロックがRDFにありません。")
    literals = doc.literals(subject)
    bounds = {}
    for attr in attributes:
        key = prefix + attr
        if key not in literals:
            raise InferenceError(f"EmpID {emp_id} の記述に {key} がありません。")
        bounds[attr] = float(literals[key])
    return bounds


def unknown_bounds(doc: RdfDocument, emp_id: int, unknown_attrs: Iterable[str]) -> List[float]:
    """未知属性の上限値（hasMax のリテラル）を並べて返す"""
    return list(_bound_literals(doc, emp_id, unknown_attrs, MAX_PREFIX).values())


def infer_unknown_sum(doc: RdfDocument, emp_id: int, unknown_attrs: Iterable[str]) -> float:
    """
    未知属性の上限値の合計を返す

    hasMin は推定に使わない（偽装された上限値のみを使う）。

    Raises:
        InferenceError: 記述ブロックや述語が見つからない場合
    """
    return math.fsum(unknown_bounds(doc, emp_id, unknown_attrs))


def extract_bounds(doc: RdfDocument, emp_id: int,
                   attributes: Sequence[str]) -> Dict[str, Tuple[float, float]]:
    """属性 → (hasMax, hasMin) の表を返す（レポート用）"""
    highs = _bound_literals(doc, emp_id, attributes, MAX_PREFIX)
    lows = _bound_literals(doc, emp_id, attributes, MIN_PREFIX)
    return {a: (highs[a], lows[a]) for a in attributes}


def write_rdf(doc: RdfDocument, path: Union[str, Path]) -> Path:
    """RDFファイルを書き出す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_rdf_xml(doc))
    logger.info("RDFを書き出しました: %s", path)
    return path


def location_for(path: Union[str, Path]) -> str:
    """ファイルパスを file:// URI にする"""
    return Path(path).resolve().as_uri()


def inline_location(data: bytes) -> str:
    """文書そのものを data: URI に埋め込む"""
    return "data:application/rdf+xml;base64," + base64.b64encode(data).decode("ascii")


def read_rdf_location(url: str) -> bytes:
    """
    RDFの場所（ファイルパス、file:// URI、data: URI）から文書を読み込む
    """
    if url.startswith("data:"):
        header, _, payload = url.partition(",")
        if not header.endswith(";base64"):
            return urllib.parse.unquote_to_bytes(payload)
        try:
            return base64.b64decode(payload, validate=True)
        except ValueError as e:
            raise RdfParseError(f"data: URI を復号できません: {e}")
    if url.startswith("file:"):
        path = Path(urllib.request.url2pathname(urllib.parse.urlparse(url).path))
    else:
        path = Path(url)
    try:
        return path.read_bytes()
    except OSError as e:
        raise RdfParseError(f"RDFファイルを読み込めません: {url}: {e}")
