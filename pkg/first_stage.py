"""
第1段階の予測

既知属性の合計と、相手のRDFから推定した未知属性の上限値を足し合わせて
レコードごとの予測ベクトル f を作る。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from dataset import PartitionedView
from ontology_rdf import MAX_PREFIX, RdfDocument, unknown_bounds

logger = logging.getLogger(__name__)


class FirstStageValidationError(ValueError):
    """予測値が正でない場合のエラー"""


class AlignmentError(ValueError):
    """ビューとRDFのレコード数が一致しない場合のエラー"""


@dataclass(frozen=True, eq=False)
class FirstStageVector:
    """
    第1段階の予測ベクトル（正の値、長さ n、データセットのレコード順）
    """
    party_id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise FirstStageValidationError("予測ベクトルは長さ1以上の1次元配列でなければなりません。")
        if not np.all(np.isfinite(values)):
            raise FirstStageValidationError("予測ベクトルに有限でない値が含まれています。")
        bad = np.flatnonzero(values <= 0)
        if bad.size:
            raise FirstStageValidationError(
                f"予測値は正でなければなりません: インデックス {bad.tolist()[:10]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FirstStageVector) and self.party_id == other.party_id
                and np.array_equal(self.values, other.values))

    def tolist(self) -> List[float]:
        return self.values.tolist()


def _unknown_attrs_from(doc: RdfDocument) -> List[str]:
    subjects = doc.subjects
    if not subjects:
        return []
    return [name[len(MAX_PREFIX):] for name in doc.literals(subjects[0]) if name.startswith(MAX_PREFIX)]


def first_stage_predict(view: PartitionedView,
                        peer_doc: RdfDocument,
                        unknown_attrs: Optional[Iterable[str]] = None) -> FirstStageVector:
    """
    第1段階の予測ベクトルを求める

    f_i = (レコード i の既知属性の合計) + (相手RDFの hasMax から得た未知属性の上限値の合計)

    Args:
        view: 自分の分割データ
        peer_doc: 相手から受け取ったRDF
        unknown_attrs: 未知属性の集合（省略時はRDFの hasMax から読み取る）

    Returns:
        FirstStageVector

    Raises:
        AlignmentError: RDFのレコード数がビューと異なる
        InferenceError: RDFに必要な記述がない
        FirstStageValidationError: 合計が0のレコードがある
    """
    if len(peer_doc.subjects) != view.n:
        raise AlignmentError(
            f"RDFのレコード数 {len(peer_doc.subjects)} がビューのレコード数 {view.n} と一致しません。")
    attrs = sorted(unknown_attrs) if unknown_attrs is not None else _unknown_attrs_from(peer_doc)

    values = []
    for record in view.records:
        # 合計はまとめて fsum で丸め、E と同じ加数なら同じ値になるようにする
        total = math.fsum(record.known_amounts() + unknown_bounds(peer_doc, record.emp_id, attrs))
        if total <= 0:
            raise FirstStageValidationError(
                f"EmpID {record.emp_id} の予測値が0です（全属性が0で偽装係数も0）。")
        values.append(total)

    logger.info("第1段階の予測を行いました: party=%s n=%d 未知属性=%s", view.party_id, view.n, attrs)
    return FirstStageVector(view.party_id, np.array(values, dtype=np.float64))
