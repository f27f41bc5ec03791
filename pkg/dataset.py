"""
従業員データセット（未分割データ X）を扱うモジュール

合成データの生成、CSV の読み書き、垂直分割、期待ベクトル E の計算を提供する。
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# CSVの列名
ID_COLUMN = "EmpID"
NAME_COLUMN = "name"
CATEGORY_COLUMN = "Category"

# 実験で使われる給与項目と従業員区分
DEFAULT_SCHEMA = ("Basic", "HRA", "flat", "Travel", "PF", "Gratuity", "GDP", "PerformanceAward")
DEFAULT_CATEGORIES = ("TeamLead", "ProjectManager", "ProgramManager")
DEFAULT_PARTY_A = ("Basic", "HRA", "flat", "Travel")
DEFAULT_PARTY_B = ("PF", "Gratuity", "GDP", "PerformanceAward")

# 本文では "GD"、表のヘッダでは "GDP" と書かれている
ATTRIBUTE_ALIASES = {"GD": "GDP"}

PARTY_A = "A"
PARTY_B = "B"


class DatasetError(ValueError):
    """データセットが不正な場合のエラー"""


class CsvParseError(DatasetError):
    """CSVの解析エラー（行・列を保持する）"""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class PartitionError(DatasetError):
    """分割指定が不正な場合のエラー"""


def canonical_attribute(name: str) -> str:
    """
    属性名を正規化する（GD → GDP）

    Args:
        name: 属性名

    Returns:
        正規化した属性名
    """
    name = name.strip()
    return ATTRIBUTE_ALIASES.get(name, name)


def _check_amount(value: float, what: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise DatasetError(f"金額は0以上の有限値でなければなりません: {what}={value}")
    return value


@dataclass(frozen=True)
class EmployeeRecord:
    """
    従業員1名分のレコード
    """
    emp_id: int
    name: str
    category: str
    attributes: Mapping[str, float]

    def __post_init__(self):
        if isinstance(self.emp_id, bool) or int(self.emp_id) != self.emp_id or self.emp_id <= 0:
            raise DatasetError(f"EmpIDは正の整数でなければなりません: {self.emp_id!r}")
        if not self.category or not str(self.category).strip():
            raise DatasetError(f"EmpID {self.emp_id} の区分(Category)が空です。")
        checked = {
            key: _check_amount(value, f"EmpID {self.emp_id}.{key}")
            for key, value in self.attributes.items()
        }
        object.__setattr__(self, "emp_id", int(self.emp_id))
        object.__setattr__(self, "attributes", checked)

    def amounts(self, attributes: Iterable[str]) -> List[float]:
        """指定した属性の値を順に返す"""
        return [self.attributes[a] for a in attributes]


@dataclass(frozen=True)
class Dataset:
    """
    未分割のデータセット（n レコード × m 属性）
    """
    schema: Tuple[str, ...]
    records: Tuple[EmployeeRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "records", tuple(self.records))
        if not self.schema:
            raise DatasetError("属性が1つもありません (m >= 1)。")
        if len(set(self.schema)) != len(self.schema):
            raise DatasetError(f"属性名が重複しています: {list(self.schema)}")
        if not self.records:
            raise DatasetError("no records: レコードが1件もありません (n >= 1)。")
        expected = set(self.schema)
        seen = set()
        for record in self.records:
            if record.emp_id in seen:
                raise DatasetError(f"EmpIDが重複しています: {record.emp_id}")
            seen.add(record.emp_id)
            if set(record.attributes) != expected:
                raise DatasetError(
                    f"EmpID {record.emp_id} の属性がスキーマと一致しません: "
                    f"{sorted(record.attributes)} != {sorted(expected)}"
                )

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def m(self) -> int:
        return len(self.schema)

    @property
    def emp_ids(self) -> List[int]:
        return [r.emp_id for r in self.records]

    def matrix(self) -> np.ndarray:
        """n×m の行列（スキーマ順）を返す"""
        return np.array([r.amounts(self.schema) for r in self.records], dtype=np.float64)

    def scaled(self, factor: float) -> "Dataset":
        """全ての金額を factor 倍したデータセットを返す"""
        if not factor > 0:
            raise DatasetError(f"倍率は正でなければなりません: {factor}")
        return Dataset(
            self.schema,
            tuple(
                EmployeeRecord(r.emp_id, r.name, r.category,
                               {k: v * factor for k, v in r.attributes.items()})
                for r in self.records
            ),
        )


@dataclass(frozen=True)
class PartitionSpec:
    """
    垂直分割の指定（AliceとBobの属性集合）
    """
    party_a_attrs: FrozenSet[str]
    party_b_attrs: FrozenSet[str]

    def __post_init__(self):
        object.__setattr__(self, "party_a_attrs", frozenset(self.party_a_attrs))
        object.__setattr__(self, "party_b_attrs", frozenset(self.party_b_attrs))

    @classmethod
    def from_names(cls, party_a: Iterable[str], party_b: Iterable[str]) -> "PartitionSpec":
        """別名を正規化して分割指定を作る"""
        return cls(
            frozenset(canonical_attribute(a) for a in party_a),
            frozenset(canonical_attribute(b) for b in party_b),
        )

    @classmethod
    def default_split(cls) -> "PartitionSpec":
        """実験と同じ分割（Alice: Basic,HRA,flat,Travel / Bob: PF,Gratuity,GDP,PerformanceAward）"""
        return cls(frozenset(DEFAULT_PARTY_A), frozenset(DEFAULT_PARTY_B))

    def swapped(self) -> "PartitionSpec":
        return PartitionSpec(self.party_b_attrs, self.party_a_attrs)

    def attrs_for(self, party_id: str) -> FrozenSet[str]:
        if party_id == PARTY_A:
            return self.party_a_attrs
        if party_id == PARTY_B:
            return self.party_b_attrs
        raise PartitionError(f"不明なパーティです: {party_id!r}")

    def validate(self, schema: Sequence[str]) -> None:
        """
        スキーマに対して分割指定を検証する

        Raises:
            PartitionError: 空・重複・網羅していない場合
        """
        if not self.party_a_attrs or not self.party_b_attrs:
            raise PartitionError("両パーティとも少なくとも1つの属性を持つ必要があります。")
        overlap = self.party_a_attrs & self.party_b_attrs
        if overlap:
            raise PartitionError(f"属性が両パーティに重複しています: {sorted(overlap)}")
        union = self.party_a_attrs | self.party_b_attrs
        if union != set(schema):
            missing = sorted(set(schema) - union)
            unknown = sorted(union - set(schema))
            raise PartitionError(f"分割がスキーマを網羅していません: 不足={missing}, 未知={unknown}")


@dataclass(frozen=True)
class ViewRecord:
    """分割後の1レコード（EmpID・氏名・区分は両側に残る）"""
    emp_id: int
    name: str
    category: str
    attributes: Mapping[str, float]

    def known_amounts(self) -> List[float]:
        return list(self.attributes.values())


@dataclass(frozen=True)
class PartitionedView:
    """
    あるパーティが保持する垂直分割データ
    """
    party_id: str
    attributes: Tuple[str, ...]
    records: Tuple[ViewRecord, ...]

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def emp_ids(self) -> List[int]:
        return [r.emp_id for r in self.records]


@dataclass(frozen=True, eq=False)
class ExpectedVector:
    """
    期待ベクトル E（各レコードの全属性の合計）
    """
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise DatasetError("期待ベクトルは長さ1以上の1次元配列でなければなりません。")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DatasetError("期待ベクトルの値は0以上の有限値でなければなりません。")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def tolist(self) -> List[float]:
        return self.values.tolist()


def generate_synthetic(seed: int,
                       n: int,
                       categories: Sequence[str] = DEFAULT_CATEGORIES,
                       value_ranges: Optional[Mapping[str, Tuple[float, float]]] = None) -> Dataset:
    """
    合成の従業員データセットを生成する

    Args:
        seed: 乱数シード（同じシードなら同じデータ）
        n: レコード数
        categories: 区分ラベルのリスト
        value_ranges: 属性名 → (下限, 上限)。省略時は全属性 [20, 55]

    Returns:
        Dataset
    """
    if n < 1:
        raise DatasetError(f"レコード数は1以上でなければなりません: n={n}")
    categories = list(categories)
    if not categories or any(not str(c).strip() for c in categories):
        raise DatasetError("区分リストが空です。")
    if value_ranges is None:
        value_ranges = uniform_value_ranges()
    if not value_ranges:
        raise DatasetError("属性の範囲が指定されていません。")
    for attr, (lo, hi) in value_ranges.items():
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or lo > hi:
            raise DatasetError(f"属性 {attr} の範囲が不正です: [{lo}, {hi}]")

    rng = np.random.default_rng(seed)
    schema = tuple(canonical_attribute(a) for a in value_ranges)
    picked = rng.integers(0, len(categories), size=n)
    columns = {
        attr: np.round(rng.uniform(lo, hi, size=n), 2)
        for attr, (lo, hi) in zip(schema, value_ranges.values())
    }
    records = []
    for i in range(n):
        records.append(EmployeeRecord(
            emp_id=i + 1,
            name=f"emp{i + 1:04d}",
            category=categories[int(picked[i])],
            # 丸めた値を範囲内に収める
            attributes={
                attr: float(min(max(columns[attr][i], lo), hi))
                for attr, (lo, hi) in zip(schema, value_ranges.values())
            },
        ))
    logger.debug("合成データを生成しました: seed=%s n=%d m=%d", seed, n, len(schema))
    return Dataset(schema, tuple(records))


def uniform_value_ranges(low: float = 20.0, high: float = 55.0,
                       schema: Sequence[str] = DEFAULT_SCHEMA) -> Dict[str, Tuple[float, float]]:
    """全属性に同じ範囲を割り当てる"""
    return {attr: (low, high) for attr in schema}


def load_csv(path: Union[str, Path]) -> Dataset:
    """
    CSVファイルからデータセットを読み込む

    ヘッダは EmpID,name,<属性...>,Category の形式。EmpID・name・Category 以外の列は
    全て属性として扱い、m はヘッダから決まる。

    Args:
        path: CSVファイルのパス

    Returns:
        Dataset

    Raises:
        CsvParseError: 列の欠落・数値でない金額・EmpIDの重複など
    """
    path = Path(path)
    if not path.exists():
        raise CsvParseError(f"データセットファイルが見つかりません: {path}")
    try:
        raw_header = pd.read_csv(path, header=None, nrows=1, dtype=str, keep_default_na=False,
                                 encoding="utf-8", skipinitialspace=True).iloc[0].tolist()
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8",
                            skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise CsvParseError(f"ヘッダがありません: {path}")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise CsvParseError(f"CSVを解析できません: {path}: {e}")

    # pandas は重複した列名を Basic.1 のように変えるので、元のヘッダで調べる
    raw_header = [str(c).strip() for c in raw_header]
    repeated = sorted({c for c in raw_header if raw_header.count(c) > 1})
    if repeated:
        raise CsvParseError(f"列名が重複しています: {repeated}", column=repeated[0])
    header = [str(c).strip() for c in frame.columns]
    frame.columns = header
    for required in (ID_COLUMN, NAME_COLUMN, CATEGORY_COLUMN):
        if required not in header:
            raise CsvParseError("必須列がありません", column=required)

    raw_attrs = [c for c in header if c not in (ID_COLUMN, NAME_COLUMN, CATEGORY_COLUMN)]
    schema = [canonical_attribute(c) for c in raw_attrs]
    if not schema:
        raise CsvParseError("属性列が1つもありません")
    if len(set(schema)) != len(schema):
        raise CsvParseError(f"属性列が重複しています: {raw_attrs}")
    if frame.empty:
        raise CsvParseError(f"no records: {path}")

    records = []
    seen = set()
    for index, row in enumerate(frame.itertuples(index=False), start=1):
        values = dict(zip(header, row))
        try:
            emp_id = int(str(values[ID_COLUMN]).strip())
        except ValueError:
            raise CsvParseError("EmpIDが整数ではありません", row=index, column=ID_COLUMN)
        if emp_id <= 0:
            raise CsvParseError("EmpIDは正の整数でなければなりません", row=index, column=ID_COLUMN)
        if emp_id in seen:
            raise CsvParseError(f"EmpIDが重複しています: {emp_id}", row=index, column=ID_COLUMN)
        seen.add(emp_id)

        category = str(values[CATEGORY_COLUMN]).strip()
        if not category:
            raise CsvParseError("区分が空です", row=index, column=CATEGORY_COLUMN)

        amounts = {}
        for raw, attr in zip(raw_attrs, schema):
            text = str(values[raw]).strip()
            try:
                amount = float(text)
            except ValueError:
                raise CsvParseError(f"金額が数値ではありません: {text!r}", row=index, column=raw)
            if not math.isfinite(amount) or amount < 0:
                raise CsvParseError(f"金額は0以上の有限値でなければなりません: {text!r}",
                                    row=index, column=raw)
            amounts[attr] = amount

        records.append(EmployeeRecord(emp_id, str(values[NAME_COLUMN]).strip(), category, amounts))

    logger.info("データセットを読み込みました: %s (n=%d, m=%d)", path, len(records), len(schema))
    return Dataset(tuple(schema), tuple(records))


def save_csv(ds: Dataset, path: Union[str, Path]) -> Path:
    """
    データセットをCSVに書き出す（金額は小数点以下2桁）

    Returns:
        書き出したファイルのパス
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in ds.records:
        row = {ID_COLUMN: r.emp_id, NAME_COLUMN: r.name}
        row.update(r.attributes)
        row[CATEGORY_COLUMN] = r.category
        rows.append(row)
    columns = [ID_COLUMN, NAME_COLUMN, *ds.schema, CATEGORY_COLUMN]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.2f",
                                               encoding="utf-8")
    return path


def partition_vertical(ds: Dataset, spec: PartitionSpec) -> Tuple[PartitionedView, PartitionedView]:
    """
    データセットを AliceとBob の2つのビューに垂直分割する

    レコード順とEmpIDは元のデータセットと同じで、EmpID・氏名・区分は両方に残る。

    Returns:
        (Aliceのビュー, Bobのビュー)
    """
    spec.validate(ds.schema)
    views = []
    for party_id in (PARTY_A, PARTY_B):
        attrs = tuple(a for a in ds.schema if a in spec.attrs_for(party_id))
        views.append(PartitionedView(
            party_id=party_id,
            attributes=attrs,
            records=tuple(
                ViewRecord(r.emp_id, r.name, r.category, {a: r.attributes[a] for a in attrs})
                for r in ds.records
            ),
        ))
    return views[0], views[1]


def reassemble(view_a: PartitionedView, view_b: PartitionedView,
               schema: Optional[Sequence[str]] = None) -> Dataset:
    """
    2つのビューから元のデータセットを組み立て直す
    """
    if view_a.emp_ids != view_b.emp_ids:
        raise PartitionError("2つのビューのレコード順が一致しません。")
    if schema is None:
        schema = view_a.attributes + view_b.attributes
    records = []
    for ra, rb in zip(view_a.records, view_b.records):
        merged = {**ra.attributes, **rb.attributes}
        records.append(EmployeeRecord(ra.emp_id, ra.name, ra.category,
                                      {a: merged[a] for a in schema}))
    return Dataset(tuple(schema), tuple(records))


def expected_vector(ds: Dataset) -> ExpectedVector:
    """
    期待ベクトル E を計算する（E_i = レコード i の全属性の合計）
    """
    return ExpectedVector(np.array(
        [math.fsum(r.amounts(ds.schema)) for r in ds.records], dtype=np.float64
    ))
