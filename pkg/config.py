"""
設定ファイルの読み込み

設定ファイルは .env と同じ KEY=VALUE 形式のテキストで、python-dotenv で読み込む。
相対パスは設定ファイルのあるディレクトリを基準に解決する。
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv

from dataset import (DEFAULT_CATEGORIES, DEFAULT_SCHEMA, Dataset, DatasetError, PartitionSpec,
                     generate_synthetic, load_csv, uniform_value_ranges)
from gradient_engine import (DEFAULT_DIVERGENCE_WINDOW, DEFAULT_ETA_B, DEFAULT_ETA_S, DEFAULT_LAMBDA,
                             DEFAULT_MAX_ITERATIONS, GdConfig, GdConfigError)
from ontology_rdf import (DEFAULT_NAMESPACE, DEFAULT_SUBJECT_BASE, DisguisePolicy, RdfGenerationError,
                          check_subject_base)
from protocol import CipherConfig

# 環境変数の読み込み
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_DF = 10.0
DEFAULT_SHARED_KEY = os.getenv("PPGD_SHARED_KEY", "ppgdkey1")
DEFAULT_HOST = "127.0.0.1"
TRANSPORTS = ("inproc", "socket")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


class ConfigError(ValueError):
    """設定値が不正"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class SyntheticSpec:
    """合成データの指定"""
    seed: int
    n: int
    categories: Tuple[str, ...] = DEFAULT_CATEGORIES
    value_low: float = 20.0
    value_high: float = 55.0
    attributes: Tuple[str, ...] = DEFAULT_SCHEMA

    def build(self) -> Dataset:
        return generate_synthetic(self.seed, self.n, self.categories,
                                  uniform_value_ranges(self.value_low, self.value_high, self.attributes))


@dataclass(frozen=True)
class SessionConfig:
    """
    1回のセッションの設定

    dataset_path と synthetic のどちらか一方を指定する。rdf_dir が None の場合は一時ディレクトリを使う。
    """
    partition: PartitionSpec
    gd: GdConfig
    cipher: CipherConfig
    dataset_path: Optional[Path] = None
    synthetic: Optional[SyntheticSpec] = None
    disguise_a: DisguisePolicy = DisguisePolicy(DEFAULT_DF)
    disguise_b: DisguisePolicy = DisguisePolicy(DEFAULT_DF)
    transport: str = "inproc"
    host: str = DEFAULT_HOST
    port: int = 0
    rdf_dir: Optional[Path] = None
    inline_rdf: bool = False
    swap_roles: bool = False
    subject_base: str = DEFAULT_SUBJECT_BASE
    namespace: str = DEFAULT_NAMESPACE

    def __post_init__(self):
        if (self.dataset_path is None) == (self.synthetic is None):
            raise ConfigError("DATASET か SEED/N のどちらか一方を指定してください。", "DATASET")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"inproc か socket を指定してください: {self.transport!r}", "TRANSPORT")
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"ポート番号が不正です: {self.port}", "PORT")

    def load_dataset(self) -> Dataset:
        if self.dataset_path is not None:
            return load_csv(self.dataset_path)
        return self.synthetic.build()

    def with_overrides(self, **changes) -> "SessionConfig":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return SessionConfig(**values)


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """KEY=VALUE 形式のファイルを辞書として読み込む（キーは大文字に揃える）"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"設定ファイルが見つかりません: {path}")
    values = dotenv_values(path, encoding="utf-8")
    return {k.strip().upper(): (v or "").strip() for k, v in values.items()}


def _get(values: Mapping[str, str], key: str, default: Optional[str] = None) -> Optional[str]:
    value = values.get(key)
    return default if value is None or value == "" else value


def _int(values: Mapping[str, str], key: str, default: Optional[int]) -> Optional[int]:
    text = _get(values, key)
    if text is None:
        return default
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"整数ではありません: {text!r}", key)


def _float(values: Mapping[str, str], key: str, default: Optional[float]) -> Optional[float]:
    text = _get(values, key)
    if text is None:
        return default
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"数値ではありません: {text!r}", key)


def _bool(values: Mapping[str, str], key: str, default: bool) -> bool:
    text = values.get(key)
    if text is None:
        return default
    if text.lower() in _TRUE:
        return True
    if text.lower() in _FALSE:
        return False
    raise ConfigError(f"真偽値ではありません: {text!r}", key)


def _list(values: Mapping[str, str], key: str) -> Optional[List[str]]:
    text = _get(values, key)
    if text is None:
        return None
    items = [item.strip() for item in text.split(",") if item.strip()]
    if not items:
        raise ConfigError("空のリストです。", key)
    return items


def _float_list(values: Mapping[str, str], key: str) -> Optional[List[float]]:
    items = _list(values, key)
    if items is None:
        return None
    try:
        return [float(item) for item in items]
    except ValueError:
        raise ConfigError(f"数値のリストではありません: {values[key]!r}", key)


def _disguise(values: Mapping[str, str], key: str) -> DisguisePolicy:
    """パーティごとの偽装係数（未指定なら共通の DF）。エラーには実際に使ったキーを付ける"""
    used = key if _get(values, key) is not None else "DF"
    try:
        return DisguisePolicy(_float(values, used, DEFAULT_DF))
    except RdfGenerationError as e:
        raise ConfigError(str(e), used)


def _resolve(base: Optional[Path], text: str) -> Path:
    path = Path(text).expanduser()
    if not path.is_absolute() and base is not None:
        path = base / path
    return path


def gd_config_from(values: Mapping[str, str]) -> GdConfig:
    """勾配降下の設定を読み取る（LAMBDA の別名 MINIMIZATION_FACTOR も受け付ける）"""
    lam_key = "LAMBDA" if _get(values, "LAMBDA") is not None else "MINIMIZATION_FACTOR"
    fields = {
        "method": _get(values, "METHOD", "Stochastic"),
        "eta_s": _float(values, "ETA_S", DEFAULT_ETA_S),
        "eta_b": _float(values, "ETA_B", DEFAULT_ETA_B),
        "lam": _float(values, lam_key, DEFAULT_LAMBDA),
        "max_iterations": _int(values, "MAX_ITERATIONS", DEFAULT_MAX_ITERATIONS),
        "divergence_window": _int(values, "DIVERGENCE_WINDOW", DEFAULT_DIVERGENCE_WINDOW),
        "batch_aggregate": _get(values, "BATCH_AGGREGATE", "sum").lower(),
    }
    try:
        return GdConfig(**fields)
    except GdConfigError as e:
        key = {"lam": lam_key, "eta_s": "ETA_S", "eta_b": "ETA_B", "max_iterations": "MAX_ITERATIONS",
               "divergence_window": "DIVERGENCE_WINDOW", "batch_aggregate": "BATCH_AGGREGATE"}
        culprit = next((k for f, k in key.items() if str(e).startswith(f + " ")), "METHOD")
        raise ConfigError(str(e), culprit)


def session_config_from(values: Mapping[str, str],
                        base_dir: Optional[Path] = None,
                        seed: Optional[int] = None,
                        transport: Optional[str] = None) -> SessionConfig:
    """
    KEY=VALUE の辞書から SessionConfig を作る

    Args:
        values: 設定値
        base_dir: 相対パスの基準ディレクトリ
        seed: コマンドラインの --seed（SEED を上書きし、合成データを使う）
        transport: コマンドラインの --transport
    """
    dataset_text = _get(values, "DATASET")
    seed_value = seed if seed is not None else _int(values, "SEED", None)

    dataset_path = None
    synthetic = None
    if dataset_text is not None and seed is None:
        dataset_path = _resolve(base_dir, dataset_text)
    elif seed_value is not None:
        try:
            synthetic = SyntheticSpec(
                seed=seed_value,
                n=_int(values, "N", 100),
                categories=tuple(_list(values, "CATEGORIES") or DEFAULT_CATEGORIES),
                value_low=_float(values, "VALUE_LOW", 20.0),
                value_high=_float(values, "VALUE_HIGH", 55.0),
                attributes=tuple(_list(values, "ATTRIBUTES") or DEFAULT_SCHEMA),
            )
        except DatasetError as e:
            raise ConfigError(str(e), "SEED")
    else:
        raise ConfigError("データセットが指定されていません（DATASET または SEED）。", "DATASET")

    party_a = _list(values, "PARTY_A_ATTRS")
    party_b = _list(values, "PARTY_B_ATTRS")
    if (party_a is None) != (party_b is None):
        raise ConfigError("PARTY_A_ATTRS と PARTY_B_ATTRS は両方指定してください。", "PARTY_A_ATTRS")
    partition = PartitionSpec.from_names(party_a, party_b) if party_a else PartitionSpec.default_split()

    disguise_a = _disguise(values, "DF_A")
    disguise_b = _disguise(values, "DF_B")
    subject_base = _get(values, "SUBJECT_BASE", DEFAULT_SUBJECT_BASE)
    try:
        check_subject_base(subject_base)
    except RdfGenerationError as e:
        raise ConfigError(str(e), "SUBJECT_BASE")

    try:
        cipher = CipherConfig.from_passphrase(_get(values, "SHARED_KEY", DEFAULT_SHARED_KEY),
                                              _get(values, "CIPHER", "DES"))
    except ValueError as e:
        raise ConfigError(str(e), "CIPHER")

    rdf_dir = _get(values, "RDF_DIR")
    return SessionConfig(
        partition=partition,
        gd=gd_config_from(values),
        cipher=cipher,
        dataset_path=dataset_path,
        synthetic=synthetic,
        disguise_a=disguise_a,
        disguise_b=disguise_b,
        transport=(transport or _get(values, "TRANSPORT", "inproc")).lower(),
        host=_get(values, "HOST", DEFAULT_HOST),
        port=_int(values, "PORT", 0),
        rdf_dir=_resolve(base_dir, rdf_dir) if rdf_dir else None,
        inline_rdf=_bool(values, "INLINE_RDF", False),
        swap_roles=_bool(values, "SWAP_ROLES", False),
        subject_base=subject_base,
        namespace=_get(values, "ONTOLOGY_NAMESPACE", DEFAULT_NAMESPACE),
    )


def load_session_config(path: Union[str, Path],
                        seed: Optional[int] = None,
                        transport: Optional[str] = None) -> SessionConfig:
    """設定ファイルから SessionConfig を読み込む"""
    path = Path(path)
    cfg = session_config_from(read_config_file(path), path.parent, seed=seed, transport=transport)
    logger.info("設定を読み込みました: %s", path)
    return cfg


@dataclass(frozen=True)
class SweepSettings:
    """スイープ固有の設定値（LAMBDAS, METHODS, REPETITIONS, PARALLEL）"""
    lambdas: Tuple[float, ...]
    methods: Tuple[str, ...]
    repetitions: int
    parallel: bool


def sweep_settings_from(values: Mapping[str, str]) -> SweepSettings:
    lambdas = _float_list(values, "LAMBDAS")
    if lambdas is None:
        raise ConfigError("λ の一覧がありません。", "LAMBDAS")
    return SweepSettings(
        lambdas=tuple(lambdas),
        methods=tuple(_list(values, "METHODS") or ("Stochastic", "Batch")),
        repetitions=_int(values, "REPETITIONS", 1),
        parallel=_bool(values, "PARALLEL", False),
    )


def load_sweep_file(path: Union[str, Path],
                    seed: Optional[int] = None,
                    transport: Optional[str] = None) -> Tuple[SweepSettings, SessionConfig]:
    """
    スイープ指定ファイルを読み込む

    LAMBDA は各セルで上書きされるので、テンプレートの検証には先頭の λ を使う。
    """
    path = Path(path)
    values = read_config_file(path)
    settings = sweep_settings_from(values)
    template_values = dict(values)
    template_values["LAMBDA"] = str(settings.lambdas[0])
    template_values.pop("MINIMIZATION_FACTOR", None)
    template = session_config_from(template_values, path.parent, seed=seed, transport=transport)
    return settings, template
