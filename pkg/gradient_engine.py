"""
第2段階の予測（勾配降下）

予測関数 p_i = w_i^2 * f_i、勾配 2 * w_i * f_i、確率的・バッチ更新、期待確率 ep と
学習停止点 λ による反復ループを提供する。
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from dataset import PARTY_A, ExpectedVector
from first_stage import FirstStageVector

logger = logging.getLogger(__name__)

# 従業員データ（数百〜数千の値）に対する学習率
DEFAULT_ETA_S = 0.00001
DEFAULT_ETA_B = 0.000001
DEFAULT_LAMBDA = 0.5
DEFAULT_MAX_ITERATIONS = 1_000_000
DEFAULT_DIVERGENCE_WINDOW = 5

ArrayLike = Union[np.ndarray, Sequence[float], "WeightVector", "PredictionVector", FirstStageVector, ExpectedVector]


class GdConfigError(ValueError):
    """勾配降下の設定が不正"""


class UndefinedRatioError(ZeroDivisionError):
    """期待ベクトルが全て0で ep が定義できない"""


class NonConvergenceError(RuntimeError):
    """最大反復回数までに学習停止点に達しなかった"""

    def __init__(self, message: str, ep_trace: Sequence[float]):
        super().__init__(message)
        self.ep_trace = list(ep_trace)


class DivergenceError(RuntimeError):
    """ep が連続して増加した"""

    def __init__(self, message: str, ep_trace: Sequence[float]):
        super().__init__(message)
        self.ep_trace = list(ep_trace)


class GdMethod(str, Enum):
    STOCHASTIC = "Stochastic"
    BATCH = "Batch"

    @classmethod
    def parse(cls, text: Union[str, "GdMethod"]) -> "GdMethod":
        if isinstance(text, GdMethod):
            return text
        for method in cls:
            if method.value.lower() == str(text).strip().lower():
                return method
        raise GdConfigError(f"不明な勾配降下法です: {text!r}（Stochastic または Batch）")


@dataclass(frozen=True)
class GdConfig:
    """
    勾配降下の設定

    lam は学習停止点 λ（実験では「最小化係数」とも呼ぶ）。
    """
    method: GdMethod = GdMethod.STOCHASTIC
    eta_s: float = DEFAULT_ETA_S
    eta_b: float = DEFAULT_ETA_B
    lam: float = DEFAULT_LAMBDA
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    divergence_window: int = DEFAULT_DIVERGENCE_WINDOW
    batch_aggregate: str = "sum"
    enforce_step_bound: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", GdMethod.parse(self.method))
        for name in ("eta_s", "eta_b", "lam"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise GdConfigError(f"{name} は正の有限値でなければなりません: {value!r}")
        if self.max_iterations < 1:
            raise GdConfigError(f"max_iterations は1以上でなければなりません: {self.max_iterations}")
        if self.divergence_window < 1:
            raise GdConfigError(f"divergence_window は1以上でなければなりません: {self.divergence_window}")
        if self.batch_aggregate not in ("sum", "mean"):
            raise GdConfigError(f"batch_aggregate は sum か mean です: {self.batch_aggregate!r}")

    @property
    def minimization_factor(self) -> float:
        return self.lam

    @property
    def eta(self) -> float:
        return self.eta_s if self.method == GdMethod.STOCHASTIC else self.eta_b

    def with_overrides(self, **changes) -> "GdConfig":
        return replace(self, **changes)


def _values(x: ArrayLike) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _same_length(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"{what}: ベクトル長が一致しません ({a.shape} と {b.shape})")


@dataclass(frozen=True, eq=False)
class WeightVector:
    """重みベクトル w（初期値は全て1）"""
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("重みベクトルは有限値の1次元配列でなければなりません。")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def ones(cls, n: int) -> "WeightVector":
        return cls(np.ones(n, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.values.size)

    def tolist(self) -> List[float]:
        return self.values.tolist()


@dataclass(frozen=True, eq=False)
class PredictionVector:
    """第2段階の予測ベクトル p"""
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("予測ベクトルは有限値の1次元配列でなければなりません。")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, PredictionVector) and np.array_equal(self.values, other.values)

    def tolist(self) -> List[float]:
        return self.values.tolist()


@dataclass(frozen=True)
class RunStats:
    """
    第2段階の実行結果

    iterations は重みの更新回数、ep_trace[0] は更新前の ep。elapsed は秒。
    """
    final_p: PredictionVector
    final_ep: float
    iterations: int
    elapsed: float
    ep_trace: Tuple[float, ...]

    def outcome(self) -> dict:
        """時間以外の結果（トランスポート間の比較用）"""
        return {
            "final_p": self.final_p.tolist(),
            "final_ep": self.final_ep,
            "iterations": self.iterations,
            "ep_trace": list(self.ep_trace),
        }


def predict(w: ArrayLike, f: ArrayLike) -> PredictionVector:
    """p_i = w_i^2 * f_i"""
    wv, fv = _values(w), _values(f)
    _same_length(wv, fv, "predict")
    return PredictionVector(wv * wv * fv)


def gradient(w: ArrayLike, f: ArrayLike) -> np.ndarray:
    """予測関数の w についての微分 2 * w_i * f_i"""
    wv, fv = _values(w), _values(f)
    _same_length(wv, fv, "gradient")
    return 2.0 * wv * fv


def step_stochastic(w: ArrayLike, f: ArrayLike, eta_s: float) -> WeightVector:
    """
    確率的勾配降下の1ステップ

    各要素は自分自身の勾配だけで更新される（w_i ← w_i − η_s·2·w_i·f_i）。
    要素同士が依存しないので、i=0…n−1 の順次更新とベクトル演算の結果は一致する。
    """
    if not eta_s > 0:
        raise GdConfigError(f"eta_s は正でなければなりません: {eta_s}")
    wv = _values(w)
    return WeightVector(wv - eta_s * gradient(wv, f))


def step_batch(w: ArrayLike, f: ArrayLike, eta_b: float, aggregate: str = "sum") -> WeightVector:
    """
    バッチ勾配降下の1ステップ

    更新前の重みで S = Σ_j 2·w_j·f_j を求め、全要素から同じ η_b·S を引く。
    aggregate="mean" の場合は S を n で割る。
    """
    if not eta_b > 0:
        raise GdConfigError(f"eta_b は正でなければなりません: {eta_b}")
    wv = _values(w)
    total = float(np.sum(gradient(wv, f)))
    if aggregate == "mean":
        total /= wv.size
    elif aggregate != "sum":
        raise GdConfigError(f"不明な集約方法です: {aggregate!r}")
    return WeightVector(wv - eta_b * total)


def combine(ap: ArrayLike, bp: ArrayLike) -> PredictionVector:
    """p = (AP + BP) / 2"""
    a, b = _values(ap), _values(bp)
    _same_length(a, b, "combine")
    return PredictionVector((a + b) / 2.0)


def expectation_probability(p: ArrayLike, e: ArrayLike) -> float:
    """
    ep = (Σ p_i^2 / 2) / (Σ E_i^2 / 2)

    /2 は分子と分母で打ち消し合うので計算では省略する。
    """
    pv, ev = _values(p), _values(e)
    _same_length(pv, ev, "expectation_probability")
    denominator = float(np.dot(ev, ev))
    if denominator == 0:
        raise UndefinedRatioError("期待ベクトルが全て0のため ep を計算できません。")
    return float(np.dot(pv, pv)) / denominator


def check_step_bound(f: ArrayLike, cfg: GdConfig) -> None:
    """
    重みが正のまま単調に減少するための学習率の条件を確認する

    確率的: 2·η_s·max_i f_i < 1、バッチ: 2·η_b·Σ_i f_i < 1（mean 集約なら Σ/n）
    """
    fv = _values(f)
    if cfg.method == GdMethod.STOCHASTIC:
        factor = 2.0 * cfg.eta_s * float(np.max(fv))
        label = "2·η_s·max(f)"
    else:
        total = float(np.sum(fv))
        if cfg.batch_aggregate == "mean":
            total /= fv.size
        factor = 2.0 * cfg.eta_b * total
        label = "2·η_b·Σf"
    if factor >= 1.0:
        raise GdConfigError(f"学習率が大きすぎます: {label} = {factor:g} >= 1")


def party_update(party_w: ArrayLike, party_f: ArrayLike, cfg: GdConfig) -> WeightVector:
    """設定された方法で自分の重みベクトルを更新する"""
    if cfg.method == GdMethod.STOCHASTIC:
        return step_stochastic(party_w, party_f, cfg.eta_s)
    if cfg.method == GdMethod.BATCH:
        return step_batch(party_w, party_f, cfg.eta_b, cfg.batch_aggregate)
    raise GdConfigError(f"不明な勾配降下法です: {cfg.method!r}")


class _StoppingRule:
    """
    ep の履歴を持ち、停止・非収束・発散を判定する
    """

    def __init__(self, cfg: GdConfig):
        self.cfg = cfg
        self.trace: List[float] = []
        self._rising = 0

    def should_stop(self, ep: float, iterations: int) -> bool:
        if self.trace and ep > self.trace[-1]:
            self._rising += 1
        else:
            self._rising = 0
        self.trace.append(ep)
        logger.debug("反復 %d: ep=%.12g", iterations, ep)
        if ep <= self.cfg.lam:
            return True
        if self._rising >= self.cfg.divergence_window:
            raise DivergenceError(
                f"ep が {self._rising} 回連続で増加しました（ep={ep:g}）。学習率を確認してください。",
                self.trace)
        if iterations >= self.cfg.max_iterations:
            raise NonConvergenceError(
                f"{self.cfg.max_iterations} 回の反復で λ={self.cfg.lam} に達しませんでした（ep={ep:g}）。",
                self.trace)
        return False


def _prepare(f: ArrayLike, e: ArrayLike, cfg: GdConfig) -> np.ndarray:
    fv = _values(f)
    _same_length(fv, _values(e), "run")
    if np.any(fv <= 0):
        raise GdConfigError("第1段階の予測値は全て正でなければなりません。")
    if cfg.enforce_step_bound:
        check_step_bound(fv, cfg)
    return fv


def run_second_stage(af: ArrayLike,
                     bf: ArrayLike,
                     e: ArrayLike,
                     cfg: GdConfig,
                     exchange: Optional[Callable[[PredictionVector, PredictionVector],
                                                 Tuple[PredictionVector, PredictionVector]]] = None) -> RunStats:
    """
    第2段階の反復（両パーティを1つのタスクで進める）

    1. 各パーティが自分の w と f から予測ベクトルを求める
    2. exchange フックで AP/BP を交換する
    3. p = (AP + BP) / 2
    4. ep を計算する
    5. ep <= λ なら停止、そうでなければ各パーティが自分の重みを更新して 1 へ

    Raises:
        GdConfigError: 学習率の条件を満たさない（反復前に検査）
        NonConvergenceError / DivergenceError
    """
    afv = _prepare(af, e, cfg)
    bfv = _prepare(bf, e, cfg)
    _same_length(afv, bfv, "run_second_stage")

    wa = WeightVector.ones(afv.size)
    wb = WeightVector.ones(bfv.size)
    rule = _StoppingRule(cfg)
    iterations = 0
    started = time.perf_counter()
    while True:
        ap, bp = predict(wa, afv), predict(wb, bfv)
        if exchange is not None:
            ap, bp = exchange(ap, bp)
        p = combine(ap, bp)
        if rule.should_stop(expectation_probability(p, e), iterations):
            break
        wa = party_update(wa, afv, cfg)
        wb = party_update(wb, bfv, cfg)
        iterations += 1
    elapsed = time.perf_counter() - started

    logger.info("第2段階が終了しました: method=%s λ=%g 反復=%d ep=%.6g",
                cfg.method.value, cfg.lam, iterations, rule.trace[-1])
    return RunStats(p, rule.trace[-1], iterations, elapsed, tuple(rule.trace))


def run_party_loop(own_f: ArrayLike,
                   e: ArrayLike,
                   cfg: GdConfig,
                   exchange: Callable[[PredictionVector], Sequence[float]],
                   party_id: str = PARTY_A) -> RunStats:
    """
    第2段階の反復を1パーティの立場で行う

    exchange は自分の予測ベクトルを送り、相手の予測ベクトルを返す。
    p は常に (AP + BP) / 2 の順で計算するので、両パーティで同じ ep になる。
    """
    fv = _prepare(own_f, e, cfg)
    w = WeightVector.ones(fv.size)
    rule = _StoppingRule(cfg)
    iterations = 0
    started = time.perf_counter()
    while True:
        own_p = predict(w, fv)
        peer_p = PredictionVector(_values(exchange(own_p)))
        p = combine(own_p, peer_p) if party_id == PARTY_A else combine(peer_p, own_p)
        if rule.should_stop(expectation_probability(p, e), iterations):
            break
        w = party_update(w, fv, cfg)
        iterations += 1
    elapsed = time.perf_counter() - started

    logger.info("[%s] 第2段階が終了しました: method=%s λ=%g 反復=%d ep=%.6g",
                party_id, cfg.method.value, cfg.lam, iterations, rule.trace[-1])
    return RunStats(p, rule.trace[-1], iterations, elapsed, tuple(rule.trace))


def _oracle(af: np.ndarray, bf: np.ndarray, e: np.ndarray, lam: float,
            decay_a: np.ndarray, decay_b: np.ndarray, max_t: int) -> int:
    denominator = float(np.dot(e, e))
    for t in range(max_t + 1):
        p = (af * decay_a ** (2 * t) + bf * decay_b ** (2 * t)) / 2.0
        if float(np.dot(p, p)) / denominator <= lam:
            return t
    raise NonConvergenceError(f"{max_t} 回以内に λ={lam} に達しません。", [])


def oracle_iterations_stochastic(af: ArrayLike, bf: ArrayLike, e: ArrayLike,
                                 eta_s: float, lam: float, max_t: int = DEFAULT_MAX_ITERATIONS) -> int:
    """
    確率的勾配降下の反復回数の閉形式

    w_i(t) = (1 − 2η_s f_i)^t なので、Σ[(Af_i a_i^{2t} + Bf_i b_i^{2t})/2]² / ΣE² <= λ となる最小の t。
    """
    a, b = _values(af), _values(bf)
    return _oracle(a, b, _values(e), lam, 1.0 - 2.0 * eta_s * a, 1.0 - 2.0 * eta_s * b, max_t)


def oracle_iterations_batch(af: ArrayLike, bf: ArrayLike, e: ArrayLike,
                            eta_b: float, lam: float, max_t: int = DEFAULT_MAX_ITERATIONS) -> int:
    """
    バッチ勾配降下の反復回数の閉形式

    全ての重みが等しいまま w(t) = (1 − 2η_b Σf)^t で減衰する。
    """
    a, b = _values(af), _values(bf)
    decay_a = np.full(a.size, 1.0 - 2.0 * eta_b * float(np.sum(a)))
    decay_b = np.full(b.size, 1.0 - 2.0 * eta_b * float(np.sum(b)))
    return _oracle(a, b, _values(e), lam, decay_a, decay_b, max_t)
