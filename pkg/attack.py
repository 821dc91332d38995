"""
マニフェスト特徴を有効化するだけの反復勾配攻撃

各ステップで、まだ0のマニフェスト特徴のうちマルウェア確率の勾配が
最も負のもの（同値なら最小インデックス）を1にし、良性と判定されるか
打ち切りに達するまで繰り返します。モデルは一切変更しません。
"""

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

import dataset
import network
from config import AttackDefaults
from errors import ParameterError

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

# 停止理由
FLIPPED = "flipped"
CUTOFF = "cutoff"
NO_NEGATIVE_GRADIENT = "no_negative_gradient"
NO_CANDIDATES = "no_candidates"


@dataclass(frozen=True)
class AttackConfig:
    max_iterations: int = AttackDefaults.MAX_ITERATIONS
    require_negative_gradient: bool = AttackDefaults.REQUIRE_NEGATIVE_GRADIENT
    precision: str = AttackDefaults.PRECISION  # 勾配を読む配備モデルの精度

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ParameterError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if self.precision not in PRECISIONS:
            raise ParameterError(f"unknown precision {self.precision!r}")


@dataclass(frozen=True)
class AttackResult:
    original: dataset.Sample
    perturbed: dataset.Sample
    enabled_features: tuple
    iterations_used: int
    success: bool
    stop_reason: str

    def to_line(self, sample_id):
        added = ",".join(str(i) for i in self.enabled_features)
        return f"sample {sample_id} success {int(self.success)} iters {self.iterations_used} added {added}"


@dataclass(frozen=True)
class RateReport:
    """率と分子・分母（分母0の場合は warning=True）"""

    rate: float
    numerator: int
    denominator: int
    warning: bool = False
    results: tuple = ()

    def __float__(self):
        return self.rate


def _check_space(m, space):
    if space.n_features != m.n_features:
        raise ParameterError(f"feature space has {space.n_features} features, model expects {m.n_features}")
    if m.feature_space_id and m.feature_space_id != space.checksum():
        raise ParameterError("model is bound to a different feature space")


def _craft(m, view, x, space, cfg):
    """craftの本体（事前条件は確認済み）。view は勾配を読むキャスト済みモデル"""
    enabled = np.zeros(space.n_features, dtype=bool)
    enabled[list(x.indices)] = True
    candidates = space.manifest & ~enabled
    added = []
    reason = CUTOFF
    current = x
    while len(added) < cfg.max_iterations:
        if not candidates.any():
            reason = NO_CANDIDATES
            break
        grad = network.input_gradient(view, current, temperature=1.0)
        scores = np.where(candidates, grad.astype(np.float64), np.inf)
        k = int(np.argmin(scores))  # 同値は最小インデックス
        if cfg.require_negative_gradient and not scores[k] < 0:
            reason = NO_NEGATIVE_GRADIENT
            break
        candidates[k] = False
        added.append(k)
        current = current.with_enabled([k])
        if network.predict(m, current) == dataset.BENIGN:
            reason = FLIPPED
            break
    logger.debug("craft: %d features added, stop %s", len(added), reason)
    return AttackResult(x, current, tuple(added), len(added), reason == FLIPPED, reason)


def craft(m, x, space, cfg=AttackConfig()):
    """検出されたマルウェアに対する攻撃を1件生成"""
    _check_space(m, space)
    if not x.is_malware:
        raise ParameterError("attack targets malware samples only")
    if network.predict(m, x) != dataset.MALWARE:
        raise ParameterError("attack targets detected malware; sample is already classified benign")
    return _craft(m, m.astype(PRECISIONS[cfg.precision]), x, space, cfg)


def craft_batch(m, samples, space, cfg=AttackConfig(), progress=True):
    """検出済みマルウェアの列に対する攻撃（入力順）"""
    _check_space(m, space)
    view = m.astype(PRECISIONS[cfg.precision])
    results = []
    for x in tqdm(samples, desc="attack", unit="sample", disable=not progress, leave=False):
        if not x.is_malware or network.predict(m, x) != dataset.MALWARE:
            raise ParameterError("attack targets detected malware samples only")
        results.append(_craft(m, view, x, space, cfg))
    return results


def detected_malware(m, samples):
    """攻撃前にマルウェアと判定されているマルウェアサンプル"""
    malware = [s for s in samples if s.is_malware]
    if not malware:
        return []
    flags = network.predict_batch(m, network.as_matrix(malware, m.n_features, m.dtype))
    return [s for s, f in zip(malware, flags) if f == 1]


def misclassification_rate(m, malware, space, cfg=AttackConfig(), progress=True):
    """攻撃成功率（分母は攻撃前に検出されているマルウェア）"""
    targets = detected_malware(m, malware)
    if not targets:
        logger.warning("no detected malware to attack; misclassification rate reported as 0")
        return RateReport(0.0, 0, 0, warning=True)
    results = craft_batch(m, targets, space, cfg, progress)
    hits = sum(r.success for r in results)
    rate = hits / len(results)
    logger.info("misclassification rate %.6f (%d / %d)", rate, hits, len(results))
    return RateReport(rate, hits, len(results), results=tuple(results))


def transfer_rate(source, target, malware, space, cfg=AttackConfig(), progress=True):
    """代理モデルで生成した攻撃が対象モデルでも良性と判定される割合"""
    if source.feature_space_id != target.feature_space_id or source.n_features != target.n_features:
        raise ParameterError("source and target models do not share a feature space")
    _check_space(target, space)
    crafted = misclassification_rate(source, malware, space, cfg, progress)
    successes = [r for r in crafted.results if r.success]
    if not successes:
        logger.warning("no successful adversarial samples on the source model; transfer rate reported as 0")
        return RateReport(0.0, 0, 0, warning=True, results=crafted.results)
    perturbed = network.as_matrix([r.perturbed for r in successes], target.n_features, target.dtype)
    fooled = int(np.sum(network.predict_batch(target, perturbed) == 0))
    rate = fooled / len(successes)
    logger.info("transfer rate %.6f (%d / %d)", rate, fooled, len(successes))
    return RateReport(rate, fooled, len(successes), results=crafted.results)


def format_report(results):
    """攻撃結果のテキストレポート"""
    return "".join(r.to_line(i) + "\n" for i, r in enumerate(results))


def brute_force_min_flips(m, x, space, max_flips):
    """全探索：良性と判定される最小の有効化集合（なければ None）"""
    free = [int(i) for i in space.manifest_indices if i not in set(x.indices)]
    for k in range(1, max_flips + 1):
        for combo in itertools.combinations(free, k):
            if network.predict(m, x.with_enabled(combo)) == dataset.BENIGN:
                return combo
    return None


def best_single_flip(m, x, space):
    """1特徴の有効化でマルウェア確率を最小にする特徴（同値は最小インデックス）"""
    present = set(x.indices)
    free = [int(i) for i in space.manifest_indices if i not in present]
    if not free:
        return None
    perturbed = [x.with_enabled([i]) for i in free]
    p = network.predict_proba(m, network.as_matrix(perturbed, m.n_features, m.dtype))
    return free[int(np.argmin(p))]
