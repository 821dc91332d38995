"""
非負重み制約とN1/N2正則化

N1/N2 は負の値にだけ掛かる L1/L2 型のペナルティです。配置は重み、
隠れ層の前活性、行列積の和を取る前の積項（presum）の3通り。
ハード制約は最適化ステップごとの射影（負の重みを0にクリップ）です。
重みに掛かるN1は既定で近接ステップ（負の重みを0を越えない範囲で縮める）
として適用します。
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from errors import ParameterError
from network import GLOROT_NORMAL, InitMode

logger = logging.getLogger(__name__)

ALL_WEIGHTS = "all_weights"
MANIFEST_MONOTONE = "manifest_monotone"
NONE = "none"
SCOPES = (ALL_WEIGHTS, MANIFEST_MONOTONE, NONE)

WEIGHTS = "weights"
ACTIVATIONS = "activations"
PRESUM = "presum"
PLACEMENTS = (WEIGHTS, ACTIVATIONS, PRESUM)

PROXIMAL = "proximal"
SUBGRADIENT = "subgradient"
N1_STEPS = (PROXIMAL, SUBGRADIENT)


@dataclass(frozen=True)
class ConstraintConfig:
    """防御設定：ハード射影の範囲、N1/N2係数、正則化の配置、初期化"""

    hard_scope: str = NONE
    n1_coeff: float = 0.0
    n2_coeff: float = 0.0
    placement: str = WEIGHTS
    init: InitMode = field(default_factory=lambda: InitMode(GLOROT_NORMAL, 0))
    n1_step: str = PROXIMAL

    def __post_init__(self):
        if self.hard_scope not in SCOPES:
            raise ParameterError(f"unknown hard_scope {self.hard_scope!r}")
        if self.placement not in PLACEMENTS:
            raise ParameterError(f"unknown placement {self.placement!r}")
        if self.n1_step not in N1_STEPS:
            raise ParameterError(f"unknown n1_step {self.n1_step!r}")
        if self.n1_coeff < 0 or self.n2_coeff < 0:
            raise ParameterError("n1 and n2 coefficients must be non-negative")
        if self.hard_nonneg and (self.n1_coeff or self.n2_coeff):
            # 射影下ではペナルティは冗長
            logger.warning("hard_scope=%s: ignoring n1=%g n2=%g", self.hard_scope, self.n1_coeff, self.n2_coeff)
            object.__setattr__(self, "n1_coeff", 0.0)
            object.__setattr__(self, "n2_coeff", 0.0)

    @property
    def hard_nonneg(self):
        return self.hard_scope != NONE

    @property
    def has_penalty(self):
        return self.n1_coeff > 0 or self.n2_coeff > 0

    @property
    def proximal_n1(self):
        """重みのN1を勾配ではなく近接ステップで扱うか"""
        return self.n1_coeff > 0 and self.placement == WEIGHTS and self.n1_step == PROXIMAL


@dataclass
class PenaltyReport:
    total: float
    per_layer: list
    negative_mass: float


def n1(x):
    """N1(x) = |x| (x <= 0), 0 (x >= 0)"""
    if np.ndim(x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x < 0, -x, 0.0)
    x = float(x)
    return -x if x < 0 else 0.0


def n2(x):
    """N2(x) = x^2 (x <= 0), 0 (x >= 0)"""
    if np.ndim(x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x < 0, x * x, 0.0)
    x = float(x)
    return x * x if x < 0 else 0.0


def n1_grad(x):
    # 折れ点 x=0 の劣勾配は0
    return np.where(np.asarray(x) < 0, -1.0, 0.0)


def n2_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, 2.0 * x, 0.0)


def _penalty(values, cfg):
    return cfg.n1_coeff * float(np.sum(n1(values))) + cfg.n2_coeff * float(np.sum(n2(values)))


def _penalty_grad(values, cfg, with_n1=True):
    grad = cfg.n2_coeff * n2_grad(values)
    if with_n1:
        grad = grad + cfg.n1_coeff * n1_grad(values)
    return grad


def negative_mass(m):
    """全重みの負の部分の絶対値の和"""
    return float(sum(np.sum(np.maximum(-w, 0.0)) for w in m.weights))


def weight_penalty(m, cfg, with_n1_grad=True):
    """全層の重みに対する N1/N2 ペナルティ（バイアスは対象外）

    with_n1_grad=False ではN1を値にだけ含め、勾配はN2の分だけ返します。
    """
    per_layer = [_penalty(w, cfg) for w in m.weights]
    grads = [_penalty_grad(w, cfg, with_n1_grad) for w in m.weights]
    report = PenaltyReport(float(sum(per_layer)), per_layer, negative_mass(m))
    return report, grads


def activation_penalty(trace, cfg):
    """隠れ層の前活性（ReLU前）に対するペナルティ、バッチ平均"""
    n = trace.batch_size
    hidden = trace.pre[:-1]
    penalty = sum(_penalty(z, cfg) for z in hidden) / n
    grads = [_penalty_grad(z, cfg) / n for z in hidden]
    return penalty, grads


def _split_signs(a):
    if sparse.issparse(a):
        a = a.tocsr()
        return a.maximum(0), (-a).maximum(0)
    return np.maximum(a, 0.0), np.maximum(-a, 0.0)


def _colsum(a):
    return np.asarray(a.sum(axis=0)).ravel()


def _power2(a):
    return a.multiply(a) if sparse.issparse(a) else a * a


def presum_penalty(x_vec, W, cfg, input_grad=False):
    """行列積の各積項 x_k * W_kj に掛かるペナルティ（バッチ平均）

    符号で分解すると N1(a w) = a+ N1(w) + a- N1(-w) なので、
    列和と行ごとのペナルティ和の内積で計算できます。
    input_grad=True の場合は入力に対する勾配も返します。
    """
    n = x_vec.shape[0]
    pos, neg = _split_signs(x_vec)
    s_pos, s_neg = _colsum(pos), _colsum(neg)
    s_pos2, s_neg2 = _colsum(_power2(pos)), _colsum(_power2(neg))

    r1, r1n = n1(W).sum(axis=1), n1(-W).sum(axis=1)
    r2, r2n = n2(W).sum(axis=1), n2(-W).sum(axis=1)
    c1, c2 = cfg.n1_coeff, cfg.n2_coeff
    penalty = (c1 * (s_pos @ r1 + s_neg @ r1n) + c2 * (s_pos2 @ r2 + s_neg2 @ r2n)) / n

    # d/dw N1(-w) = [w > 0]、d/dw N2(-w) = 2w [w > 0]
    pos_w = W > 0
    grad_w = (
        c1 * (s_pos[:, None] * n1_grad(W) + s_neg[:, None] * pos_w)
        + c2 * (s_pos2[:, None] * n2_grad(W) + s_neg2[:, None] * np.where(pos_w, 2.0 * W, 0.0))
    ) / n
    if not input_grad:
        return float(penalty), grad_w

    a = x_vec.toarray() if sparse.issparse(x_vec) else x_vec
    grad_a = (
        (a > 0) * (c1 * r1 + 2.0 * c2 * a * r2)
        + (a < 0) * (-c1 * r1n + 2.0 * c2 * a * r2n)
    ) / n
    return float(penalty), grad_w, grad_a


@dataclass
class PenaltyTerms:
    """目的関数に合流させる正則化の値と勾配"""

    value: float = 0.0
    weight_grads: list = None
    pre_grads: list = None
    post_grads: list = None


def penalty(m, trace, cfg, smooth_only=False):
    """設定された配置に応じてペナルティを計算

    smooth_only=True では重みのN1を勾配から除きます（近接ステップで別に適用）。
    """
    if not cfg.has_penalty:
        return PenaltyTerms()
    if cfg.placement == WEIGHTS:
        report, grads = weight_penalty(m, cfg, with_n1_grad=not smooth_only)
        return PenaltyTerms(report.total, weight_grads=grads)
    if cfg.placement == ACTIVATIONS:
        value, grads = activation_penalty(trace, cfg)
        return PenaltyTerms(value, pre_grads=grads)

    value = 0.0
    weight_grads = []
    post_grads = []
    for li, layer in enumerate(m.layers):
        a_in = trace.inputs if li == 0 else trace.post[li - 1]
        if li == 0:
            # 入力はデータなので重みにだけ勾配を流す
            v, g_w = presum_penalty(a_in, layer.weights, cfg)
        else:
            v, g_w, g_a = presum_penalty(a_in, layer.weights, cfg, input_grad=True)
            post_grads.append(g_a)
        value += v
        weight_grads.append(g_w)
    return PenaltyTerms(value, weight_grads=weight_grads, post_grads=post_grads)


def projection_masks(m, scope, space=None):
    """射影でクリップする重み要素のマスク（層ごと）"""
    if scope not in SCOPES:
        raise ParameterError(f"unknown hard_scope {scope!r}")
    if scope == NONE:
        return [np.zeros(w.shape, dtype=bool) for w in m.weights]
    masks = [np.ones(w.shape, dtype=bool) for w in m.weights]
    if scope == MANIFEST_MONOTONE:
        if space is None:
            raise ParameterError("manifest_monotone scope needs a feature space")
        if space.n_features != m.n_features:
            raise ParameterError("feature space does not match the model input")
        # コード特徴の第1層の行は自由
        masks[0][~space.manifest, :] = False
    return masks


def project_nonnegative(m, scope, space=None, in_place=False):
    """範囲内の重みを max(w, 0) に射影（バイアスはそのまま）。冪等"""
    out = m if in_place else m.copy()
    if scope == ALL_WEIGHTS:
        for layer in out.layers:
            np.maximum(layer.weights, 0.0, out=layer.weights)
        return out
    for layer, mask in zip(out.layers, projection_masks(m, scope, space)):
        if mask.any():
            layer.weights[mask & (layer.weights < 0)] = 0.0
    return out


def scope_negative_mass(m, scope, space=None):
    """射影範囲内に残る負の重みの質量"""
    total = 0.0
    for w, mask in zip(m.weights, projection_masks(m, scope, space)):
        total += float(np.sum(np.maximum(-w[mask], 0.0)))
    return total


def shrink_negative(m, amount, in_place=False):
    """N1の近接ステップ：負の重みを amount だけ0に近づける（0は越えない）"""
    if amount < 0:
        raise ParameterError(f"shrink amount must be non-negative, got {amount}")
    out = m if in_place else m.copy()
    for layer in out.layers:
        w = layer.weights
        neg = w < 0
        w[neg] = np.minimum(w[neg] + amount, 0.0)
    return out
