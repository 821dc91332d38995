"""
ミニバッチ学習ループと2段階の蒸留
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from tqdm import tqdm

import constraints
import dataset
import network
from config import TrainingDefaults
from constraints import ConstraintConfig
from errors import ParameterError, TrainingError

logger = logging.getLogger(__name__)

GRADIENT_SCALES = ("none", "temperature", "temperature_squared")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = TrainingDefaults.EPOCHS
    batch_size: int = TrainingDefaults.BATCH_SIZE
    malware_ratio: float = TrainingDefaults.MALWARE_RATIO
    learning_rate: float = TrainingDefaults.LEARNING_RATE
    momentum: float = TrainingDefaults.MOMENTUM
    dropout_rate: float = TrainingDefaults.DROPOUT_RATE
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    seed: int = TrainingDefaults.SEED
    loss_scale: float = 1.0  # 蒸留時の温度スケーリング用

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be at least 1, got {self.batch_size}")
        if not 0.0 <= self.malware_ratio <= 1.0:
            raise ParameterError(f"malware_ratio must lie in [0, 1], got {self.malware_ratio}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not self.loss_scale > 0:
            raise ParameterError(f"loss_scale must be positive, got {self.loss_scale}")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = TrainingDefaults.DISTILL_TEMPERATURE
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    gradient_scale: str = TrainingDefaults.DISTILL_GRADIENT_SCALE

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.gradient_scale not in GRADIENT_SCALES:
            raise ParameterError(f"unknown gradient_scale {self.gradient_scale!r}")

    @property
    def loss_scale(self):
        """温度で割られて小さくなるロジット勾配の補正係数"""
        if self.gradient_scale == "temperature":
            return self.temperature
        if self.gradient_scale == "temperature_squared":
            return self.temperature ** 2
        return 1.0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    penalty: float
    negative_mass: float
    train_accuracy: float

    def to_line(self):
        return (
            f"epoch {self.epoch} loss {self.loss:.6f} penalty {self.penalty:.6f} "
            f"negmass {self.negative_mass:.6f} train_acc {self.train_accuracy:.6f}"
        )


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def to_text(self):
        return "".join(r.to_line() + "\n" for r in self.records)


def loss(output, target, head):
    """交差エントロピー損失（outputはロジット、ヘッドの温度で評価）"""
    logits = np.atleast_2d(np.asarray(output, dtype=np.float64))
    return network.cross_entropy(logits, target, head, head.temperature)


@dataclass
class Objective:
    loss: float
    penalty: float
    grads: network.Gradients

    @property
    def total(self):
        return self.loss + self.penalty


def objective(m, X, targets, cfg, rng=None, smooth_only=False):
    """1回の順伝播・逆伝播：損失、正則化、全勾配

    rng を与えるとドロップアウト付きの訓練モードになります。
    smooth_only=True では重みのN1項を勾配に含めません。
    """
    dropout = (cfg.dropout_rate, rng) if rng is not None and cfg.dropout_rate > 0 else None
    trace = network.forward(m, X, dropout=dropout)
    value = network.cross_entropy(trace.logits, targets, m.head, trace.temperature)
    terms = constraints.penalty(m, trace, cfg.constraint, smooth_only=smooth_only)
    grads = network.backward(
        m, trace, targets, pre_grads=terms.pre_grads, post_grads=terms.post_grads, need_input=False
    )
    if terms.weight_grads is not None:
        grads.add_weight_terms(terms.weight_grads)
    if cfg.loss_scale != 1.0:
        grads.scale(cfg.loss_scale)
    return Objective(value, terms.value, grads)


class SGDMomentum:
    """モーメンタム付きSGD（v = mu v - lr g; w += v）"""

    def __init__(self, m, learning_rate, momentum):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.v_w = [np.zeros_like(w) for w in m.weights]
        self.v_b = [np.zeros_like(b) for b in m.biases]

    def step(self, m, grads):
        for layer, v_w, v_b, g_w, g_b in zip(m.layers, self.v_w, self.v_b, grads.weights, grads.biases):
            v_w *= self.momentum
            v_w -= self.learning_rate * g_w
            v_b *= self.momentum
            v_b -= self.learning_rate * g_b
            layer.weights += v_w
            layer.bias += v_b


def _check_both_labels(d):
    n_mal, n_ben = d.counts()
    if n_mal == 0 or n_ben == 0:
        raise ParameterError(f"training needs both labels, got {n_mal} malware and {n_ben} benign")


def train_accuracy(m, d):
    return float(np.mean(network.predict_batch(m, d) == d.label_array))


def train(d, arch, cfg, soft_targets=None, progress=True):
    """ミニバッチ学習（エポック = ceil(N / batch) 個の比率固定バッチ）

    soft_targets を与えると (n, 2) の分布を目標に学習します（蒸留の生徒）。
    """
    _check_both_labels(d)
    if soft_targets is not None:
        soft_targets = np.asarray(soft_targets, dtype=np.float64)
        if soft_targets.shape != (len(d), 2):
            raise ParameterError(f"soft targets must have shape ({len(d)}, 2)")
        if not arch.head.is_softmax:
            raise ParameterError("soft targets need a softmax_pair head")
    scope = cfg.constraint.hard_scope
    space = d.space if scope == constraints.MANIFEST_MONOTONE else None
    proximal = cfg.constraint.proximal_n1
    shrink = cfg.learning_rate * cfg.constraint.n1_coeff

    init_mode = network.InitMode(cfg.constraint.init.variant, cfg.seed)
    m = network.init(arch.layer_specs(d.space.n_features), arch.head, init_mode, d.space.checksum())
    log = TrainLog()
    if cfg.epochs == 0:
        return m, log

    batch_stream, dropout_stream = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )
    optimizer = SGDMomentum(m, cfg.learning_rate, cfg.momentum)
    n_batches = math.ceil(len(d) / cfg.batch_size)
    X_all = d.matrix
    y_all = d.label_array.astype(np.float64) if soft_targets is None else soft_targets

    epochs = tqdm(range(cfg.epochs), desc="train", unit="epoch", disable=not progress, leave=False)
    for epoch in epochs:
        loss_sum = 0.0
        penalty_sum = 0.0
        for step in range(n_batches):
            idx = dataset.sample_batch_indices(d, cfg.batch_size, cfg.malware_ratio, batch_stream)
            obj = objective(m, X_all[idx], y_all[idx], cfg, dropout_stream, smooth_only=proximal)
            if not (np.isfinite(obj.total) and obj.grads.all_finite()):
                raise TrainingError(f"non-finite objective {obj.total!r}", epoch + 1, step + 1)
            optimizer.step(m, obj.grads)
            if scope != constraints.NONE:
                constraints.project_nonnegative(m, scope, space, in_place=True)
            elif proximal:
                constraints.shrink_negative(m, shrink, in_place=True)
            loss_sum += obj.loss
            penalty_sum += obj.penalty
            logger.debug("epoch %d step %d loss %.6f penalty %.6f", epoch + 1, step + 1, obj.loss, obj.penalty)

        record = EpochRecord(
            epoch + 1,
            loss_sum / n_batches,
            penalty_sum / n_batches,
            constraints.negative_mass(m),
            train_accuracy(m, d),
        )
        log.append(record)
        logger.info(record.to_line())
        epochs.set_postfix(loss=f"{record.loss:.4f}", acc=f"{record.train_accuracy:.4f}")
    return m, log


@dataclass
class DistillResult:
    teacher: network.ModelParams
    student: network.ModelParams
    teacher_log: TrainLog
    student_log: TrainLog

    def __iter__(self):
        # (teacher, student) としてアンパック可能
        return iter((self.teacher, self.student))


def soft_labels(teacher, d, temperature):
    """教師の温度Tでのソフトラベル (n, 2)"""
    return network.forward(teacher, d, temperature=temperature).probs


def train_distilled(d, arch, cfg, progress=True):
    """防御的蒸留：温度Tで教師を学習し、そのソフトラベルで生徒を学習"""
    if not arch.head.is_softmax:
        raise ParameterError("distillation needs a softmax_pair head")
    arch_t = arch.with_head(network.HeadKind(network.SOFTMAX_PAIR, cfg.temperature))
    scale = cfg.loss_scale

    logger.info("distillation stage 1: teacher at T=%g", cfg.temperature)
    teacher, teacher_log = train(d, arch_t, replace(cfg.teacher_train, loss_scale=scale), progress=progress)

    targets = soft_labels(teacher, d, cfg.temperature)
    logger.info("distillation stage 2: student on soft labels (mean p_malware %.4f)", float(targets[:, 1].mean()))
    student, student_log = train(
        d, arch_t, replace(cfg.student_train, loss_scale=scale), soft_targets=targets, progress=progress
    )
    return DistillResult(teacher, student, teacher_log, student_log)
