"""
評価指標、N1/N2グリッドサーチ、蒸留グリッド、単調性の証明、フォールバック合成
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

import attack
import constraints
import dataset
import network
import training
from config import GridDefaults
from errors import MonotoneGuardError, ParameterError

logger = logging.getLogger(__name__)

METRICS = GridDefaults.METRICS


@dataclass(frozen=True)
class Metrics:
    fpr: float
    fnr: float
    accuracy: float
    mr: float = None

    def __post_init__(self):
        for name in ("fpr", "fnr", "accuracy", "mr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")

    def with_mr(self, mr):
        return replace(self, mr=float(mr))

    def get(self, name):
        return getattr(self, name)

    def to_text(self):
        lines = [
            f"accuracy {self.accuracy:.6f}",
            f"fnr {self.fnr:.6f}",
            f"fpr {self.fpr:.6f}",
        ]
        if self.mr is not None:
            lines.append(f"mr {self.mr:.6f}")
        return "\n".join(lines) + "\n"


def metrics_from_predictions(predicted, labels, mr=None):
    """予測（1 = マルウェア）と正解ラベルから指標を計算"""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    malware = labels == 1
    benign = ~malware
    n_mal, n_ben = int(malware.sum()), int(benign.sum())
    if not n_mal or not n_ben:
        logger.warning("test set has %d malware and %d benign; empty rates reported as 0", n_mal, n_ben)
    fpr = float(np.sum(predicted[benign] == 1)) / n_ben if n_ben else 0.0
    fnr = float(np.sum(predicted[malware] == 0)) / n_mal if n_mal else 0.0
    accuracy = float(np.mean(predicted == labels))
    return Metrics(fpr, fnr, accuracy, mr)


def evaluate(m, test):
    """温度1での予測によるFPR/FNR/正解率"""
    if len(test) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    return metrics_from_predictions(network.predict_batch(m, test), test.label_array)


def attack_pool(test, max_samples=None):
    """攻撃対象のマルウェア（先頭から max_samples 件まで）"""
    malware = test.malware()
    return malware if max_samples is None else malware[:max_samples]


# グリッドサーチ


@dataclass(frozen=True)
class GridSpec:
    n1_values: tuple = GridDefaults.AXIS
    n2_values: tuple = GridDefaults.AXIS
    base_train: training.TrainConfig = field(default_factory=training.TrainConfig)
    seeds: tuple = GridDefaults.SEEDS

    def __post_init__(self):
        if not self.n1_values or not self.n2_values:
            raise ParameterError("grid axes must be non-empty")
        if not self.seeds:
            raise ParameterError("grid needs at least one seed")
        if any(v < 0 for v in tuple(self.n1_values) + tuple(self.n2_values)):
            raise ParameterError("grid penalty coefficients must be non-negative")

    def cell_config(self, n1, n2, seed):
        """セル (n1, n2) の学習設定（重み配置、ハード射影なし）"""
        base = self.base_train.constraint
        constraint = constraints.ConstraintConfig(
            hard_scope=constraints.NONE,
            n1_coeff=float(n1),
            n2_coeff=float(n2),
            placement=constraints.WEIGHTS,
            init=base.init,
            n1_step=base.n1_step,
        )
        return replace(self.base_train, constraint=constraint, seed=int(seed))


@dataclass
class CellResult:
    row: float
    col: float
    seed: int
    metrics: Metrics = None
    negative_mass: float = float("nan")
    error: str = None

    @property
    def ok(self):
        return self.error is None


def axis_label(v):
    return format(float(v), "g")


@dataclass
class GridReport:
    """グリッドの全セル・全シードの結果"""

    row_name: str
    col_name: str
    row_values: tuple
    col_values: tuple
    seeds: tuple
    cells: list

    def failures(self):
        return [c for c in self.cells if not c.ok]

    def _lookup(self):
        return {(c.row, c.col, c.seed): c for c in self.cells}

    def mean(self, metric):
        """セルごとのシード平均（失敗したシードは除外、全滅ならNaN）"""
        table = self._lookup()
        out = np.full((len(self.row_values), len(self.col_values)), np.nan)
        for i, r in enumerate(self.row_values):
            for j, c in enumerate(self.col_values):
                vals = [
                    _cell_value(table[(r, c, s)], metric)
                    for s in self.seeds
                    if table[(r, c, s)].ok
                ]
                if vals:
                    out[i, j] = float(np.mean(vals))
        return out

    def frame(self, metric):
        """ヒートマップ表（行 = row_values、列 = col_values、シード別の列を後置）"""
        table = self._lookup()
        rows = [axis_label(r) for r in self.row_values]
        df = pd.DataFrame(self.mean(metric), index=rows, columns=[axis_label(c) for c in self.col_values])
        for c in self.col_values:
            for s in self.seeds:
                df[f"{axis_label(c)}_seed{s}"] = [
                    _cell_value(table[(r, c, s)], metric) if table[(r, c, s)].ok else np.nan
                    for r in self.row_values
                ]
        return df

    def monotone_violations(self):
        """行方向（係数増加）に負の質量が増えたセルの組"""
        table = self._lookup()
        out = []
        for c in self.col_values:
            for s in self.seeds:
                for a, b in zip(self.row_values, self.row_values[1:]):
                    ca, cb = table[(a, c, s)], table[(b, c, s)]
                    if ca.ok and cb.ok and cb.negative_mass > ca.negative_mass:
                        out.append((a, b, c, s))
        return out


def _cell_value(cell, metric):
    if metric == "negative_mass":
        return cell.negative_mass
    return cell.metrics.get(metric)


def _run_cell(job):
    """1セル1シードの学習・評価・攻撃（プロセスプールから呼ばれる）"""
    kind, row, col, seed, train, test, arch, cfg, attack_cfg, max_samples = job
    cell = CellResult(row, col, seed)
    try:
        if kind == "distill":
            m = training.train_distilled(train, arch, cfg, progress=False).student
        else:
            m, _ = training.train(train, arch, cfg, progress=False)
        metrics = evaluate(m, test)
        rate = attack.misclassification_rate(
            m, attack_pool(test, max_samples), test.space, attack_cfg, progress=False
        )
        cell.metrics = metrics.with_mr(rate.rate)
        cell.negative_mass = constraints.negative_mass(m)
    except MonotoneGuardError as e:
        # セルの失敗は記録のみ
        cell.error = f"{e.kind}: {e}"
    return cell


def _run_jobs(jobs, workers, desc, progress):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_cell, jobs)
            cells = list(tqdm(results, total=len(jobs), desc=desc, unit="cell", disable=not progress))
    else:
        cells = [_run_cell(j) for j in tqdm(jobs, desc=desc, unit="cell", disable=not progress)]
    for c in cells:
        if c.ok:
            logger.info(
                "cell (%s, %s) seed %d: mr %.6f fnr %.6f fpr %.6f negmass %.6f",
                axis_label(c.row), axis_label(c.col), c.seed,
                c.metrics.mr, c.metrics.fnr, c.metrics.fpr, c.negative_mass,
            )
        else:
            logger.warning("cell (%s, %s) seed %d failed: %s", axis_label(c.row), axis_label(c.col), c.seed, c.error)
    return cells


def grid_search(train, test, arch, spec, attack_cfg=attack.AttackConfig(), workers=1,
                max_samples=None, progress=True):
    """N1/N2係数の全組合せ × シードで学習・評価・攻撃"""
    if workers < 1:
        raise ParameterError(f"workers must be at least 1, got {workers}")
    jobs = [
        ("train", n1, n2, s, train, test, arch, spec.cell_config(n1, n2, s), attack_cfg, max_samples)
        for n1 in spec.n1_values
        for n2 in spec.n2_values
        for s in spec.seeds
    ]
    cells = _run_jobs(jobs, workers, "grid", progress)
    report = GridReport("n1", "n2", tuple(spec.n1_values), tuple(spec.n2_values), tuple(spec.seeds), cells)
    for n1_a, n1_b, n2, s in report.monotone_violations():
        logger.warning(
            "negative mass increased from n1=%s to n1=%s at n2=%s seed %d",
            axis_label(n1_a), axis_label(n1_b), axis_label(n2), s,
        )
    return report


def distillation_grid(train, test, arch, temperatures=GridDefaults.TEMPERATURES,
                      malware_ratios=GridDefaults.MALWARE_RATIOS, base=training.DistillConfig(),
                      attack_cfg=attack.AttackConfig(), seeds=GridDefaults.SEEDS, workers=1,
                      max_samples=None, progress=True):
    """蒸留温度 × マルウェア比率のグリッド（指標は生徒モデル）"""
    if not temperatures or not malware_ratios or not seeds:
        raise ParameterError("distillation grid axes must be non-empty")
    if workers < 1:
        raise ParameterError(f"workers must be at least 1, got {workers}")
    if not arch.head.is_softmax:
        raise ParameterError("distillation needs a softmax_pair head")
    jobs = []
    for t in temperatures:
        for mwr in malware_ratios:
            for s in seeds:
                cfg = replace(
                    base,
                    temperature=float(t),
                    teacher_train=replace(base.teacher_train, malware_ratio=float(mwr), seed=int(s)),
                    student_train=replace(base.student_train, malware_ratio=float(mwr), seed=int(s)),
                )
                jobs.append(("distill", t, mwr, s, train, test, arch, cfg, attack_cfg, max_samples))
    cells = _run_jobs(jobs, workers, "distill-grid", progress)
    return GridReport(
        "temperature", "malware_ratio", tuple(temperatures), tuple(malware_ratios), tuple(seeds), cells
    )


def write_heatmaps(report, directory, prefix="grid"):
    """指標ごとのヒートマップCSVを書き出し、パスのリストを返す"""
    paths = []
    for metric in METRICS:
        path = os.path.join(directory, f"{prefix}_{metric}.csv")
        report.frame(metric).to_csv(
            path,
            float_format=f"%.{GridDefaults.CSV_DECIMALS}f",
            index_label=f"{report.row_name}\\{report.col_name}",
            lineterminator="\n",
        )
        paths.append(path)
    return paths


# 単調性の証明


@dataclass(frozen=True)
class Counterexample:
    sample: int
    feature: int
    before: float
    after: float

    def to_line(self):
        return f"counterexample sample {self.sample} feature {self.feature} before {self.before:.17g} after {self.after:.17g}"


@dataclass
class CertificateReport:
    scope: str
    structural: bool
    behavioral: bool
    n_trials: int
    counterexamples: list = field(default_factory=list)

    @property
    def structural_only(self):
        return self.n_trials == 0

    @property
    def passed(self):
        return self.structural and self.behavioral

    def to_text(self):
        lines = [
            f"structural {'PASS' if self.structural else 'FAIL'}",
            f"behavioral {'PASS' if self.behavioral else 'FAIL'} trials {self.n_trials}"
            + (" structural-only" if self.structural_only else ""),
        ]
        lines.extend(c.to_line() for c in self.counterexamples)
        return "\n".join(lines) + "\n"


def _flip_mask(m, scope, space):
    if scope == constraints.ALL_WEIGHTS:
        return np.ones(m.n_features, dtype=bool)
    if scope == constraints.MANIFEST_MONOTONE:
        return space.manifest.copy()
    raise ParameterError(f"cannot certify scope {scope!r}")


def structural_check(m, scope, space):
    """範囲内の重みが全て非負かを厳密に確認

    ソフトマックスヘッドでは p_malware がロジット差 z1 - z0 の単調関数なので、
    出力層は列の差 W[:, 1] - W[:, 0] の符号を見ます。
    """
    masks = constraints.projection_masks(m, scope, space)
    last = len(m.layers) - 1
    for li, (w, mask) in enumerate(zip(m.weights, masks)):
        if li == last and m.head.is_softmax:
            w, mask = (w[:, 1] - w[:, 0]), mask[:, 0] | mask[:, 1]
        if np.any(w[mask] < 0):
            return False
    return True


def _random_samples(space, rng, n):
    density = max(1, min(space.n_features // 4, 64))
    out = []
    for _ in range(n):
        k = int(rng.integers(0, density + 1))
        idx = rng.choice(space.n_features, size=k, replace=False)
        out.append(dataset.Sample.of(idx, dataset.MALWARE))
    return out


def certify_monotone(m, space, n_trials=GridDefaults.CERTIFY_TRIALS, rng=None,
                     scope=constraints.ALL_WEIGHTS, samples=None,
                     tolerance=GridDefaults.MONOTONE_TOLERANCE, max_counterexamples=10):
    """構造的（重みの符号）と振る舞い（ランダムな特徴の有効化）の単調性検査

    samples を与えない場合はランダムな疎サンプルで試行します。
    """
    if n_trials < 0:
        raise ParameterError(f"n_trials must be non-negative, got {n_trials}")
    if space.n_features != m.n_features:
        raise ParameterError("feature space does not match the model input")
    rng = np.random.default_rng(rng)
    flip = _flip_mask(m, scope, space)
    structural = structural_check(m, scope, space)

    pool = list(samples) if samples else _random_samples(space, rng, min(max(n_trials, 1), 1000))
    originals, flipped, picks = [], [], []
    for _ in range(n_trials):
        si = int(rng.integers(len(pool)))
        x = pool[si]
        present = np.zeros(space.n_features, dtype=bool)
        present[list(x.indices)] = True
        free = np.flatnonzero(flip & ~present)
        if not len(free):
            continue
        f = int(free[rng.integers(len(free))])
        originals.append(x)
        flipped.append(x.with_enabled([f]))
        picks.append((si, f))

    counterexamples = []
    if picks:
        before = network.predict_proba(m, network.as_matrix(originals, m.n_features, m.dtype))
        after = network.predict_proba(m, network.as_matrix(flipped, m.n_features, m.dtype))
        bad = np.flatnonzero(after < before - tolerance)
        for i in bad[:max_counterexamples]:
            si, f = picks[i]
            counterexamples.append(Counterexample(si, f, float(before[i]), float(after[i])))
        if len(bad):
            logger.warning("%d of %d flip trials decreased p_malware", len(bad), len(picks))
    report = CertificateReport(scope, structural, not counterexamples, n_trials, counterexamples)
    if report.structural and not report.behavioral:
        logger.error("structural certificate passed but behavioral counterexamples exist")
    return report


# フォールバック合成


def _check_pair(restricted, unrestricted):
    if (restricted.feature_space_id != unrestricted.feature_space_id
            or restricted.n_features != unrestricted.n_features):
        raise ParameterError("restricted and unrestricted models do not share a feature space")


def fallback_predict(restricted, unrestricted, x):
    """制約付きモデルがマルウェアと判定すればそれを採用、それ以外は非制約モデル"""
    _check_pair(restricted, unrestricted)
    if network.predict(restricted, x) == dataset.MALWARE:
        return dataset.MALWARE
    return network.predict(unrestricted, x)


def fallback_predict_batch(restricted, unrestricted, x):
    _check_pair(restricted, unrestricted)
    return np.maximum(network.predict_batch(restricted, x), network.predict_batch(unrestricted, x))


def evaluate_fallback(restricted, unrestricted, test):
    if len(test) == 0:
        raise ParameterError("cannot evaluate on an empty test set")
    return metrics_from_predictions(fallback_predict_batch(restricted, unrestricted, test), test.label_array)


def fallback_misclassification_rate(restricted, unrestricted, malware, space,
                                    cfg=attack.AttackConfig(), progress=True):
    """非制約モデルに対して生成した攻撃を合成モデルで判定したMR

    分母は合成モデルが攻撃前に検出しているマルウェア。非制約モデルが
    見逃しているサンプルには攻撃できないので失敗として数えます。
    """
    _check_pair(restricted, unrestricted)
    malware = [s for s in malware if s.is_malware]
    if not malware:
        logger.warning("no detected malware to attack; misclassification rate reported as 0")
        return attack.RateReport(0.0, 0, 0, warning=True)
    X = network.as_matrix(malware, restricted.n_features, restricted.dtype)
    detected = fallback_predict_batch(restricted, unrestricted, X) == 1
    targets = [s for s, d in zip(malware, detected) if d]
    if not targets:
        logger.warning("no detected malware to attack; misclassification rate reported as 0")
        return attack.RateReport(0.0, 0, 0, warning=True)
    attackable = attack.detected_malware(unrestricted, targets)
    results = attack.craft_batch(unrestricted, attackable, space, cfg, progress)
    hits = 0
    if results:
        perturbed = network.as_matrix([r.perturbed for r in results], restricted.n_features, restricted.dtype)
        hits = int(np.sum(fallback_predict_batch(restricted, unrestricted, perturbed) == 0))
    rate = hits / len(targets)
    logger.info("fallback misclassification rate %.6f (%d / %d)", rate, hits, len(targets))
    return attack.RateReport(rate, hits, len(targets), results=tuple(results))


# 手法別のまとめ表


@dataclass(frozen=True)
class TableRow:
    variant: str
    malware_ratio: float
    epochs: int
    metrics: Metrics


def results_table(rows):
    """手法ごとの MR / FNR / FPR 一覧"""
    return pd.DataFrame(
        [
            {
                "variant": r.variant,
                "malware_ratio": r.malware_ratio,
                "epochs": r.epochs,
                "mr": r.metrics.mr,
                "fnr": r.metrics.fnr,
                "fpr": r.metrics.fpr,
            }
            for r in rows
        ],
        columns=["variant", "malware_ratio", "epochs", "mr", "fnr", "fpr"],
    )


def write_table(df, path):
    df.to_csv(path, index=False, float_format=f"%.{GridDefaults.CSV_DECIMALS}f", lineterminator="\n")
    return path
