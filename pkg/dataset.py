"""
スパースなブール特徴コーパスの表現と生成

合成データ生成（計画的に埋め込んだ A∧B∧¬C ルール）、ファイル入出力、
層化分割、マルウェア比率を固定したミニバッチ抽出を提供します。
特徴インデックスはディスク上も含めて全て0始まりです。
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from sklearn.model_selection import train_test_split

from config import DatasetDefaults
from errors import FormatError, ParameterError, SplitError

logger = logging.getLogger(__name__)

MALWARE = "malware"
BENIGN = "benign"
LABELS = (MALWARE, BENIGN)

TRAIN = "train"
TEST = "test"
UNSPLIT = "unsplit"


def round_half_up(x):
    """四捨五入（銀行丸めを避ける）"""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class FeatureSpace:
    """特徴空間：特徴数とマニフェスト由来フラグ"""

    n_features: int
    manifest_mask: tuple

    def __post_init__(self):
        if self.n_features <= 0:
            raise ParameterError(f"n_features must be positive, got {self.n_features}")
        if len(self.manifest_mask) != self.n_features:
            raise ParameterError(
                f"manifest_mask has {len(self.manifest_mask)} entries, expected {self.n_features}"
            )
        if not any(self.manifest_mask):
            raise ParameterError("feature space has no manifest feature; the attack would be vacuous")

    @classmethod
    def from_indices(cls, n_features, manifest_indices):
        mask = [False] * n_features
        for i in manifest_indices:
            if not 0 <= i < n_features:
                raise ParameterError(f"manifest index {i} out of range [0, {n_features})")
            mask[i] = True
        return cls(n_features, tuple(mask))

    @cached_property
    def manifest(self):
        """マニフェスト特徴のブール配列"""
        return np.array(self.manifest_mask, dtype=bool)

    @cached_property
    def manifest_indices(self):
        return np.flatnonzero(self.manifest)

    def to_text(self):
        lines = [f"n_features {self.n_features}"]
        lines.extend(f"manifest {i}" for i in self.manifest_indices.tolist())
        return "\n".join(lines) + "\n"

    def checksum(self):
        """モデルと特徴空間を結びつけるチェックサム"""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Sample:
    """有効な特徴インデックス（昇順・重複なし）とラベル"""

    indices: tuple
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ParameterError(f"unknown label {self.label!r}")
        for prev, cur in zip(self.indices, self.indices[1:]):
            if cur <= prev:
                raise ParameterError(f"indices must be strictly increasing, got {prev} then {cur}")
        if self.indices and self.indices[0] < 0:
            raise ParameterError(f"negative feature index {self.indices[0]}")

    @classmethod
    def of(cls, indices, label):
        """任意の反復可能オブジェクトから正規形のサンプルを作成"""
        return cls(tuple(sorted({int(i) for i in indices})), label)

    @property
    def is_malware(self):
        return self.label == MALWARE

    def with_enabled(self, extra):
        """特徴を追加で有効化したサンプル"""
        return Sample.of(list(self.indices) + list(extra), self.label)

    def to_line(self):
        return " ".join([self.label] + [str(i) for i in self.indices])


@dataclass(frozen=True)
class Dataset:
    """サンプル集合（生成後は不変）"""

    space: FeatureSpace
    samples: tuple
    split_tag: str = UNSPLIT

    def __post_init__(self):
        if self.split_tag not in (TRAIN, TEST, UNSPLIT):
            raise ParameterError(f"unknown split tag {self.split_tag!r}")
        n = self.space.n_features
        for s in self.samples:
            if s.indices and s.indices[-1] >= n:
                raise ParameterError(f"feature index {s.indices[-1]} out of range [0, {n})")

    def __len__(self):
        return len(self.samples)

    @cached_property
    def label_array(self):
        """ラベル配列（1 = マルウェア）"""
        return np.array([1 if s.is_malware else 0 for s in self.samples], dtype=np.int64)

    @cached_property
    def matrix(self):
        """CSR形式の二値入力行列 (n_samples, n_features)"""
        return to_matrix(self.samples, self.space.n_features)

    def to_matrix(self, dtype=np.float64):
        if dtype == np.float64:
            return self.matrix
        return self.matrix.astype(dtype)

    def malware(self):
        return [s for s in self.samples if s.is_malware]

    def counts(self):
        n_mal = int(self.label_array.sum())
        return n_mal, len(self.samples) - n_mal

    def mean_density(self):
        if not self.samples:
            return 0.0
        return float(np.mean([len(s.indices) for s in self.samples]))


def to_matrix(samples, n_features, dtype=np.float64):
    """サンプル列をCSR行列に変換"""
    indptr = [0]
    indices = []
    for s in samples:
        indices.extend(s.indices)
        indptr.append(len(indices))
    data = np.ones(len(indices), dtype=dtype)
    return sparse.csr_matrix(
        (data, np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(samples), n_features),
    )


@dataclass(frozen=True)
class SynthSpec:
    """合成コーパスの仕様"""

    n_features: int = DatasetDefaults.N_FEATURES
    manifest_fraction: float = DatasetDefaults.MANIFEST_FRACTION
    n_samples: int = DatasetDefaults.N_SAMPLES
    malware_fraction: float = DatasetDefaults.MALWARE_FRACTION
    mean_density: float = DatasetDefaults.MEAN_DENSITY
    n_rules: int = DatasetDefaults.N_RULES
    seed: int = DatasetDefaults.SEED

    def validate(self):
        if self.n_features <= 0 or self.n_samples <= 0:
            raise ParameterError("n_features and n_samples must be positive")
        for name in ("manifest_fraction", "malware_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ParameterError(f"{name} must lie in (0, 1), got {value}")
        if not 0 <= self.mean_density < self.n_features:
            raise ParameterError(
                f"mean_density must lie in [0, n_features), got {self.mean_density}"
            )
        if self.n_rules < 0:
            raise ParameterError(f"n_rules must be non-negative, got {self.n_rules}")
        if self.n_rules > 0 and self.n_features < 3:
            raise ParameterError("planted rules need at least 3 features")
        if not 0 <= self.seed < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


def _plant_rules(rng, n_features, manifest_indices, n_rules):
    """ルール (A, B, C) を配置。C は攻撃者が有効化できるマニフェスト特徴"""
    used = np.zeros(n_features, dtype=bool)
    rules = []
    for _ in range(n_rules):
        free_manifest = manifest_indices[~used[manifest_indices]]
        pool = free_manifest if len(free_manifest) else manifest_indices
        c = int(rng.choice(pool))
        used[c] = True

        free = np.flatnonzero(~used)
        if len(free) < 2:
            free = np.delete(np.arange(n_features), c)
        a, b = (int(v) for v in rng.choice(free, size=2, replace=False))
        used[[a, b]] = True
        rules.append((a, b, c))
    return rules


def _draw_background(rng, cdf, last, k):
    """出現頻度に従って k 個の異なる特徴を抽出"""
    chosen = set()
    while len(chosen) < k:
        draws = np.searchsorted(cdf, rng.random(k - len(chosen)), side="right")
        chosen.update(np.minimum(draws, last).tolist())
    return chosen


def generate_synthetic(spec):
    """DREBIN形状の合成データセットを生成（seedに対して決定的）"""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_features

    n_manifest = min(n, max(1, round_half_up(n * spec.manifest_fraction)))
    manifest = np.zeros(n, dtype=bool)
    manifest[rng.permutation(n)[:n_manifest]] = True
    space = FeatureSpace(n, tuple(manifest.tolist()))

    rules = _plant_rules(rng, n, np.flatnonzero(manifest), spec.n_rules)

    # 背景特徴の出現頻度（ルール特徴は除外）
    popularity = rng.gamma(DatasetDefaults.POPULARITY_SHAPE, size=n)
    for rule in rules:
        popularity[list(rule)] = 0.0
    n_background = int(np.count_nonzero(popularity))
    cdf = np.cumsum(popularity)
    last = 0
    if n_background:
        cdf /= cdf[-1]
        last = int(np.flatnonzero(popularity)[-1])

    p_second = DatasetDefaults.SECOND_RULE_PROB if spec.n_rules > 1 else 0.0
    p_decoy = DatasetDefaults.DECOY_PROB if spec.n_rules else 0.0
    p_lone = DatasetDefaults.LONE_INDICATOR_PROB if spec.n_rules else 0.0
    mf = spec.malware_fraction
    rule_density = mf * 2 * (1 + p_second) + (1 - mf) * (3 * p_decoy + p_lone)
    background_density = max(spec.mean_density - rule_density, 0.0)

    n_malware = round_half_up(spec.n_samples * mf)
    is_malware = np.zeros(spec.n_samples, dtype=bool)
    is_malware[:n_malware] = True
    is_malware = is_malware[rng.permutation(spec.n_samples)]

    samples = []
    for malicious in is_malware:
        k = min(int(rng.poisson(background_density)), n_background)
        enabled = _draw_background(rng, cdf, last, k) if k else set()

        if malicious and rules:
            n_own = 2 if rng.random() < p_second else 1
            own = [rules[i] for i in rng.choice(len(rules), size=n_own, replace=False)]
            for a, b, _ in own:
                enabled.update((a, b))
            # 自分のルールの免責特徴は持たない
            for _, _, c in own:
                enabled.discard(c)
        elif rules:
            u = rng.random()
            a, b, c = rules[int(rng.integers(len(rules)))]
            if u < p_decoy:
                enabled.update((a, b, c))
            elif u < p_decoy + p_lone:
                enabled.add(a if rng.random() < 0.5 else b)

        samples.append(Sample.of(enabled, MALWARE if malicious else BENIGN))

    d = Dataset(space, tuple(samples), UNSPLIT)
    logger.info(
        "generated %d samples (%d malware), %d features (%d manifest), density %.2f",
        len(d), n_malware, n, n_manifest, d.mean_density(),
    )
    return d


def split(d, test_fraction, seed):
    """ラベル層化による訓練/テスト分割

    ラベルごとに round_half_up(件数 * test_fraction) 件をテスト側へ。
    """
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    # RandomState の整数シードは32ビットまで
    random_state = np.random.RandomState(np.random.MT19937(seed))
    labels = d.label_array
    in_test = np.zeros(len(d), dtype=bool)
    for value in (1, 0):
        members = np.flatnonzero(labels == value)
        n_test = round_half_up(len(members) * test_fraction)
        if n_test == 0 or n_test == len(members):
            name = MALWARE if value else BENIGN
            raise SplitError(
                f"{len(members)} {name} samples cannot be split with test_fraction {test_fraction}"
            )
        _, picked = train_test_split(members, test_size=n_test, random_state=random_state)
        in_test[picked] = True

    train = Dataset(d.space, tuple(s for s, t in zip(d.samples, in_test) if not t), TRAIN)
    test = Dataset(d.space, tuple(s for s, t in zip(d.samples, in_test) if t), TEST)
    return train, test


def merge(a, b):
    """同じ特徴空間のデータセットを連結"""
    if a.space != b.space:
        raise ParameterError("cannot merge datasets over different feature spaces")
    return Dataset(a.space, a.samples + b.samples, UNSPLIT)


def sample_batch_indices(d, batch_size, malware_ratio, rng):
    """マルウェア比率を固定したバッチのサンプル番号"""
    if batch_size <= 0:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    if not 0.0 <= malware_ratio <= 1.0:
        raise ParameterError(f"malware_ratio must lie in [0, 1], got {malware_ratio}")
    labels = d.label_array
    malware_pool = np.flatnonzero(labels == 1)
    benign_pool = np.flatnonzero(labels == 0)
    n_malware = round_half_up(batch_size * malware_ratio)
    n_benign = batch_size - n_malware

    parts = []
    for pool, need, name in ((malware_pool, n_malware, MALWARE), (benign_pool, n_benign, BENIGN)):
        if need == 0:
            continue
        if len(pool) == 0:
            raise ParameterError(f"batch needs {need} {name} samples but the dataset has none")
        # プールが足りない場合は復元抽出
        parts.append(rng.choice(pool, size=need, replace=len(pool) < need))
    idx = np.concatenate(parts)
    return idx[rng.permutation(len(idx))]


def sample_batch(d, batch_size, malware_ratio, rng):
    """マルウェア比率を固定したミニバッチを抽出"""
    return [d.samples[i] for i in sample_batch_indices(d, batch_size, malware_ratio, rng)]


def save(d, path):
    """データセットをテキスト形式で保存"""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in d.samples:
            fh.write(s.to_line() + "\n")


def load(path, space, split_tag=UNSPLIT):
    """テキスト形式のデータセットを読み込み"""
    samples = []
    n = space.n_features
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.endswith("\n"):
                raise FormatError("line is not newline-terminated", lineno, path)
            tokens = raw[:-1].split(" ")
            label = tokens[0]
            if label not in LABELS:
                raise FormatError(f"unknown label token {label!r}", lineno, path)
            try:
                indices = [int(t) for t in tokens[1:]]
            except ValueError as e:
                raise FormatError(f"bad feature index: {e}", lineno, path) from e
            for prev, cur in zip(indices, indices[1:]):
                if cur <= prev:
                    raise FormatError(f"indices not strictly ascending ({prev} then {cur})", lineno, path)
            for i in indices:
                if not 0 <= i < n:
                    raise FormatError(f"feature index {i} out of range [0, {n})", lineno, path)
            samples.append(Sample(tuple(indices), label))
    return Dataset(space, tuple(samples), split_tag)


def save_feature_space(space, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(space.to_text())


def load_feature_space(path):
    """特徴空間ファイルを読み込み"""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty feature-space file", 1, path)
    head = lines[0].split(" ")
    if len(head) != 2 or head[0] != "n_features":
        raise FormatError("first line must be 'n_features <N>'", 1, path)
    try:
        n = int(head[1])
    except ValueError as e:
        raise FormatError(f"bad feature count: {e}", 1, path) from e
    if n <= 0:
        raise FormatError(f"feature count must be positive, got {n}", 1, path)

    mask = [False] * n
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split(" ")
        if len(tokens) != 2 or tokens[0] != "manifest":
            raise FormatError("expected 'manifest <idx>'", lineno, path)
        try:
            i = int(tokens[1])
        except ValueError as e:
            raise FormatError(f"bad feature index: {e}", lineno, path) from e
        if not 0 <= i < n:
            raise FormatError(f"feature index {i} out of range [0, {n})", lineno, path)
        if mask[i]:
            raise FormatError(f"duplicate manifest index {i}", lineno, path)
        mask[i] = True
    if not any(mask):
        raise FormatError("feature space declares no manifest feature", len(lines), path)
    return FeatureSpace(n, tuple(mask))


def load_dataset(data_path, feature_space_path, split_tag=UNSPLIT):
    """特徴空間ファイルとデータファイルの組を読み込み"""
    space = load_feature_space(feature_space_path)
    d = load(data_path, space, split_tag)
    n_mal, n_ben = d.counts()
    logger.info("loaded %s: %d malware, %d benign", data_path, n_mal, n_ben)
    return d
