"""
スパースな二値入力に対する2層隠れ層MLP

順伝播・逆伝播は手書きのNumPy実装です。第1層の積はCSR行列との積、
つまり有効なインデックスの重み行の和として計算します。
出力ヘッドは単一ロジットのシグモイドと、温度付き2値ソフトマックスの2種類。
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse, special

import dataset
from config import NetworkDefaults
from errors import ConstructionError, FormatError, ParameterError

logger = logging.getLogger(__name__)

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

SIGMOID_SINGLE = "sigmoid_single"
SOFTMAX_PAIR = "softmax_pair"
HEADS = (SIGMOID_SINGLE, SOFTMAX_PAIR)

GLOROT_NORMAL = "glorot_normal"
ABS_GLOROT_NORMAL = "abs_glorot_normal"
INIT_MODES = (GLOROT_NORMAL, ABS_GLOROT_NORMAL)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = RELU

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConstructionError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConstructionError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class HeadKind:
    """出力ヘッドの種類と温度（温度はソフトマックスのみ有効）"""

    variant: str = SOFTMAX_PAIR
    temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in HEADS:
            raise ParameterError(f"unknown head {self.variant!r}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise ParameterError(f"temperature must be positive, got {self.temperature}")

    @property
    def out_dim(self):
        return 1 if self.variant == SIGMOID_SINGLE else 2

    @property
    def is_softmax(self):
        return self.variant == SOFTMAX_PAIR


@dataclass(frozen=True)
class InitMode:
    variant: str = GLOROT_NORMAL
    seed: int = 0

    def __post_init__(self):
        if self.variant not in INIT_MODES:
            raise ParameterError(f"unknown init mode {self.variant!r}")


@dataclass(frozen=True)
class Architecture:
    """隠れ層の幅と出力ヘッド"""

    hidden: tuple = NetworkDefaults.HIDDEN
    head: HeadKind = HeadKind()

    def layer_specs(self, n_features):
        dims = [n_features] + list(self.hidden)
        specs = [LayerSpec(i, o, RELU) for i, o in zip(dims, dims[1:])]
        specs.append(LayerSpec(dims[-1], self.head.out_dim, IDENTITY))
        return specs

    def with_head(self, head):
        return Architecture(self.hidden, head)


@dataclass(eq=False)
class Layer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    spec: LayerSpec


class ModelParams:
    """層の重み・バイアス、ヘッド、特徴空間チェックサムを持つモデル"""

    def __init__(self, layers, head, feature_space_id=""):
        self.layers = list(layers)
        self.head = head
        self.feature_space_id = feature_space_id
        self._validate()

    def _validate(self):
        if not self.layers:
            raise ConstructionError("model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.spec.out_dim != cur.spec.in_dim:
                raise ConstructionError(
                    f"layer dims do not chain: {prev.spec.out_dim} -> {cur.spec.in_dim}"
                )
        last = self.layers[-1].spec
        if last.out_dim != self.head.out_dim:
            raise ConstructionError(
                f"{self.head.variant} head needs {self.head.out_dim} outputs, got {last.out_dim}"
            )
        if last.activation != IDENTITY:
            raise ConstructionError("output layer must be linear (identity activation)")
        for layer in self.layers:
            if layer.weights.shape != (layer.spec.in_dim, layer.spec.out_dim):
                raise ConstructionError(f"weight shape {layer.weights.shape} does not match {layer.spec}")
            if layer.bias.shape != (layer.spec.out_dim,):
                raise ConstructionError(f"bias shape {layer.bias.shape} does not match {layer.spec}")
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise ConstructionError("model parameters must be finite")

    @property
    def n_features(self):
        return self.layers[0].spec.in_dim

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    @property
    def weights(self):
        return [layer.weights for layer in self.layers]

    @property
    def biases(self):
        return [layer.bias for layer in self.layers]

    def copy(self):
        layers = [Layer(l.weights.copy(), l.bias.copy(), l.spec) for l in self.layers]
        return ModelParams(layers, self.head, self.feature_space_id)

    def astype(self, dtype):
        """指定精度にキャストしたモデル（攻撃側の配備精度用）"""
        if self.dtype == dtype:
            return self
        layers = [Layer(l.weights.astype(dtype), l.bias.astype(dtype), l.spec) for l in self.layers]
        return ModelParams(layers, self.head, self.feature_space_id)

    def with_temperature(self, temperature):
        if not self.head.is_softmax:
            raise ParameterError("only softmax heads carry a temperature")
        m = self.copy()
        m.head = HeadKind(SOFTMAX_PAIR, float(temperature))
        return m

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.head != other.head or self.feature_space_id != other.feature_space_id:
            return False
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.spec == b.spec
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        dims = [self.layers[0].spec.in_dim] + [l.spec.out_dim for l in self.layers]
        return f"ModelParams(dims={dims}, head={self.head}, feature_space_id={self.feature_space_id!r})"


def init(layer_specs, head, mode, feature_space_id=""):
    """Glorot正規分布で初期化（abs_glorot_normalは絶対値を取る）"""
    specs = list(layer_specs)
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_dim != cur.in_dim:
            raise ConstructionError(f"layer dims do not chain: {prev.out_dim} -> {cur.in_dim}")
    rng = np.random.default_rng(mode.seed)
    layers = []
    for spec in specs:
        std = np.sqrt(2.0 / (spec.in_dim + spec.out_dim))
        w = rng.normal(0.0, std, size=(spec.in_dim, spec.out_dim))
        if mode.variant == ABS_GLOROT_NORMAL:
            w = np.abs(w)
        layers.append(Layer(w, np.zeros(spec.out_dim), spec))
    return ModelParams(layers, head, feature_space_id)


@dataclass
class ForwardTrace:
    """順伝播の記録（逆伝播で使用）"""

    inputs: object  # CSR行列または密行列 (n, n_features)
    pre: list  # 各層の前活性
    post: list  # 隠れ層の出力（ドロップアウト適用後）
    masks: list  # ドロップアウトの倍率マスク（推論時はNone）
    logits: np.ndarray
    probs: np.ndarray  # シグモイド: (n, 1)、ソフトマックス: (n, 2) = (良性, マルウェア)
    head: HeadKind
    temperature: float

    @property
    def p_malware(self):
        return self.probs[:, 0] if not self.head.is_softmax else self.probs[:, 1]

    @property
    def batch_size(self):
        return self.logits.shape[0]


@dataclass
class Gradients:
    weights: list
    biases: list
    inputs: object = None  # 入力に対する密な勾配 (n, n_features)

    def add_weight_terms(self, terms):
        for i, t in enumerate(terms):
            if t is not None:
                self.weights[i] = self.weights[i] + t

    def scale(self, factor):
        self.weights = [w * factor for w in self.weights]
        self.biases = [b * factor for b in self.biases]
        if self.inputs is not None:
            self.inputs = self.inputs * factor

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


def as_matrix(x, n_features, dtype=np.float64):
    """入力をCSRまたは密な2次元配列に揃える"""
    if isinstance(x, dataset.Sample):
        mat = dataset.to_matrix([x], n_features, dtype)
    elif isinstance(x, dataset.Dataset):
        mat = x.to_matrix(dtype)
    elif sparse.issparse(x):
        mat = x.tocsr()
        if mat.dtype != dtype:
            mat = mat.astype(dtype)
    elif isinstance(x, np.ndarray):
        mat = np.atleast_2d(x).astype(dtype, copy=False)
    else:
        mat = dataset.to_matrix(list(x), n_features, dtype)
    if mat.shape[1] != n_features:
        raise ParameterError(f"input has {mat.shape[1]} features, model expects {n_features}")
    return mat


def head_probs(logits, head, temperature):
    """ロジットから確率を計算（log-sum-exp で安定化）"""
    if head.is_softmax:
        return special.softmax(logits / temperature, axis=1)
    return special.expit(logits)


def forward(m, x, dropout=None, temperature=None):
    """順伝播。dropout=(rate, rng) を与えると訓練モード"""
    X = as_matrix(x, m.n_features, m.dtype)
    T = m.head.temperature if temperature is None else float(temperature)
    if dropout is not None:
        rate, rng = dropout
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    pre, post, masks = [], [], []
    a = X
    last = len(m.layers) - 1
    for li, layer in enumerate(m.layers):
        z = np.asarray(a @ layer.weights) + layer.bias
        pre.append(z)
        if li == last:
            break
        h = np.maximum(z, 0.0) if layer.spec.activation == RELU else z
        mask = None
        if dropout is not None and rate > 0.0:
            # 逆ドロップアウト：マスク後に 1/(1-rate) 倍
            mask = (rng.random(h.shape) >= rate).astype(h.dtype) / (1.0 - rate)
            h = h * mask
        masks.append(mask)
        post.append(h)
        a = h
    logits = pre[-1]
    return ForwardTrace(X, pre, post, masks, logits, head_probs(logits, m.head, T), m.head, T)


def _label_value(v):
    if v == dataset.MALWARE:
        return 1.0
    if v == dataset.BENIGN:
        return 0.0
    if isinstance(v, str):
        raise ParameterError(f"unknown label {v!r}")
    return v


def as_targets(target, head, n):
    """目的ラベルを (n,)（シグモイド）または (n, 2)（ソフトマックス）に正規化"""
    if isinstance(target, str):
        target = [target]
    if not isinstance(target, np.ndarray):
        target = [_label_value(v) for v in target]
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ParameterError(f"{t.shape[0]} targets for {n} outputs")
        if np.any((t < 0) | (t > 1)):
            raise ParameterError("hard targets must lie in [0, 1]")
        return t if not head.is_softmax else np.stack([1.0 - t, t], axis=1)
    if t.shape != (n, 2):
        raise ParameterError(f"soft targets must have shape ({n}, 2), got {t.shape}")
    if np.any((t < 0) | (t > 1)) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
        raise ParameterError("soft targets must be probability distributions")
    return t[:, 1] if not head.is_softmax else t


def cross_entropy(logits, target, head, temperature):
    """バッチ平均の交差エントロピー"""
    n = logits.shape[0]
    t = as_targets(target, head, n)
    if head.is_softmax:
        logp = special.log_softmax(logits / temperature, axis=1)
        return float(-np.mean(np.sum(t * logp, axis=1)))
    z = logits[:, 0]
    return float(np.mean(np.logaddexp(0.0, z) - t * z))


def cross_entropy_grad(logits, target, head, temperature):
    """交差エントロピーのロジットに対する勾配"""
    n = logits.shape[0]
    t = as_targets(target, head, n)
    if head.is_softmax:
        p = special.softmax(logits / temperature, axis=1)
        return (p - t) / (temperature * n)
    return ((special.expit(logits[:, 0]) - t) / n)[:, None]


def backprop(m, trace, d_logits, pre_grads=None, post_grads=None, need_input=True):
    """ロジット勾配から全パラメータ（と入力）の勾配を計算

    pre_grads[i] は隠れ層 i の前活性、post_grads[i] は隠れ層 i の出力
    （次の層の入力）に直接加わる勾配です。正則化項がここから合流します。
    """
    n_layers = len(m.layers)
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    g_in = None
    delta = d_logits
    for li in reversed(range(n_layers)):
        layer = m.layers[li]
        a_in = trace.inputs if li == 0 else trace.post[li - 1]
        g_w[li] = np.asarray(a_in.T @ delta)
        g_b[li] = delta.sum(axis=0)
        if li > 0:
            d_a = delta @ layer.weights.T
            if post_grads is not None and post_grads[li - 1] is not None:
                d_a = d_a + post_grads[li - 1]
            mask = trace.masks[li - 1]
            if mask is not None:
                d_a = d_a * mask
            prev = m.layers[li - 1]
            # ReLUの0での劣勾配は0
            d_z = d_a * (trace.pre[li - 1] > 0) if prev.spec.activation == RELU else d_a
            if pre_grads is not None and pre_grads[li - 1] is not None:
                d_z = d_z + pre_grads[li - 1]
            delta = d_z
        elif need_input:
            g_in = delta @ layer.weights.T
    return Gradients(g_w, g_b, g_in)


def backward(m, trace, target, pre_grads=None, post_grads=None, need_input=True):
    """訓練損失（交差エントロピー）の勾配"""
    d_logits = cross_entropy_grad(trace.logits, target, trace.head, trace.temperature)
    return backprop(m, trace, d_logits, pre_grads, post_grads, need_input)


def input_gradient(m, x, temperature=1.0):
    """マルウェア確率の入力に対する勾配（攻撃が使用）"""
    trace = forward(m, x, temperature=temperature)
    p = trace.probs
    if m.head.is_softmax:
        pm_pb = p[:, 1] * p[:, 0]
        d_logits = np.stack([-pm_pb, pm_pb], axis=1) / trace.temperature
    else:
        d_logits = p * (1.0 - p)
    g = backprop(m, trace, d_logits, need_input=True).inputs
    return g[0] if isinstance(x, dataset.Sample) else g


def predict_proba(m, x):
    """温度1でのマルウェア確率（配備時の規約）"""
    p = forward(m, x, temperature=1.0).p_malware
    return float(p[0]) if isinstance(x, dataset.Sample) else p


def predict_batch(m, x):
    """一括予測（1 = マルウェア）。ちょうど0.5はマルウェア扱い"""
    return (forward(m, x, temperature=1.0).p_malware >= 0.5).astype(np.int64)


def predict(m, x):
    return dataset.MALWARE if predict_proba(m, x) >= 0.5 else dataset.BENIGN


def _fmt(v):
    return NetworkDefaults.FLOAT_FORMAT % v


def serialize(m):
    """モデルをバージョン付きテキスト形式に変換"""
    lines = [
        " ".join([
            NetworkDefaults.MODEL_MAGIC,
            NetworkDefaults.MODEL_VERSION,
            m.head.variant,
            _fmt(m.head.temperature),
            str(len(m.layers)),
            m.feature_space_id or "-",
        ])
    ]
    for layer in m.layers:
        spec = layer.spec
        lines.append(f"layer {spec.in_dim} {spec.out_dim} {spec.activation}")
        w = layer.weights.astype(np.float64)
        for row in w:
            lines.append(" ".join(_fmt(v) for v in row.tolist()))
        lines.append(" ".join(_fmt(v) for v in layer.bias.astype(np.float64).tolist()))
    body = ("\n".join(lines) + "\n").encode("utf-8")
    digest = hashlib.sha256(body).hexdigest()
    return body + f"checksum {digest}\n".encode("utf-8")


def _floats(line, expected, lineno):
    tokens = line.split(" ")
    if len(tokens) != expected:
        raise FormatError(f"expected {expected} values, got {len(tokens)}", lineno)
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"bad float: {e}", lineno) from e
    if not np.all(np.isfinite(values)):
        raise FormatError("non-finite value", lineno)
    return values


def deserialize(data):
    """serializeの逆変換。壊れたデータは部分的なモデルを返さず例外"""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"model file is not UTF-8: {e}") from e
    lines = text.split("\n")
    if len(lines) < 3 or lines[-1] != "":
        raise FormatError("truncated model file")
    lines = lines[:-1]
    trailer = lines[-1].split(" ")
    if len(trailer) != 2 or trailer[0] != "checksum":
        raise FormatError("missing checksum trailer", len(lines))
    body = ("\n".join(lines[:-1]) + "\n").encode("utf-8")
    if hashlib.sha256(body).hexdigest() != trailer[1]:
        raise FormatError("checksum mismatch", len(lines))

    header = lines[0].split(" ")
    if len(header) != 6 or header[0] != NetworkDefaults.MODEL_MAGIC:
        raise FormatError("bad model header", 1)
    if header[1] != NetworkDefaults.MODEL_VERSION:
        raise FormatError(f"unsupported model version {header[1]!r}", 1)
    try:
        head = HeadKind(header[2], float(header[3]))
        n_layers = int(header[4])
    except (ValueError, ParameterError) as e:
        raise FormatError(f"bad model header: {e}", 1) from e
    feature_space_id = "" if header[5] == "-" else header[5]

    layers = []
    pos = 1
    for _ in range(n_layers):
        if pos >= len(lines) - 1:
            raise FormatError("missing layer block", pos + 1)
        dims = lines[pos].split(" ")
        try:
            if len(dims) != 4 or dims[0] != "layer":
                raise ValueError("expected 'layer <in> <out> <activation>'")
            spec = LayerSpec(int(dims[1]), int(dims[2]), dims[3])
        except (ValueError, ConstructionError) as e:
            raise FormatError(f"bad layer line: {e}", pos + 1) from e
        pos += 1
        if pos + spec.in_dim + 1 > len(lines) - 1:
            raise FormatError("truncated layer block", pos + 1)
        w = np.empty((spec.in_dim, spec.out_dim))
        for r in range(spec.in_dim):
            w[r] = _floats(lines[pos], spec.out_dim, pos + 1)
            pos += 1
        b = _floats(lines[pos], spec.out_dim, pos + 1)
        pos += 1
        layers.append(Layer(w, b, spec))
    if pos != len(lines) - 1:
        raise FormatError("unexpected trailing content", pos + 1)
    try:
        return ModelParams(layers, head, feature_space_id)
    except ConstructionError as e:
        raise FormatError(f"invalid model: {e}") from e


def save_model(m, path):
    with open(path, "wb") as fh:
        fh.write(serialize(m))


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return deserialize(data)
    except FormatError as e:
        raise FormatError(str(e), path=path) from e
