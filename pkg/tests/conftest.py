import numpy as np
import pytest

import dataset
import network


@pytest.fixture
def tiny_space():
    # 特徴 0, 1 はコード特徴、2 以降はマニフェスト特徴
    return dataset.FeatureSpace.from_indices(6, [2, 3, 4, 5])


@pytest.fixture
def make_model():
    """重みとバイアスの列から ModelParams を組み立てる"""

    def build(weights, biases, head=network.SIGMOID_SINGLE, temperature=1.0, feature_space_id="", hidden_act=network.RELU):
        layers = []
        last = len(weights) - 1
        for i, (w, b) in enumerate(zip(weights, biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            act = network.IDENTITY if i == last else hidden_act
            layers.append(network.Layer(w, b, network.LayerSpec(w.shape[0], w.shape[1], act)))
        return network.ModelParams(layers, network.HeadKind(head, temperature), feature_space_id)

    return build


@pytest.fixture
def random_model():
    """Glorot初期化の小さなネットワーク"""

    def build(n_features, hidden=(8, 8), head=network.SIGMOID_SINGLE, seed=0, variant=network.GLOROT_NORMAL,
              feature_space_id=""):
        arch = network.Architecture(tuple(hidden), network.HeadKind(head, 1.0))
        return network.init(arch.layer_specs(n_features), arch.head, network.InitMode(variant, seed), feature_space_id)

    return build


@pytest.fixture(scope="session")
def small_spec():
    return dataset.SynthSpec(
        n_features=60,
        manifest_fraction=0.5,
        n_samples=400,
        malware_fraction=0.3,
        mean_density=8,
        n_rules=4,
        seed=3,
    )


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return dataset.generate_synthetic(small_spec)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return dataset.split(small_corpus, 0.25, 0)
