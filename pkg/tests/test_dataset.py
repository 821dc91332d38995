import numpy as np
import pytest

import dataset
from errors import FormatError, ParameterError, SplitError


def test_feature_space_needs_a_manifest_feature():
    with pytest.raises(ParameterError):
        dataset.FeatureSpace(3, (False, False, False))


def test_feature_space_mask_length_must_match():
    with pytest.raises(ParameterError):
        dataset.FeatureSpace(3, (True, False))


def test_sample_indices_must_increase():
    with pytest.raises(ParameterError):
        dataset.Sample((3, 1), dataset.MALWARE)
    with pytest.raises(ParameterError):
        dataset.Sample((1, 1), dataset.BENIGN)
    assert dataset.Sample.of([3, 1, 3], dataset.MALWARE).indices == (1, 3)


def test_dataset_rejects_out_of_range_indices(tiny_space):
    with pytest.raises(ParameterError):
        dataset.Dataset(tiny_space, (dataset.Sample((0, 6), dataset.MALWARE),))


def test_generate_synthetic_is_deterministic(small_spec):
    a = dataset.generate_synthetic(small_spec)
    b = dataset.generate_synthetic(small_spec)
    assert a == b
    assert a.space.checksum() == b.space.checksum()


def test_generate_synthetic_counts_and_density():
    spec = dataset.SynthSpec(
        n_features=500, manifest_fraction=0.55, n_samples=2000, malware_fraction=0.08,
        mean_density=20, n_rules=10, seed=7,
    )
    d = dataset.generate_synthetic(spec)
    n_mal, n_ben = d.counts()
    assert n_mal == dataset.round_half_up(2000 * 0.08)
    assert n_mal + n_ben == 2000
    assert abs(d.mean_density() - 20) <= 2.0
    assert int(np.count_nonzero(d.space.manifest)) == dataset.round_half_up(500 * 0.55)


def test_planted_rules_are_disjoint_and_exculpate_with_manifest_features():
    rng = np.random.default_rng(0)
    manifest = np.arange(10, 40)
    rules = dataset._plant_rules(rng, 50, manifest, 8)
    assert len(rules) == 8
    used = [f for rule in rules for f in rule]
    assert len(set(used)) == len(used)
    for a, b, c in rules:
        assert c in manifest


@pytest.mark.parametrize(
    "field, value",
    [("manifest_fraction", 1.0), ("malware_fraction", 0.0), ("mean_density", 60), ("n_samples", 0)],
)
def test_synth_spec_validation(small_spec, field, value):
    from dataclasses import replace

    with pytest.raises(ParameterError):
        dataset.generate_synthetic(replace(small_spec, **{field: value}))


def test_split_is_stratified_and_preserves_order(small_corpus):
    train, test = dataset.split(small_corpus, 0.2, 5)
    n_mal, n_ben = small_corpus.counts()
    assert test.counts() == (dataset.round_half_up(n_mal * 0.2), dataset.round_half_up(n_ben * 0.2))
    assert len(train) + len(test) == len(small_corpus)
    assert train.split_tag == dataset.TRAIN and test.split_tag == dataset.TEST

    # 元の順序を保つ部分列
    positions = {id(s): i for i, s in enumerate(small_corpus.samples)}
    for part in (train, test):
        order = [positions[id(s)] for s in part.samples]
        assert order == sorted(order)

    merged = dataset.merge(train, test)
    assert sorted(merged.samples, key=lambda s: (s.label, s.indices)) == sorted(
        small_corpus.samples, key=lambda s: (s.label, s.indices)
    )


def test_split_fails_when_a_side_gets_no_label(tiny_space):
    samples = [dataset.Sample((0,), dataset.MALWARE)] + [dataset.Sample((1,), dataset.BENIGN)] * 9
    d = dataset.Dataset(tiny_space, tuple(samples))
    with pytest.raises(SplitError):
        dataset.split(d, 0.2, 0)


def test_sample_batch_ratio_is_exact(small_corpus):
    rng = np.random.default_rng(11)
    for _ in range(1000):
        batch = dataset.sample_batch(small_corpus, 1000, 0.3, rng)
        assert len(batch) == 1000
        assert sum(s.is_malware for s in batch) == 300


def test_sample_batch_resamples_small_pools(tiny_space):
    samples = (dataset.Sample((0,), dataset.MALWARE), dataset.Sample((1,), dataset.BENIGN))
    d = dataset.Dataset(tiny_space, samples)
    batch = dataset.sample_batch(d, 10, 0.3, np.random.default_rng(0))
    assert sum(s.is_malware for s in batch) == 3
    assert len(batch) == 10


def test_sample_batch_rejects_bad_requests(tiny_space):
    d = dataset.Dataset(tiny_space, (dataset.Sample((1,), dataset.BENIGN),))
    rng = np.random.default_rng(0)
    with pytest.raises(ParameterError):
        dataset.sample_batch(d, 0, 0.3, rng)
    with pytest.raises(ParameterError):
        dataset.sample_batch(d, 10, 0.3, rng)
    assert len(dataset.sample_batch(d, 4, 0.0, rng)) == 4


def test_save_and_load_dataset(tmp_path, small_corpus):
    space_path = tmp_path / "features.txt"
    data_path = tmp_path / "data.txt"
    dataset.save_feature_space(small_corpus.space, space_path)
    dataset.save(small_corpus, data_path)
    loaded = dataset.load_dataset(data_path, space_path)
    assert loaded.samples == small_corpus.samples
    assert loaded.space == small_corpus.space
    assert loaded.space.checksum() == small_corpus.space.checksum()


def test_to_matrix_is_binary_csr(small_corpus):
    X = small_corpus.to_matrix()
    assert X.shape == (len(small_corpus), small_corpus.space.n_features)
    assert X.nnz == sum(len(s.indices) for s in small_corpus.samples)
    assert set(np.unique(X.data).tolist()) == {1.0}
    np.testing.assert_array_equal(small_corpus.label_array, [1 if s.is_malware else 0 for s in small_corpus.samples])


@pytest.mark.parametrize(
    "text, line",
    [
        ("malware 0 2\nbogus 1\n", 2),
        ("benign 3 1\n", 1),
        ("malware 0\nbenign 6\n", 2),
        ("benign x\n", 1),
        ("benign 1", 1),
    ],
)
def test_load_reports_the_offending_line(tmp_path, tiny_space, text, line):
    path = tmp_path / "data.txt"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(FormatError) as info:
        dataset.load(path, tiny_space)
    assert info.value.line == line


def test_load_accepts_samples_without_features(tmp_path, tiny_space):
    path = tmp_path / "data.txt"
    path.write_text("benign\nmalware 2 5\n", encoding="utf-8")
    d = dataset.load(path, tiny_space)
    assert d.samples[0].indices == ()
    assert d.samples[1] == dataset.Sample((2, 5), dataset.MALWARE)


def test_load_feature_space_rejects_duplicates(tmp_path):
    path = tmp_path / "features.txt"
    path.write_text("n_features 4\nmanifest 1\nmanifest 1\n", encoding="utf-8")
    with pytest.raises(FormatError):
        dataset.load_feature_space(path)


def test_split_is_reproducible_for_a_seed(small_corpus):
    train_a, test_a = dataset.split(small_corpus, 0.25, 7)
    train_b, test_b = dataset.split(small_corpus, 0.25, 7)
    assert test_a.samples == test_b.samples
    assert train_a.samples == train_b.samples
    _, other = dataset.split(small_corpus, 0.25, 8)
    assert other.samples != test_a.samples
    assert other.counts() == test_a.counts()


def test_split_accepts_64_bit_seeds(small_corpus):
    _, test = dataset.split(small_corpus, 0.25, 2**64 - 1)
    n_mal, n_ben = small_corpus.counts()
    assert test.counts() == (dataset.round_half_up(n_mal * 0.25), dataset.round_half_up(n_ben * 0.25))
