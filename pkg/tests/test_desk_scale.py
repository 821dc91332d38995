"""机上スケール（5000特徴、20,000サンプル、シード1〜3）での再現テスト

同梱の experiments/*.ini のハイパーパラメータをそのまま使います。
"""

import functools
import pathlib
from dataclasses import replace

import numpy as np
import pytest

import attack
import constraints
import dataset
import evaluation
import experiment
import training

pytestmark = pytest.mark.slow

EXPERIMENTS = pathlib.Path(__file__).parent.parent / "experiments"
SEEDS = (1, 2, 3)


def load(name, seed):
    return experiment.load_experiment_config(EXPERIMENTS / f"{name}.ini", seed=seed)


@functools.lru_cache(maxsize=None)
def corpus(seed):
    return experiment.load_split(load("baseline", seed))


@functools.lru_cache(maxsize=None)
def trained(name, seed, n1=None):
    cfg = load(name, seed)
    train, _ = corpus(seed)
    train_cfg = cfg.train
    if n1 is not None:
        train_cfg = replace(train_cfg, constraint=replace(train_cfg.constraint, n1_coeff=n1))
    m, _ = training.train(train, cfg.arch, train_cfg, progress=False)
    return m


@functools.lru_cache(maxsize=None)
def distilled(seed):
    cfg = load("distill_t100", seed)
    train, _ = corpus(seed)
    return training.train_distilled(train, cfg.arch, cfg.distill, progress=False).student


def attack_rate(m, seed):
    _, test = corpus(seed)
    return attack.misclassification_rate(m, test.malware(), test.space, attack.AttackConfig(), progress=False)


def test_synthetic_density_at_desk_scale():
    d = dataset.generate_synthetic(dataset.SynthSpec(n_features=5000, n_samples=20000, mean_density=48, seed=1))
    assert 43.2 <= d.mean_density() <= 52.8


@pytest.mark.parametrize("seed", SEEDS)
def test_hard_restricted_is_certified_and_unattackable(seed):
    m = trained("hard_restricted", seed)
    _, test = corpus(seed)
    report = evaluation.certify_monotone(
        m, test.space, 10000, rng=seed, scope=constraints.ALL_WEIGHTS, samples=test.samples
    )
    assert report.structural and report.behavioral
    rate = attack_rate(m, seed)
    assert rate.denominator > 0
    assert rate.rate == 0.0


def test_manifest_restricted_resists_and_keeps_negative_code_weights():
    relaxed = 0
    for seed in SEEDS:
        m = trained("manifest_restricted", seed)
        _, test = corpus(seed)
        rate = attack_rate(m, seed)
        assert rate.denominator > 0
        assert rate.rate == 0.0
        assert constraints.scope_negative_mass(m, constraints.MANIFEST_MONOTONE, test.space) == 0.0
        if np.any(m.weights[0][~test.space.manifest] < 0):
            relaxed += 1
    assert relaxed >= 2


@pytest.mark.parametrize("seed", SEEDS)
def test_unhardened_baseline_is_vulnerable(seed):
    rate = attack_rate(trained("baseline", seed), seed)
    assert rate.denominator > 0
    assert rate.rate >= 0.5


@pytest.mark.parametrize("seed", SEEDS)
def test_n1_lowers_negative_mass_and_attack_rate(seed):
    regularized = trained("n1_067", seed)
    plain = trained("n1_067", seed, n1=0.0)
    assert constraints.negative_mass(regularized) < constraints.negative_mass(plain)
    assert attack_rate(regularized, seed).rate < attack_rate(plain, seed).rate


def test_distillation_masks_gradients_but_transfers():
    masked = 0
    for seed in SEEDS:
        baseline = trained("baseline", seed)
        student = distilled(seed)
        _, test = corpus(seed)
        direct = attack_rate(student, seed).rate
        transfer = attack.transfer_rate(
            baseline, student, test.malware(), test.space, attack.AttackConfig(), progress=False
        ).rate
        if direct <= 0.5 * attack_rate(baseline, seed).rate and transfer >= 3.0 * direct:
            masked += 1
    assert masked >= 2


def test_negative_mass_falls_along_the_n1_axis():
    cfg = load("grid", 1)
    train, test = corpus(1)
    spec = evaluation.GridSpec(n1_values=(0.0, 0.22, 2.2), n2_values=(0.0,), base_train=cfg.train, seeds=(1,))
    report = evaluation.grid_search(train, test, cfg.arch, spec, max_samples=50, progress=False)
    assert report.failures() == []
    assert report.monotone_violations() == []
    masses = report.mean("negative_mass")[:, 0]
    assert masses[-1] < masses[0]
