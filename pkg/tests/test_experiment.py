import pathlib

import pytest

import constraints
import experiment
import network
from attack import AttackConfig
from config import AttackDefaults, GridDefaults, TrainingDefaults
from errors import ConfigError


def test_defaults_without_a_file():
    cfg = experiment.load_experiment_config()
    assert cfg.source == experiment.SYNTHETIC
    assert cfg.synth.n_features == 5000
    assert cfg.arch.hidden == (200, 200)
    assert cfg.arch.head.variant == network.SOFTMAX_PAIR
    assert cfg.train.batch_size == 1000
    assert cfg.train.malware_ratio == 0.3
    assert cfg.train.learning_rate == TrainingDefaults.LEARNING_RATE == 0.1
    assert cfg.train.constraint.n1_step == constraints.PROXIMAL
    assert cfg.attack.max_iterations == 20
    assert cfg.grid.n1_values == GridDefaults.AXIS
    assert cfg.distill is None


def test_attack_settings_default_to_attack_config():
    cfg = experiment.ExperimentConfig()
    assert isinstance(cfg.attack, AttackConfig)
    assert cfg.attack == AttackConfig()
    assert cfg.attack.precision == AttackDefaults.PRECISION
    assert experiment.load_experiment_config().attack == cfg.attack


def test_sections_are_parsed():
    cfg = experiment.parse_experiment_config(
        """
[network]
hidden = 16,8
head = sigmoid_single

[constraints]
hard_scope = manifest_monotone
init = abs_glorot_normal

[distill]
enabled = true
temperature = 50
teacher_epochs = 4

[attack]
max_samples = 25
require_negative_gradient = no

[grid]
n1_values = 0, 0.67
seeds = 4
"""
    )
    assert cfg.arch.hidden == (16, 8)
    assert cfg.arch.head.variant == network.SIGMOID_SINGLE
    assert cfg.train.constraint.hard_scope == constraints.MANIFEST_MONOTONE
    assert cfg.train.constraint.init.variant == network.ABS_GLOROT_NORMAL
    # ハード射影では既定のエポック数が長い
    assert cfg.train.epochs == TrainingDefaults.CONSTRAINED_EPOCHS
    assert cfg.distill.temperature == 50.0
    assert cfg.distill.teacher_train.epochs == 4
    assert cfg.distill.student_train.epochs == TrainingDefaults.CONSTRAINED_EPOCHS
    assert cfg.max_samples == 25
    assert cfg.attack.require_negative_gradient is False
    assert cfg.grid.n1_values == (0.0, 0.67)
    assert cfg.grid.seeds == (4,)


@pytest.mark.parametrize(
    "text",
    [
        "[bogus]\nx = 1\n",
        "[training]\nepochz = 3\n",
        "[training]\nepochs = three\n",
        "[training]\nbatch_size = 0\n",
        "[network]\nhead = tanh\n",
        "[constraints]\nn1 = -1\n",
        "[constraints]\nn1_step = exact\n",
        "[dataset]\nsource = files\n",
        "[dataset]\nsource = ftp\n",
        "[dataset]\nmanifest_fraction = 1.5\n",
        "[attack]\nmax_samples = 0\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        experiment.parse_experiment_config(text)


def test_missing_data_file_is_a_config_error(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[dataset]\nsource = files\ndata_path = nowhere.txt\nfeature_space_path = f.txt\n")
    with pytest.raises(ConfigError):
        experiment.load_experiment_config(path)


def test_resolved_config_round_trips():
    cfg = experiment.parse_experiment_config(
        "[training]\nepochs = 3\nlearning_rate = 0.02\n"
        "[constraints]\nn1 = 0.5\nn1_step = subgradient\n"
        "[grid]\nworkers = 2\n"
    )
    assert cfg.train.constraint.n1_step == constraints.SUBGRADIENT
    again = experiment.parse_experiment_config(cfg.to_ini())
    assert again == cfg
    assert again.to_ini() == cfg.to_ini()


def test_seed_override(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[training]\nseed = 5\n[dataset]\nseed = 6\n")
    cfg = experiment.load_experiment_config(path, seed=42)
    assert cfg.train.seed == 42
    assert cfg.synth.seed == 42
    assert cfg.grid.base_train.seed == 42
    assert "seed = 42" in cfg.to_ini()


@pytest.mark.parametrize(
    "path", sorted((pathlib.Path(__file__).parent.parent / "experiments").glob("*.ini")), ids=lambda p: p.stem
)
def test_bundled_experiments_load(path):
    cfg = experiment.load_experiment_config(path)
    assert cfg.output_directory.startswith("out/")
    assert cfg.train.learning_rate == 0.1
