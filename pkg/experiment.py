"""
実験設定ファイル（INI形式）の読み込み・検証・書き出し

セクションは [dataset] [network] [training] [constraints] [distill]
[attack] [grid] [output]。未知のセクションやキーはエラーです。
"""

import configparser
import io
import logging
import os
from dataclasses import dataclass, field, replace

import constraints
import dataset
import evaluation
import network
import training
from attack import AttackConfig
from config import AttackDefaults, DatasetDefaults, GridDefaults, NetworkDefaults, TrainingDefaults
from errors import ConfigError, MonotoneGuardError

logger = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
FILES = "files"

KEYS = {
    "dataset": (
        "source", "n_features", "manifest_fraction", "n_samples", "malware_fraction",
        "mean_density", "n_rules", "seed", "data_path", "feature_space_path",
        "test_fraction", "split_seed",
    ),
    "network": ("hidden", "head", "temperature"),
    "training": (
        "epochs", "batch_size", "malware_ratio", "learning_rate", "momentum", "dropout_rate", "seed",
    ),
    "constraints": ("hard_scope", "n1", "n2", "placement", "init", "n1_step"),
    "distill": ("enabled", "temperature", "teacher_epochs", "student_epochs", "gradient_scale"),
    "attack": ("max_iterations", "require_negative_gradient", "precision", "max_samples"),
    "grid": ("n1_values", "n2_values", "seeds", "workers", "temperatures", "malware_ratios"),
    "output": ("directory",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = SYNTHETIC
    synth: dataset.SynthSpec = field(default_factory=dataset.SynthSpec)
    data_path: str = None
    feature_space_path: str = None
    test_fraction: float = DatasetDefaults.TEST_FRACTION
    split_seed: int = DatasetDefaults.SPLIT_SEED
    arch: network.Architecture = field(default_factory=network.Architecture)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    distill: training.DistillConfig = None
    attack: AttackConfig = field(default_factory=AttackConfig)
    max_samples: int = None
    grid: evaluation.GridSpec = field(default_factory=evaluation.GridSpec)
    workers: int = GridDefaults.WORKERS
    temperatures: tuple = GridDefaults.TEMPERATURES
    malware_ratios: tuple = GridDefaults.MALWARE_RATIOS
    output_directory: str = "out"

    @property
    def distill_or_default(self):
        """[distill] が無効でも蒸留コマンドが使う設定"""
        if self.distill is not None:
            return self.distill
        return training.DistillConfig(
            teacher_train=self.train, student_train=self.train
        )

    def with_seed(self, seed):
        """--seed による学習・データ生成シードの上書き"""
        synth = replace(self.synth, seed=seed)
        train = replace(self.train, seed=seed)
        distill = self.distill
        if distill is not None:
            distill = replace(
                distill,
                teacher_train=replace(distill.teacher_train, seed=seed),
                student_train=replace(distill.student_train, seed=seed),
            )
        grid = replace(self.grid, base_train=train)
        return replace(self, synth=synth, train=train, distill=distill, grid=grid)

    def to_ini(self):
        """既定値を埋めた設定をINIテキストに変換"""
        parser = configparser.ConfigParser(interpolation=None)
        s, t, c = self.synth, self.train, self.train.constraint
        parser["dataset"] = {
            "source": self.source,
            "n_features": str(s.n_features),
            "manifest_fraction": _num(s.manifest_fraction),
            "n_samples": str(s.n_samples),
            "malware_fraction": _num(s.malware_fraction),
            "mean_density": _num(s.mean_density),
            "n_rules": str(s.n_rules),
            "seed": str(s.seed),
            "test_fraction": _num(self.test_fraction),
            "split_seed": str(self.split_seed),
        }
        if self.source == FILES:
            parser["dataset"]["data_path"] = self.data_path
            parser["dataset"]["feature_space_path"] = self.feature_space_path
        parser["network"] = {
            "hidden": _join(self.arch.hidden),
            "head": self.arch.head.variant,
            "temperature": _num(self.arch.head.temperature),
        }
        parser["training"] = {
            "epochs": str(t.epochs),
            "batch_size": str(t.batch_size),
            "malware_ratio": _num(t.malware_ratio),
            "learning_rate": _num(t.learning_rate),
            "momentum": _num(t.momentum),
            "dropout_rate": _num(t.dropout_rate),
            "seed": str(t.seed),
        }
        parser["constraints"] = {
            "hard_scope": c.hard_scope,
            "n1": _num(c.n1_coeff),
            "n2": _num(c.n2_coeff),
            "placement": c.placement,
            "init": c.init.variant,
            "n1_step": c.n1_step,
        }
        d = self.distill_or_default
        parser["distill"] = {
            "enabled": "true" if self.distill is not None else "false",
            "temperature": _num(d.temperature),
            "teacher_epochs": str(d.teacher_train.epochs),
            "student_epochs": str(d.student_train.epochs),
            "gradient_scale": d.gradient_scale,
        }
        parser["attack"] = {
            "max_iterations": str(self.attack.max_iterations),
            "require_negative_gradient": "true" if self.attack.require_negative_gradient else "false",
            "precision": self.attack.precision,
        }
        if self.max_samples is not None:
            parser["attack"]["max_samples"] = str(self.max_samples)
        parser["grid"] = {
            "n1_values": _join(self.grid.n1_values),
            "n2_values": _join(self.grid.n2_values),
            "seeds": _join(self.grid.seeds),
            "workers": str(self.workers),
            "temperatures": _join(self.temperatures),
            "malware_ratios": _join(self.malware_ratios),
        }
        parser["output"] = {"directory": self.output_directory}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _num(v):
    return repr(float(v))


def _join(values):
    return ",".join(str(v) if isinstance(v, int) else _num(v) for v in values)


class _Reader:
    """型付きでキーを読む"""

    def __init__(self, parser):
        self.parser = parser

    def _raw(self, section, key):
        if not self.parser.has_section(section) or not self.parser.has_option(section, key):
            return None
        return self.parser.get(section, key).strip()

    def _convert(self, section, key, fn, default):
        raw = self._raw(section, key)
        if raw is None:
            return default
        try:
            return fn(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from e

    def text(self, section, key, default=None):
        return self._convert(section, key, str, default)

    def integer(self, section, key, default=None):
        return self._convert(section, key, int, default)

    def real(self, section, key, default=None):
        return self._convert(section, key, float, default)

    def flag(self, section, key, default=None):
        def parse(raw):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError("expected a boolean")

        return self._convert(section, key, parse, default)

    def reals(self, section, key, default=None):
        return self._convert(section, key, lambda r: tuple(float(v) for v in r.split(",")), default)

    def integers(self, section, key, default=None):
        return self._convert(section, key, lambda r: tuple(int(v) for v in r.split(",")), default)

    def has(self, section, key):
        return self._raw(section, key) is not None


def _check_keys(parser):
    for section in parser.sections():
        if section not in KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser.options(section):
            if key not in KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")


def from_parser(parser, base_dir="."):
    """パース済みINIから ExperimentConfig を構築（値の検証を含む）"""
    _check_keys(parser)
    r = _Reader(parser)
    try:
        source = r.text("dataset", "source", SYNTHETIC)
        if source not in (SYNTHETIC, FILES):
            raise ConfigError(f"[dataset] source must be {SYNTHETIC} or {FILES}, got {source!r}")
        synth = dataset.SynthSpec(
            n_features=r.integer("dataset", "n_features", DatasetDefaults.N_FEATURES),
            manifest_fraction=r.real("dataset", "manifest_fraction", DatasetDefaults.MANIFEST_FRACTION),
            n_samples=r.integer("dataset", "n_samples", DatasetDefaults.N_SAMPLES),
            malware_fraction=r.real("dataset", "malware_fraction", DatasetDefaults.MALWARE_FRACTION),
            mean_density=r.real("dataset", "mean_density", DatasetDefaults.MEAN_DENSITY),
            n_rules=r.integer("dataset", "n_rules", DatasetDefaults.N_RULES),
            seed=r.integer("dataset", "seed", DatasetDefaults.SEED),
        )
        data_path = feature_space_path = None
        if source == SYNTHETIC:
            synth.validate()
            for key in ("data_path", "feature_space_path"):
                if r.has("dataset", key):
                    raise ConfigError(f"[dataset] {key} conflicts with source = {SYNTHETIC}")
        else:
            data_path = r.text("dataset", "data_path")
            feature_space_path = r.text("dataset", "feature_space_path")
            if data_path is None or feature_space_path is None:
                raise ConfigError("[dataset] source = files needs data_path and feature_space_path")
            data_path = os.path.join(base_dir, data_path)
            feature_space_path = os.path.join(base_dir, feature_space_path)
            for p in (data_path, feature_space_path):
                if not os.path.exists(p):
                    raise ConfigError(f"[dataset] referenced path does not exist: {p}")

        head = network.HeadKind(
            r.text("network", "head", NetworkDefaults.HEAD),
            r.real("network", "temperature", NetworkDefaults.TEMPERATURE),
        )
        arch = network.Architecture(r.integers("network", "hidden", NetworkDefaults.HIDDEN), head)
        if not arch.hidden or any(h <= 0 for h in arch.hidden):
            raise ConfigError("[network] hidden must list positive widths")

        train_seed = r.integer("training", "seed", TrainingDefaults.SEED)
        constraint = constraints.ConstraintConfig(
            hard_scope=r.text("constraints", "hard_scope", constraints.NONE),
            n1_coeff=r.real("constraints", "n1", 0.0),
            n2_coeff=r.real("constraints", "n2", 0.0),
            placement=r.text("constraints", "placement", constraints.WEIGHTS),
            init=network.InitMode(r.text("constraints", "init", NetworkDefaults.INIT), train_seed),
            n1_step=r.text("constraints", "n1_step", constraints.PROXIMAL),
        )
        default_epochs = TrainingDefaults.CONSTRAINED_EPOCHS if constraint.hard_nonneg else TrainingDefaults.EPOCHS
        train = training.TrainConfig(
            epochs=r.integer("training", "epochs", default_epochs),
            batch_size=r.integer("training", "batch_size", TrainingDefaults.BATCH_SIZE),
            malware_ratio=r.real("training", "malware_ratio", TrainingDefaults.MALWARE_RATIO),
            learning_rate=r.real("training", "learning_rate", TrainingDefaults.LEARNING_RATE),
            momentum=r.real("training", "momentum", TrainingDefaults.MOMENTUM),
            dropout_rate=r.real("training", "dropout_rate", TrainingDefaults.DROPOUT_RATE),
            constraint=constraint,
            seed=train_seed,
        )

        distill = None
        if r.flag("distill", "enabled", False):
            distill = training.DistillConfig(
                temperature=r.real("distill", "temperature", TrainingDefaults.DISTILL_TEMPERATURE),
                teacher_train=replace(train, epochs=r.integer("distill", "teacher_epochs", train.epochs)),
                student_train=replace(train, epochs=r.integer("distill", "student_epochs", train.epochs)),
                gradient_scale=r.text("distill", "gradient_scale", TrainingDefaults.DISTILL_GRADIENT_SCALE),
            )

        attack_cfg = AttackConfig(
            max_iterations=r.integer("attack", "max_iterations", AttackDefaults.MAX_ITERATIONS),
            require_negative_gradient=r.flag(
                "attack", "require_negative_gradient", AttackDefaults.REQUIRE_NEGATIVE_GRADIENT
            ),
            precision=r.text("attack", "precision", AttackDefaults.PRECISION),
        )
        max_samples = r.integer("attack", "max_samples")
        if max_samples is not None and max_samples < 1:
            raise ConfigError(f"[attack] max_samples must be at least 1, got {max_samples}")

        grid = evaluation.GridSpec(
            n1_values=r.reals("grid", "n1_values", GridDefaults.AXIS),
            n2_values=r.reals("grid", "n2_values", GridDefaults.AXIS),
            base_train=train,
            seeds=r.integers("grid", "seeds", GridDefaults.SEEDS),
        )
        workers = r.integer("grid", "workers", GridDefaults.WORKERS)
        if workers < 1:
            raise ConfigError(f"[grid] workers must be at least 1, got {workers}")

        return ExperimentConfig(
            source=source,
            synth=synth,
            data_path=data_path,
            feature_space_path=feature_space_path,
            test_fraction=r.real("dataset", "test_fraction", DatasetDefaults.TEST_FRACTION),
            split_seed=r.integer("dataset", "split_seed", DatasetDefaults.SPLIT_SEED),
            arch=arch,
            train=train,
            distill=distill,
            attack=attack_cfg,
            max_samples=max_samples,
            grid=grid,
            workers=workers,
            temperatures=r.reals("grid", "temperatures", GridDefaults.TEMPERATURES),
            malware_ratios=r.reals("grid", "malware_ratios", GridDefaults.MALWARE_RATIOS),
            output_directory=r.text("output", "directory", "out"),
        )
    except ConfigError:
        raise
    except MonotoneGuardError as e:
        # 値の検証エラーは設定エラーとして報告
        raise ConfigError(str(e)) from e


def parse_experiment_config(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e.message}") from e
    return from_parser(parser, base_dir)


def load_experiment_config(path=None, seed=None):
    """設定ファイルを読み込み（path=None なら既定値）、seed で上書き"""
    if path is None:
        cfg = from_parser(configparser.ConfigParser(interpolation=None))
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        cfg = parse_experiment_config(text, os.path.dirname(os.path.abspath(path)))
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        cfg = cfg.with_seed(seed)
    return cfg


def load_corpus(cfg):
    """設定に従ってデータセットを用意（合成またはファイル）"""
    if cfg.source == SYNTHETIC:
        return dataset.generate_synthetic(cfg.synth)
    return dataset.load_dataset(cfg.data_path, cfg.feature_space_path)


def load_split(cfg):
    """データセットを用意して (train, test) に分割"""
    return dataset.split(load_corpus(cfg), cfg.test_fraction, cfg.split_seed)
