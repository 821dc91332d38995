import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace

import attack
import constraints
import dataset
import evaluation
import experiment
import network
import training
from config import AttackDefaults, DatasetDefaults, GridDefaults, TrainingDefaults
from errors import ConfigError, MonotoneGuardError, ParameterError, UsageError

logger = logging.getLogger(__name__)

# 終了コード
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

RESOLVED_CONFIG_FILE = "resolved_config.ini"


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class Pipeline:
    """サブコマンドの実行（出力は一時ディレクトリに書き、成功時に配置）"""

    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = args.out or cfg.output_directory
        self.progress = not args.quiet and logging.getLogger().isEnabledFor(logging.INFO)
        self.staging = None
        self._train_test = None

    # 出力の段階的配置

    def __enter__(self):
        # 出力先は成功するまで作らない
        self.staging = tempfile.mkdtemp(prefix="monotone-guard-")
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.write_text(RESOLVED_CONFIG_FILE, self.cfg.to_ini())
                os.makedirs(self.out, exist_ok=True)
                for name in sorted(os.listdir(self.staging)):
                    shutil.move(os.path.join(self.staging, name), os.path.join(self.out, name))
        finally:
            shutil.rmtree(self.staging, ignore_errors=True)
        return False

    def path(self, name):
        return os.path.join(self.staging, name)

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    # 入力

    def _explicit_dataset(self):
        if self.args.data is None:
            return None
        space_path = self.args.feature_space
        if space_path is None:
            space_path = os.path.join(os.path.dirname(self.args.data), DatasetDefaults.FEATURE_SPACE_FILE)
        return dataset.load_dataset(self.args.data, space_path)

    def split(self):
        if self._train_test is None:
            self._train_test = experiment.load_split(self.cfg)
            train, test = self._train_test
            logger.info("split: %d train, %d test", len(train), len(test))
        return self._train_test

    def train_set(self):
        d = self._explicit_dataset()
        return self.split()[0] if d is None else d

    def test_set(self):
        d = self._explicit_dataset()
        return self.split()[1] if d is None else d

    def model(self, path):
        if path is None:
            raise UsageError("this command needs --model")
        return network.load_model(path)

    def attack_targets(self, test):
        return evaluation.attack_pool(test, self.cfg.max_samples)

    # サブコマンド

    def cmd_gen_data(self):
        d = experiment.load_corpus(self.cfg)
        train, test = dataset.split(d, self.cfg.test_fraction, self.cfg.split_seed)
        dataset.save_feature_space(d.space, self.path(DatasetDefaults.FEATURE_SPACE_FILE))
        dataset.save(d, self.path(DatasetDefaults.DATA_FILE))
        dataset.save(train, self.path(DatasetDefaults.TRAIN_FILE))
        dataset.save(test, self.path(DatasetDefaults.TEST_FILE))
        n_mal, n_ben = d.counts()
        print(f"gen-data: {n_mal} malware, {n_ben} benign, density {d.mean_density():.2f}")

    def cmd_train(self):
        m, log = training.train(self.train_set(), self.cfg.arch, self.cfg.train, progress=self.progress)
        network.save_model(m, self.path(TrainingDefaults.MODEL_FILE))
        self.write_text(TrainingDefaults.LOG_FILE, log.to_text())
        last = log.records[-1].to_line() if log.records else "no epochs"
        print(f"train: {last}")

    def cmd_distill(self):
        cfg = self.cfg.distill_or_default
        arch = self.cfg.arch
        if not arch.head.is_softmax:
            raise ParameterError("distillation needs head = softmax_pair")
        result = training.train_distilled(self.train_set(), arch, cfg, progress=self.progress)
        network.save_model(result.teacher, self.path("teacher.txt"))
        network.save_model(result.student, self.path("student.txt"))
        self.write_text("teacher_log.txt", result.teacher_log.to_text())
        self.write_text("student_log.txt", result.student_log.to_text())
        print(f"distill: teacher and student trained at T={cfg.temperature:g}")

    def cmd_attack(self):
        m = self.model(self.args.model)
        test = self.test_set()
        metrics = evaluation.evaluate(m, test)
        rate = attack.misclassification_rate(
            m, self.attack_targets(test), test.space, self.cfg.attack, progress=self.progress
        )
        metrics = metrics.with_mr(rate.rate)
        self.write_text(AttackDefaults.REPORT_FILE, attack.format_report(rate.results))
        self.write_text(AttackDefaults.METRICS_FILE, metrics.to_text())
        print(f"attack: mr {rate.rate:.6f} ({rate.numerator} / {rate.denominator})")

    def cmd_eval(self):
        m = self.model(self.args.model)
        metrics = evaluation.evaluate(m, self.test_set())
        self.write_text(AttackDefaults.METRICS_FILE, metrics.to_text())
        print(f"eval: accuracy {metrics.accuracy:.6f} fnr {metrics.fnr:.6f} fpr {metrics.fpr:.6f}")

    def cmd_grid(self):
        train, test = self.split()
        report = evaluation.grid_search(
            train, test, self.cfg.arch, self.cfg.grid, self.cfg.attack,
            workers=self.cfg.workers, max_samples=self.cfg.max_samples, progress=self.progress,
        )
        evaluation.write_heatmaps(report, self.staging, prefix="grid")
        print(f"grid: {len(report.cells)} runs, {len(report.failures())} failed")

    def cmd_distill_grid(self):
        train, test = self.split()
        report = evaluation.distillation_grid(
            train, test, self.cfg.arch, self.cfg.temperatures, self.cfg.malware_ratios,
            self.cfg.distill_or_default, self.cfg.attack, self.cfg.grid.seeds,
            workers=self.cfg.workers, max_samples=self.cfg.max_samples, progress=self.progress,
        )
        evaluation.write_heatmaps(report, self.staging, prefix="grid_distill")
        print(f"distill-grid: {len(report.cells)} runs, {len(report.failures())} failed")

    def cmd_certify(self):
        m = self.model(self.args.model)
        test = self.test_set()
        scope = self.args.scope or self.cfg.train.constraint.hard_scope
        if scope == constraints.NONE:
            scope = constraints.ALL_WEIGHTS
        report = evaluation.certify_monotone(
            m, test.space, self.args.trials, rng=self.cfg.train.seed, scope=scope, samples=test.samples
        )
        self.write_text(GridDefaults.CERTIFICATE_FILE, report.to_text())
        print("certify: " + ", ".join(report.to_text().splitlines()[:2]))

    def cmd_transfer(self):
        if self.args.source is None or self.args.target is None:
            raise UsageError("transfer needs --source and --target")
        source = network.load_model(self.args.source)
        target = network.load_model(self.args.target)
        test = self.test_set()
        rate = attack.transfer_rate(
            source, target, self.attack_targets(test), test.space, self.cfg.attack, progress=self.progress
        )
        self.write_text(
            AttackDefaults.TRANSFER_FILE,
            f"transfer {rate.rate:.6f}\nnumerator {rate.numerator}\ndenominator {rate.denominator}\n",
        )
        print(f"transfer: {rate.rate:.6f} ({rate.numerator} / {rate.denominator})")

    def cmd_table(self):
        """手法ごとに学習・評価・攻撃して table.csv を作成"""
        train, test = self.split()
        cfg = self.cfg
        targets = self.attack_targets(test)
        softmax = cfg.arch.with_head(network.HeadKind(network.SOFTMAX_PAIR, 1.0))
        sigmoid = cfg.arch.with_head(network.HeadKind(network.SIGMOID_SINGLE, 1.0))
        base = cfg.train.constraint

        def with_constraint(epochs=cfg.train.epochs, **kw):
            constraint = constraints.ConstraintConfig(init=base.init, n1_step=base.n1_step, **kw)
            return replace(cfg.train, epochs=epochs, constraint=constraint)

        def run(name, m, train_cfg):
            network.save_model(m, self.path(f"model_{name}.txt"))
            metrics = evaluation.evaluate(m, test)
            rate = attack.misclassification_rate(m, targets, test.space, cfg.attack, progress=self.progress)
            rows.append(evaluation.TableRow(name, train_cfg.malware_ratio, train_cfg.epochs, metrics.with_mr(rate.rate)))

        rows = []
        plain = with_constraint()
        unhardened, _ = training.train(train, softmax, plain, progress=self.progress)
        run("unhardened", unhardened, plain)

        distill_cfg = cfg.distill_or_default
        student = training.train_distilled(train, softmax, distill_cfg, progress=self.progress).student
        run(f"distillation_t{distill_cfg.temperature:g}", student, distill_cfg.student_train)

        # 制約付きモデルはシグモイドヘッド（単調性が厳密に保証される）
        long = TrainingDefaults.CONSTRAINED_EPOCHS
        hard_cfg = with_constraint(epochs=long, hard_scope=constraints.ALL_WEIGHTS)
        hard, _ = training.train(train, sigmoid, hard_cfg, progress=self.progress)
        run("hard_restricted", hard, hard_cfg)

        manifest_cfg = with_constraint(epochs=long, hard_scope=constraints.MANIFEST_MONOTONE)
        manifest, _ = training.train(train, sigmoid, manifest_cfg, progress=self.progress)
        run("manifest_restricted", manifest, manifest_cfg)

        n1_cfg = with_constraint(epochs=long, n1_coeff=0.67)
        regularized, _ = training.train(train, sigmoid, n1_cfg, progress=self.progress)
        run("n1_regularized", regularized, n1_cfg)

        fallback = evaluation.evaluate_fallback(hard, unhardened, test)
        fallback_rate = evaluation.fallback_misclassification_rate(
            hard, unhardened, targets, test.space, cfg.attack, progress=self.progress
        )
        rows.append(evaluation.TableRow("fallback", plain.malware_ratio, plain.epochs, fallback.with_mr(fallback_rate.rate)))

        df = evaluation.results_table(rows)
        evaluation.write_table(df, self.path(GridDefaults.TABLE_FILE))
        for row in rows:
            print(f"table: {row.variant} mr {row.metrics.mr:.6f} fnr {row.metrics.fnr:.6f} fpr {row.metrics.fpr:.6f}")


COMMANDS = {
    "gen-data": (Pipeline.cmd_gen_data, "合成データセットと特徴空間を書き出す"),
    "train": (Pipeline.cmd_train, "モデルを学習"),
    "distill": (Pipeline.cmd_distill, "防御的蒸留（教師と生徒）"),
    "attack": (Pipeline.cmd_attack, "攻撃して誤分類率を計算"),
    "eval": (Pipeline.cmd_eval, "FPR / FNR / 正解率"),
    "grid": (Pipeline.cmd_grid, "N1/N2 グリッドサーチ"),
    "certify": (Pipeline.cmd_certify, "単調性の証明"),
    "transfer": (Pipeline.cmd_transfer, "代理モデルからの転移率"),
    "table": (Pipeline.cmd_table, "全手法のまとめ表"),
    "distill-grid": (Pipeline.cmd_distill_grid, "蒸留温度 × マルウェア比率のグリッド"),
}


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}")
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {value}")
    return value


def build_parser():
    parser = _ArgumentParser(prog="monotone-guard", description="非負重み制約によるマルウェア分類器の防御実験")
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="実験設定ファイル（INI）")
    common.add_argument("--out", help="出力ディレクトリ（[output] directory を上書き）")
    common.add_argument("--seed", type=_seed, help="学習・データ生成シードを上書き")
    common.add_argument("--data", help="データセットファイル（省略時は設定から生成して分割）")
    common.add_argument("--feature-space", help="特徴空間ファイル")
    common.add_argument("--model", help="モデルファイル")
    common.add_argument("--source", help="転移元モデル")
    common.add_argument("--target", help="転移先モデル")
    common.add_argument("--scope", choices=[constraints.ALL_WEIGHTS, constraints.MANIFEST_MONOTONE],
                        help="certify の対象範囲")
    common.add_argument("--trials", type=int, default=GridDefaults.CERTIFY_TRIALS, help="certify の試行回数")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="進捗バーを表示しない")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.trials < 0:
        raise UsageError(f"--trials must be non-negative, got {args.trials}")
    cfg = experiment.load_experiment_config(args.config, args.seed)
    fn, _ = COMMANDS[args.command]
    with Pipeline(args, cfg) as pipeline:
        fn(pipeline)
    logger.info("%s: outputs in %s", args.command, pipeline.out)


def main(argv=None):
    """コマンドラインのエントリーポイント（終了コードを返す）"""
    try:
        run(argv)
    except (UsageError, ConfigError, ParameterError) as e:
        print(f"error {e.kind} {_one_line(e)}", file=sys.stderr)
        return EXIT_USAGE
    except MonotoneGuardError as e:
        print(f"error {e.kind} {_one_line(e)}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error os_error {_one_line(e)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _one_line(e):
    return " ".join(str(e).split())


if __name__ == "__main__":
    sys.exit(main())
