class MonotoneGuardError(Exception):
    """全エラーの基底クラス"""

    @property
    def kind(self):
        """CLIのエラー行に出す種別名（snake_case）"""
        name = type(self).__name__
        out = []
        for i, ch in enumerate(name):
            if ch.isupper() and i > 0:
                out.append("_")
            out.append(ch.lower())
        return "".join(out)


class ParameterError(MonotoneGuardError, ValueError):
    """引数や事前条件の違反"""


class ConstructionError(MonotoneGuardError, ValueError):
    """レイヤー次元が連結しない"""


class FormatError(MonotoneGuardError):
    """ファイル形式の違反（行番号付き）"""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}:"
        super().__init__(f"{where} {message}" if where else message)


class SplitError(MonotoneGuardError):
    """層化分割でどちらかの側にラベルが欠ける"""


class TrainingError(MonotoneGuardError):
    """学習の発散（非有限な目的関数）"""

    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"epoch {epoch} step {step}: {message}")


class ConfigError(MonotoneGuardError):
    """実験設定ファイルの問題"""


class UsageError(MonotoneGuardError):
    """コマンドライン引数の誤り"""
