# データセット設定
class DatasetDefaults:
    # 机上スケール（DREBINの統計を縮小）
    N_FEATURES = 5000
    MANIFEST_FRACTION = 0.55  # 約300k / 545k
    N_SAMPLES = 20000
    MALWARE_FRACTION = 0.08
    MEAN_DENSITY = 48
    N_RULES = 40
    SEED = 1

    TEST_FRACTION = 0.2
    SPLIT_SEED = 0

    # 合成ルールの生成パラメータ
    SECOND_RULE_PROB = 0.5  # マルウェアが2つ目のルールを持つ確率
    DECOY_PROB = 0.2  # 良性サンプルが A∧B∧C を持つ確率
    LONE_INDICATOR_PROB = 0.3  # 良性サンプルが片方の指標だけ持つ確率
    POPULARITY_SHAPE = 0.5  # 背景特徴の出現頻度の偏り（ガンマ分布の形状）

    # ファイル名
    DATA_FILE = "data.txt"
    TRAIN_FILE = "train.txt"
    TEST_FILE = "test.txt"
    FEATURE_SPACE_FILE = "features.txt"


# ネットワーク設定
class NetworkDefaults:
    HIDDEN = (200, 200)
    HEAD = "softmax_pair"
    TEMPERATURE = 1.0
    INIT = "glorot_normal"

    MODEL_MAGIC = "mgmodel"
    MODEL_VERSION = "v1"
    FLOAT_FORMAT = "%.17g"  # 往復で値が一致する桁数


# 学習設定
class TrainingDefaults:
    EPOCHS = 10
    CONSTRAINED_EPOCHS = 30
    BATCH_SIZE = 1000
    MALWARE_RATIO = 0.3
    LEARNING_RATE = 0.1
    MOMENTUM = 0.9
    DROPOUT_RATE = 0.5
    SEED = 1

    DISTILL_TEMPERATURE = 100.0
    DISTILL_GRADIENT_SCALE = "temperature"

    MODEL_FILE = "model.txt"
    LOG_FILE = "train_log.txt"


# 攻撃設定
class AttackDefaults:
    MAX_ITERATIONS = 20
    REQUIRE_NEGATIVE_GRADIENT = True
    PRECISION = "float32"  # 配備時の推論精度

    REPORT_FILE = "attack_report.txt"
    METRICS_FILE = "metrics.txt"
    TRANSFER_FILE = "transfer.txt"


# 評価・グリッドサーチ設定
class GridDefaults:
    AXIS = (0.0, 0.1, 0.22, 0.46, 0.67, 1.0, 2.2)
    SEEDS = (1, 2, 3)
    WORKERS = 1

    TEMPERATURES = (1.0, 10.0, 33.0, 66.0, 100.0)
    MALWARE_RATIOS = (0.3, 0.4, 0.5)

    MONOTONE_TOLERANCE = 1e-9
    CERTIFY_TRIALS = 10000
    CERTIFICATE_FILE = "certificate.txt"
    TABLE_FILE = "table.csv"

    METRICS = ("mr", "fnr", "fpr")
    CSV_DECIMALS = 6
