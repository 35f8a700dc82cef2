import os
from pathlib import Path

from dotenv import load_dotenv

project_path = str(Path(__file__).parent.parent)
env_path = project_path + "/.env"  # 构造绝对路径：load_dotenv 以工作目录为基准，在其他目录运行时相对路径会读不到 .env
load_dotenv(dotenv_path=env_path, override=True)  # 以 .env 文件为准


class Config:
    """统一的配置类，集中管理所有常量（默认值可由环境变量覆盖）"""

    # 日志目录
    LOG_PATH = os.getenv("CDL_LOG_PATH", project_path + "/logs")
    LOG_LEVEL = os.getenv("CDL_LOG_LEVEL", "INFO").upper()
    LOG_TO_FILE = os.getenv("CDL_LOG_TO_FILE", "true").lower() in ("1", "true", "yes")

    # 运行产物默认输出目录
    OUTPUT_DIR = os.getenv("CDL_OUTPUT_DIR", project_path + "/runs")

    # CDL 网络训练（Sigmoid 激活, λ=0.2, α=0.1, β=10）
    CDL_ACTIVATION = os.getenv("CDL_ACTIVATION", "sigmoid")
    CDL_LEARNING_RATE = float(os.getenv("CDL_LEARNING_RATE", "0.2"))
    CDL_ALPHA = float(os.getenv("CDL_ALPHA", "0.1"))
    CDL_BETA = float(os.getenv("CDL_BETA", "10"))
    CDL_DECAY = float(os.getenv("CDL_DECAY", "0.95"))
    CDL_REG_NORMALIZATION = os.getenv("CDL_REG_NORMALIZATION", "mean")
    CDL_EPS = float(os.getenv("CDL_EPS", "1e-6"))
    CDL_MAX_ITERS = int(os.getenv("CDL_MAX_ITERS", "200"))
    CDL_HIDDEN_UNITS = int(os.getenv("CDL_HIDDEN_UNITS", "16"))
    CDL_OUTPUT_UNITS = int(os.getenv("CDL_OUTPUT_UNITS", "8"))
    CDL_TRAIN_SAMPLES = int(os.getenv("CDL_TRAIN_SAMPLES", "20000"))

    # 配准优化器（regular step gradient descent, 最多 500 次迭代, a_k = 0.2/k）
    REG_MAX_ITERS = int(os.getenv("REG_MAX_ITERS", "500"))
    REG_BASE_STEP = float(os.getenv("REG_BASE_STEP", "0.2"))
    REG_STEP_SCALE = float(os.getenv("REG_STEP_SCALE", "20.0"))
    REG_STOP_TOL = float(os.getenv("REG_STOP_TOL", "1e-6"))
    REG_SAMPLES = int(os.getenv("REG_SAMPLES", "5000"))

    # 直方图互信息基线（75 个 bin, 背景阈值 0.01）
    HIST_BINS = int(os.getenv("HIST_BINS", "75"))
    BACKGROUND_THRESHOLD = float(os.getenv("BACKGROUND_THRESHOLD", "0.01"))

    # 强度归一化百分位
    NORMALIZE_LO_PCT = float(os.getenv("NORMALIZE_LO_PCT", "0.5"))
    NORMALIZE_HI_PCT = float(os.getenv("NORMALIZE_HI_PCT", "99.5"))


if __name__ == "__main__":
    print(Config.CDL_LEARNING_RATE, Config.HIST_BINS)
