import logging
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

from config.config import Config

LOG_PATH = Path(Config.LOG_PATH)

# 日志格式
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_BASE_FILE = LOG_PATH / "cdl.log"


def _file_handler() -> logging.Handler:
    """按天轮转的文件处理器，保留 30 天，轮转后缀如 cdl.log.2025-11-16"""
    LOG_PATH.mkdir(parents=True, exist_ok=True)
    handler = TimedRotatingFileHandler(
        filename=LOG_BASE_FILE,
        when="midnight",
        interval=1,
        backupCount=30,
        encoding="utf-8"
    )
    handler.suffix = "%Y-%m-%d"
    handler.setLevel(logging.DEBUG)
    return handler


def get_logger(name: str = "cdl") -> logging.Logger:
    """
    获取一个配置好的 logger 实例。

    控制台输出走 stderr（stdout 留给命令结果表格），级别由 CDL_LOG_LEVEL 控制；
    CDL_LOG_TO_FILE=false 时不写日志文件。

    参数:
        name (str): logger 的名称，通常传入 __name__ 以标识模块来源。
    """
    logger = logging.getLogger(name)

    # 已有 handler（包括 pytest 等在根 logger 上挂的）时不再重复添加
    if logger.hasHandlers():
        return logger

    logger.setLevel(logging.DEBUG)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(Config.LOG_LEVEL)
    handlers = [console_handler]
    if Config.LOG_TO_FILE:
        handlers.append(_file_handler())

    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return logger


if __name__ == "__main__":
    logger = get_logger(__name__)
    logger.info("CDL 工具链启动中...")
