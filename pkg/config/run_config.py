"""
运行配置：扁平 key = value 文本文件 <-> RunConfig

优先级：Config 默认值 < 配置文件 < 命令行显式参数。每条命令都会把解析后的完整配置
写回输出目录（resolved_config.txt），同一份配置 + 种子可重复得到相同结果。
"""

from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from cdl.network import TrainConfig
from config.config import Config
from registration.optimizer import OptimizerConfig
from utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

RESOLVED_CONFIG_NAME = "resolved_config.txt"


class RunConfigError(ValueError):
    """配置文件无法解析，或包含未知键 / 非法取值"""
    pass


class RunConfig(BaseModel):
    """所有命令共用的扁平配置，字段与命令行参数一一对应"""

    model_config = ConfigDict(extra="forbid")

    # 全局
    seed: int = 0
    out: str = Config.OUTPUT_DIR
    threads: int = Field(1, ge=1)

    # synth
    n_pairs: int = Field(10, ge=0, description="待配准的扰动体数据对数")
    n_train_pairs: Optional[int] = Field(None, ge=0, description="训练用已对齐对数，缺省与 n_pairs 相同")
    preset: str = "t1-t2"
    dims: int = Field(32, ge=8)
    spacing: float = Field(2.0, gt=0)
    phantom_noise: float = Field(0.0, ge=0)
    max_rot_deg: float = Field(10.0, ge=0)
    max_trans_mm: float = Field(10.0, ge=0)
    protocol: Literal["rigid", "validation"] = "rigid"

    # train
    manifest: Optional[str] = None
    activation: Literal["sigmoid", "tanh"] = Config.CDL_ACTIVATION
    learning_rate: float = Field(Config.CDL_LEARNING_RATE, gt=0)
    alpha: float = Field(Config.CDL_ALPHA, ge=0)
    beta: float = Field(Config.CDL_BETA, ge=0)
    decay: float = Field(Config.CDL_DECAY, gt=0, le=1)
    eps: float = Field(Config.CDL_EPS, ge=0)
    train_max_iters: int = Field(Config.CDL_MAX_ITERS, ge=1)
    hidden_units: int = Field(Config.CDL_HIDDEN_UNITS, ge=1)
    output_units: int = Field(Config.CDL_OUTPUT_UNITS, ge=1)
    train_samples: int = Field(Config.CDL_TRAIN_SAMPLES, ge=2)
    feature_mode: Literal["local", "intensity"] = "local"
    update_rule: Literal["proximal", "explicit"] = "proximal"
    reg_normalization: Literal["mean", "sum"] = Config.CDL_REG_NORMALIZATION
    mi_estimator: Literal["pearson", "literal"] = "pearson"
    mi_gradient: Literal["exact", "frozen_sigma"] = "exact"

    # register
    method: Literal["cdl", "mi", "mi+m", "mi+b"] = "cdl"
    model: Optional[str] = None
    source: Optional[str] = None
    target: Optional[str] = None
    truth: Optional[str] = None
    brain_mask: Optional[str] = None
    mode: Literal["rigid", "affine"] = "affine"
    max_iters: int = Field(Config.REG_MAX_ITERS, ge=0)
    base_step: float = Field(Config.REG_BASE_STEP, gt=0)
    step_scale: float = Field(Config.REG_STEP_SCALE, gt=0)
    stop_tol: float = Field(Config.REG_STOP_TOL, ge=0)
    reg_samples: int = Field(Config.REG_SAMPLES, ge=1)
    resample_each_iter: bool = False
    bins: int = Field(Config.HIST_BINS, ge=2)

    # evaluate / densitycheck
    svg: bool = False
    density_samples: int = Field(100_000, ge=10_000)

    @property
    def train_pairs(self) -> int:
        return self.n_pairs if self.n_train_pairs is None else self.n_train_pairs

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            beta=self.beta,
            learning_rate=self.learning_rate,
            decay=self.decay,
            eps=self.eps,
            max_iters=self.train_max_iters,
            rng_seed=self.seed,
            activation=self.activation,
            mi_estimator=self.mi_estimator,
            mi_gradient=self.mi_gradient,
            update_rule=self.update_rule,
            reg_normalization=self.reg_normalization,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            max_iters=self.max_iters,
            base_step=self.base_step,
            step_scale=self.step_scale,
            stop_tol=self.stop_tol,
            n_samples=self.reg_samples,
            resample_each_iter=self.resample_each_iter,
        )


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """解析 key = value 行；# 开头为注释，空值表示 None"""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise RunConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise RunConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def resolve_config(path: Optional[PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Config 默认值 < 配置文件 < overrides（值为 None 的覆盖项忽略）"""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            logger.error(f"读取配置文件失败: {path}: {e}")
            raise
        data.update({k: (None if v == "" else v) for k, v in parse_config_text(text, str(path)).items()})
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise RunConfigError(f"invalid run configuration: {e}") from e


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.model_dump().items():
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: RunConfig, directory: PathLike) -> Path:
    path = Path(directory) / RESOLVED_CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg), encoding="utf-8")
    return path
