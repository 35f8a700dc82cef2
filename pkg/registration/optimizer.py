"""
规则步长梯度上升优化器

在缩放后的参数空间 ν = μ ⊙ scaling 中沿单位化方向前进：
Δν = a_k · step_scale · ĝ_ν，a_k = a₀ / k。度量越大越好，全程记录最优参数。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from config.config import Config
from registration.metrics import DEFAULT_PARAM_SCALING, MetricKind, build_metric
from registration.transform import PARAM_NAMES, AffineParams, TransformError, TransformMode, volume_center_mm
from utils.logger import get_logger
from utils.volume_io import ImageVolume

logger = get_logger(__name__)

# step 为 a_k；step_len 为缩放空间中实际走过的 ‖Δν‖ = a_k·step_scale
TRACE_COLUMNS = ["k", "cost", "step", "step_len", *PARAM_NAMES, "dice"]


class OptimizerConfig(BaseModel):
    """配准优化器参数"""

    max_iters: int = Field(Config.REG_MAX_ITERS, ge=0, description="最大迭代次数")
    base_step: float = Field(Config.REG_BASE_STEP, gt=0, description="a₀，步长序列 a_k = a₀/k")
    step_scale: float = Field(Config.REG_STEP_SCALE, gt=0, description="单位步长对应的 mm 当量")
    param_scaling: Tuple[float, ...] = DEFAULT_PARAM_SCALING
    stop_tol: float = Field(Config.REG_STOP_TOL, ge=0, description="缩放空间中 ‖Δν‖ 小于该值时停止")
    n_samples: int = Field(Config.REG_SAMPLES, ge=1, description="CDL 度量的样本数")
    resample_each_iter: bool = False

    @field_validator("param_scaling")
    @classmethod
    def check_scaling(cls, v):
        if len(v) != len(PARAM_NAMES) or min(v) <= 0:
            raise ValueError(f"param_scaling needs {len(PARAM_NAMES)} positive entries, got {v}")
        return tuple(float(x) for x in v)


@dataclass
class TraceRow:
    k: int
    cost: float
    step: float
    mu: np.ndarray
    dice: Optional[float] = None
    step_len: float = 0.0


@dataclass
class RegistrationTrace:
    """逐迭代记录：k 从 0 开始严格递增，第 0 行为初始状态"""

    rows: List[TraceRow] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.k <= self.rows[-1].k:
            raise ValueError(f"trace iteration {row.k} does not follow {self.rows[-1].k}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.rows])

    @property
    def dice(self) -> np.ndarray:
        return np.array([np.nan if r.dice is None else r.dice for r in self.rows])

    def to_frame(self) -> pd.DataFrame:
        records = []
        for r in self.rows:
            rec = {"k": r.k, "cost": r.cost, "step": r.step, "step_len": r.step_len}
            rec.update(dict(zip(PARAM_NAMES, (float(v) for v in r.mu))))
            rec["dice"] = np.nan if r.dice is None else r.dice
            records.append(rec)
        return pd.DataFrame(records, columns=TRACE_COLUMNS)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "RegistrationTrace":
        trace = cls()
        for rec in df.to_dict("records"):
            dice = rec.get("dice")
            trace.append(TraceRow(
                k=int(rec["k"]),
                cost=float(rec["cost"]),
                step=float(rec["step"]),
                mu=np.array([float(rec[n]) for n in PARAM_NAMES]),
                dice=None if dice is None or pd.isna(dice) else float(dice),
                step_len=float(rec["step_len"]),
            ))
        return trace


class RegistrationDivergedError(ArithmeticError):
    """代价出现非有限值或参数越界；trace 保留到出错前的全部迭代"""

    def __init__(self, message: str, trace: RegistrationTrace):
        self.trace = trace
        super().__init__(message)


def _step(mu: AffineParams, direction: np.ndarray, a_k: float, opt: OptimizerConfig):
    scaling = np.asarray(opt.param_scaling)
    g = direction / scaling
    if mu.mode == "rigid":
        g[6:] = 0.0
    norm = float(np.linalg.norm(g))
    if norm == 0.0 or not np.isfinite(norm):
        return None, 0.0
    d_nu = a_k * opt.step_scale * g / norm
    return mu.mu + d_nu / scaling, float(np.linalg.norm(d_nu))


def register(
        metric: MetricKind,
        target: ImageVolume,
        source: ImageVolume,
        mode: TransformMode = "affine",
        opt: Optional[OptimizerConfig] = None,
        seed: int = 0,
        center=None,
        dice_fn: Optional[Callable[[AffineParams], float]] = None,
) -> Tuple[AffineParams, RegistrationTrace]:
    """
    把 source 配准到 target：寻找 μ 使 source(T_μ(p)) 与 target(p) 在所选度量下最相似。

    参数:
        metric: CdlMetricKind 或 HistMiMetricKind
        mode: "rigid" 只优化 6 个刚体参数；"affine" 优化全部 12 个
        center: 旋转中心（mm），缺省为目标图像中心
        dice_fn: 可选回调，给定 μ 返回与金标准掩膜的 Dice，写入 trace

    返回:
        (代价最高的 μ, 完整 trace)
    """
    opt = opt or OptimizerConfig()
    center = volume_center_mm(target) if center is None else center
    evaluator = build_metric(metric, target, source, seed, opt.param_scaling)

    mu = AffineParams.identity(center, mode)
    trace = RegistrationTrace()
    trace.metadata["mode"] = mode
    cost, direction = evaluator.value_and_direction(mu)
    if not np.isfinite(cost):
        raise RegistrationDivergedError("initial cost is not finite", trace)
    trace.append(TraceRow(0, cost, 0.0, np.array(mu.mu), dice_fn(mu) if dice_fn else None))
    best_mu, best_cost = mu, cost

    for k in range(1, opt.max_iters + 1):
        a_k = opt.base_step / k
        new_mu, step_len = _step(mu, direction, a_k, opt)
        if new_mu is None:
            logger.info(f"zero search direction at iteration {k}, stopping")
            break
        try:
            mu = mu.with_mu(new_mu)
        except TransformError as e:
            logger.error(f"registration left the valid parameter range at iteration {k}: {e}")
            raise RegistrationDivergedError(f"invalid parameters at iteration {k}: {e}", trace) from e

        if opt.resample_each_iter:
            evaluator.resample(seed + k)
        cost, direction = evaluator.value_and_direction(mu)
        if not np.isfinite(cost):
            raise RegistrationDivergedError(f"non-finite cost at iteration {k}", trace)
        trace.append(TraceRow(k, cost, a_k, np.array(mu.mu), dice_fn(mu) if dice_fn else None, step_len))
        if cost > best_cost:
            best_mu, best_cost = mu, cost
        if step_len < opt.stop_tol:
            break

    trace.metadata["best_cost"] = repr(float(best_cost))
    trace.metadata["iterations"] = str(len(trace) - 1)
    logger.info(
        f"registration ({mode}) finished after {len(trace) - 1} iterations: "
        f"cost {trace.rows[0].cost:.6f} -> best {best_cost:.6f}"
    )
    return best_mu, trace
