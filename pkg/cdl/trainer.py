"""
CDL 网络训练（全批量梯度上升）

每轮：前向传播 → 计算互信息与 MMD → 反向传播 → 更新参数 → 学习率 λ ← decay·λ → 计算 C_k，
当 |C_k - C_{k-1}| < ε 或 k ≥ K 时停止。
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from cdl.features import FeatureMode
from cdl.network import (
    FeatureBatch,
    Gradients,
    NetworkParams,
    TrainConfig,
    backward,
    cost,
    forward,
    init_params,
    regularizer_weight,
)
from utils.logger import get_logger

logger = get_logger(__name__)


class TrainingDivergedError(ArithmeticError):
    """训练代价出现非有限值，携带出错的迭代序号与此前的代价历史"""

    def __init__(self, iteration: int, history: List[float], message: str = ""):
        self.iteration = iteration
        self.history = list(history)
        super().__init__(message or f"training diverged at iteration {iteration}")


@dataclass
class CdlModel:
    """训练好的 CDL 模型：网络参数 + 训练配置 + 特征模式 + 数据来源记录"""

    params: NetworkParams
    config: TrainConfig
    feature_mode: FeatureMode = "local"
    provenance: Dict[str, str] = field(default_factory=dict)


@dataclass
class TrainResult:
    params: NetworkParams
    history: List[float]
    converged: bool
    initial_cost: float


def apply_update(params: NetworkParams, grads: Gradients, lr: float, cfg: TrainConfig) -> NetworkParams:
    """
    沿 ∂C/∂θ 上升一步。

    explicit: θ ← θ + λ ∂C/∂θ
    proximal: 正则项隐式处理，θ ← (θ + λ g_data) / (1 + 2λβ')，其中 g_data = ∂C/∂θ + 2β'θ
    """
    beta = regularizer_weight(params, cfg)
    new_w, new_b = [], []
    for w, b, gw, gb in zip(params.weights, params.biases, grads.dW, grads.db):
        if cfg.update_rule == "explicit":
            new_w.append(w + lr * gw)
            new_b.append(b + lr * gb)
        else:
            shrink = 1.0 + 2.0 * lr * beta
            new_w.append((w + lr * (gw + 2.0 * beta * w)) / shrink)
            new_b.append((b + lr * (gb + 2.0 * beta * b)) / shrink)
    return NetworkParams(new_w, new_b, params.activation)


def fit(batch: FeatureBatch, arch: Sequence[int], cfg: TrainConfig) -> TrainResult:
    """训练入口，返回参数、完整代价历史与是否因 |ΔC| < ε 收敛"""
    if batch.n < 2:
        raise ValueError(f"training needs at least 2 pairs, got {batch.n}")
    arch = list(arch)
    if arch[0] != batch.d:
        raise ValueError(f"architecture input size {arch[0]} does not match feature dim {batch.d}")

    params = init_params(arch, cfg)
    cache = forward(params, batch)
    previous = cost(params, cache, cfg)
    initial = previous
    history: List[float] = []
    lr = cfg.learning_rate
    converged = False

    for k in range(1, cfg.max_iters + 1):
        grads = backward(params, cache, cfg)
        try:
            params = apply_update(params, grads, lr, cfg)
            cache = forward(params, batch)
            current = cost(params, cache, cfg)
        except (ArithmeticError, ValueError) as e:
            logger.error(f"CDL training failed at iteration {k}: {e}")
            raise TrainingDivergedError(k, history, f"training diverged at iteration {k}: {e}") from e
        if not np.isfinite(current):
            raise TrainingDivergedError(k, history)
        history.append(current)
        lr *= cfg.decay

        if k % 25 == 0 or k == 1:
            logger.debug(f"iter {k}: C={current:.6f} lr={lr:.4g}")
        if abs(current - previous) < cfg.eps:
            converged = True
            break
        previous = current

    logger.info(
        f"CDL training finished after {len(history)} iterations "
        f"({'converged' if converged else 'iteration cap'}): C {initial:.6f} -> {history[-1]:.6f}"
    )
    return TrainResult(params=params, history=history, converged=converged, initial_cost=initial)


def train(batch: FeatureBatch, arch: Sequence[int], cfg: TrainConfig) -> Tuple[NetworkParams, List[float]]:
    """训练网络，返回 (最终参数, 代价历史)；历史第 k 项为第 k 次更新后的代价"""
    result = fit(batch, arch, cfg)
    return result.params, result.history


if __name__ == "__main__":
    rng = np.random.default_rng(3)
    x = rng.random((500, 3))
    batch = FeatureBatch(source=np.sqrt(x) + 0.01 * rng.normal(size=x.shape), target=x)
    result = fit(batch, [3, 16, 8], TrainConfig(max_iters=50))
    print(result.initial_cost, result.history[-1], result.converged)
