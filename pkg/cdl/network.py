"""
CDL 网络：全连接前向传播、相关形式互信息、MMD 分布差异、训练代价及其全部解析梯度。

约定：批数据按行存放样本，第 m 层 h^(m) 形状为 (N, p^(m))，
z^(m) = h^(m-1) @ W^(m).T + b^(m)，h^(m) = φ(z^(m))。源域与目标域两个分支共享同一组参数。
梯度均为代价 C 对参数的偏导（C 越大越好，训练时沿梯度上升）。
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import expit

from config.config import Config
from utils.logger import get_logger

logger = get_logger(__name__)

Activation = Literal["sigmoid", "tanh"]


class NetworkShapeError(ValueError):
    """网络层维度不连贯，或输入维度与网络不匹配"""
    pass


class NonFiniteActivationError(ArithmeticError):
    """前向传播出现 NaN / Inf"""
    pass


class DegenerateBatchError(ArithmeticError):
    """激活值为常数（σ = 0），相关系数无定义"""
    pass


class TrainConfig(BaseModel):
    """CDL 训练参数，默认值（λ=0.2, α=0.1, β=10, sigmoid）"""

    alpha: float = Field(Config.CDL_ALPHA, ge=0, description="MMD 项权重 α")
    beta: float = Field(Config.CDL_BETA, ge=0, description="参数正则项权重 β")
    learning_rate: float = Field(Config.CDL_LEARNING_RATE, gt=0, description="学习率 λ")
    decay: float = Field(Config.CDL_DECAY, gt=0, le=1, description="每轮学习率衰减系数")
    eps: float = Field(Config.CDL_EPS, ge=0, description="收敛阈值 ε：|C_k - C_{k-1}| < ε 时停止")
    max_iters: int = Field(Config.CDL_MAX_ITERS, ge=1, description="最大迭代次数 K")
    rng_seed: int = 0
    init_scale: Optional[float] = Field(None, gt=0, description="均匀初始化幅度，缺省为 1/sqrt(fan_in)")
    activation: Activation = Config.CDL_ACTIVATION
    mi_estimator: Literal["pearson", "literal"] = "pearson"
    mi_gradient: Literal["exact", "frozen_sigma"] = "exact"
    update_rule: Literal["proximal", "explicit"] = "proximal"
    reg_normalization: Literal["mean", "sum"] = Field(
        Config.CDL_REG_NORMALIZATION, description="正则项取参数平方和（sum）或按参数个数平均（mean）"
    )


@dataclass
class NetworkParams:
    """每层的权重矩阵 W^(m) (p^(m) × p^(m-1)) 与偏置 b^(m)，以及激活函数类型"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: Activation = "sigmoid"

    def __post_init__(self):
        if not self.weights:
            raise NetworkShapeError("network needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise NetworkShapeError("weights and biases must have the same number of layers")
        if self.activation not in ("sigmoid", "tanh"):
            raise NetworkShapeError(f"unknown activation {self.activation!r}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for m, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise NetworkShapeError(f"layer {m}: W {w.shape} and b {b.shape} do not agree")
            if m > 1 and w.shape[1] != self.weights[m - 2].shape[0]:
                raise NetworkShapeError(
                    f"layer {m}: expects {w.shape[1]} inputs but layer {m - 1} has {self.weights[m - 2].shape[0]} units"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NetworkShapeError(f"layer {m}: non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [int(w.shape[0]) for w in self.weights]

    @property
    def n_params(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def squared_norm(self) -> float:
        """Σ_m (‖W^(m)‖_F² + ‖b^(m)‖₂²)"""
        return float(sum(np.sum(w * w) + np.sum(b * b) for w, b in zip(self.weights, self.biases)))

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


@dataclass
class FeatureBatch:
    """成对的源域/目标域特征矩阵 (N × d)，第 i 行互相配对"""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.source = np.atleast_2d(np.asarray(self.source, dtype=np.float64))
        self.target = np.atleast_2d(np.asarray(self.target, dtype=np.float64))
        if self.source.shape != self.target.shape:
            raise NetworkShapeError(f"source {self.source.shape} and target {self.target.shape} differ in shape")
        if not (np.all(np.isfinite(self.source)) and np.all(np.isfinite(self.target))):
            raise ValueError("feature batch contains non-finite values")

    @property
    def n(self) -> int:
        return int(self.source.shape[0])

    @property
    def d(self) -> int:
        return int(self.source.shape[1])


@dataclass
class ForwardCache:
    """
    前向传播缓存。列表下标即层号：h[0] 为输入，z[0] 为 None。
    pooled_mean / pooled_std 为把第 m 层 N×p 个激活值合并后的均值与标准差。
    """

    z_s: List[Optional[np.ndarray]]
    z_t: List[Optional[np.ndarray]]
    h_s: List[np.ndarray]
    h_t: List[np.ndarray]
    activation: Activation
    pooled_mean_s: List[float] = field(default_factory=list)
    pooled_mean_t: List[float] = field(default_factory=list)
    pooled_std_s: List[float] = field(default_factory=list)
    pooled_std_t: List[float] = field(default_factory=list)

    @property
    def top(self) -> int:
        return len(self.h_s) - 1

    @property
    def n(self) -> int:
        return int(self.h_s[0].shape[0])


@dataclass
class Gradients:
    """
    C 对参数的梯度。dW / db 与 params.weights 同序；
    反向传播缓冲 L_t^(m), L_s^(m) 以层号为下标（0 位置为 None）；input_t / input_s 为 C 对两个分支输入特征的梯度。
    """

    dW: List[np.ndarray]
    db: List[np.ndarray]
    L_t: List[Optional[np.ndarray]]
    L_s: List[Optional[np.ndarray]]
    input_t: np.ndarray
    input_s: np.ndarray


def activate(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind == "sigmoid":
        return expit(z)
    return np.tanh(z)


def activation_slope(h: np.ndarray, kind: Activation) -> np.ndarray:
    """φ'(z)，用已算好的 h = φ(z) 表示"""
    if kind == "sigmoid":
        return h * (1.0 - h)
    return 1.0 - h * h


def forward(params: NetworkParams, batch: FeatureBatch) -> ForwardCache:
    """两个分支同时做前向传播：h^(m) = φ(W^(m) h^(m-1) + b^(m))"""
    if batch.d != params.input_dim:
        raise NetworkShapeError(f"batch has d={batch.d} features, network expects {params.input_dim}")

    cache = ForwardCache(z_s=[None], z_t=[None], h_s=[batch.source], h_t=[batch.target],
                         activation=params.activation)
    for branch_h, branch_z in ((cache.h_s, cache.z_s), (cache.h_t, cache.z_t)):
        for m, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
            z = branch_h[m - 1] @ w.T + b
            h = activate(z, params.activation)
            if not np.all(np.isfinite(h)) or not np.all(np.isfinite(z)):
                raise NonFiniteActivationError(f"non-finite activation at layer {m}")
            branch_z.append(z)
            branch_h.append(h)

    for h_s, h_t in zip(cache.h_s, cache.h_t):
        cache.pooled_mean_s.append(float(h_s.mean()))
        cache.pooled_mean_t.append(float(h_t.mean()))
        cache.pooled_std_s.append(float(h_s.std()))
        cache.pooled_std_t.append(float(h_t.std()))
    return cache


def _pooled_correlation(cache: ForwardCache, layer: int, estimator: str = "pearson") -> float:
    a = cache.h_t[layer].ravel()
    b = cache.h_s[layer].ravel()
    sa, sb = cache.pooled_std_t[layer], cache.pooled_std_s[layer]
    if not (sa > 0.0 and sb > 0.0):
        raise DegenerateBatchError(f"layer {layer}: constant activations (sigma_t={sa:.3g}, sigma_s={sb:.3g})")
    ma, mb = cache.pooled_mean_t[layer], cache.pooled_mean_s[layer]
    if estimator == "literal":
        # 原始一步式：Σ h_t h_s / (N σ_t σ_s) 再减去均值乘积项
        r = float(np.dot(a, b)) / (a.size * sa * sb) - ma * mb / (sa * sb)
    else:
        r = float(np.dot(a - ma, b - mb)) / (a.size * sa * sb)
    return float(np.clip(r, -1.0, 1.0))


def mutual_information(cache: ForwardCache, layer: Optional[int] = None, estimator: str = "pearson") -> float:
    """相关形式互信息 I = -½(1 - r)，r 为第 layer 层合并激活值的 Pearson 相关系数，取值 [-1, 0]"""
    layer = cache.top if layer is None else layer
    r = _pooled_correlation(cache, layer, estimator)
    return -0.5 * (1.0 - r)


def mmd(cache: ForwardCache, layer: Optional[int] = None) -> float:
    """线性核 MMD：‖(1/N) Σ_i (h_ti - h_si)‖₂²"""
    layer = cache.top if layer is None else layer
    delta = cache.h_t[layer].mean(axis=0) - cache.h_s[layer].mean(axis=0)
    return float(np.dot(delta, delta))


def regularizer_weight(params: NetworkParams, cfg: TrainConfig) -> float:
    """
    正则项的实际系数。

    sum:  β，即 β·Σ(‖W‖_F² + ‖b‖₂²)；β=10, λ=0.2 时每步把参数压缩到 1/5，几轮后网络退化为常数映射
    mean: β / 参数个数（默认）
    """
    if cfg.reg_normalization == "sum":
        return cfg.beta
    return cfg.beta / params.n_params


def cost(params: NetworkParams, cache: ForwardCache, cfg: TrainConfig) -> float:
    """C = I(h_t; h_s) - α·D(h_t, h_s) - β'·Σ(‖W‖_F² + ‖b‖₂²)，在顶层 M 上计算，β' 见 regularizer_weight"""
    mi = mutual_information(cache, estimator=cfg.mi_estimator)
    return mi - cfg.alpha * mmd(cache) - regularizer_weight(params, cfg) * params.squared_norm()


def mi_seeds(cache: ForwardCache, cfg: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """∂I/∂h_t^(M) 与 ∂I/∂h_s^(M)"""
    top = cache.top
    a, b = cache.h_t[top], cache.h_s[top]
    _pooled_correlation(cache, top)  # 退化检查
    sa, sb = cache.pooled_std_t[top], cache.pooled_std_s[top]
    da = a - cache.pooled_mean_t[top]
    db = b - cache.pooled_mean_s[top]
    n = a.size
    if cfg.mi_gradient == "frozen_sigma":
        return 0.5 * db / (n * sa * sb), 0.5 * da / (n * sa * sb)
    r = float(np.sum(da * db)) / (n * sa * sb)
    grad_a = (db / (sa * sb) - r * da / (sa * sa)) / n
    grad_b = (da / (sa * sb) - r * db / (sb * sb)) / n
    return 0.5 * grad_a, 0.5 * grad_b


def mmd_seeds(cache: ForwardCache) -> Tuple[np.ndarray, np.ndarray]:
    """∂D/∂h_t^(M) 与 ∂D/∂h_s^(M)"""
    top = cache.top
    n = cache.n
    delta = cache.h_t[top].mean(axis=0) - cache.h_s[top].mean(axis=0)
    grad = np.broadcast_to(2.0 * delta / n, cache.h_t[top].shape)
    return grad.copy(), -grad


def backpropagate(params: NetworkParams, cache: ForwardCache, seed_t: np.ndarray, seed_s: np.ndarray):
    """
    把顶层激活值上的梯度逐层回传。

    L^(m) = G^(m) ⊙ φ'(z^(m))，G^(m-1) = L^(m) W^(m)；
    返回 (dW, db, L_t, L_s, 输入层梯度_t, 输入层梯度_s)，列表按层号索引。
    """
    M = params.n_layers
    dW: List[Optional[np.ndarray]] = [None] * (M + 1)
    db: List[Optional[np.ndarray]] = [None] * (M + 1)
    L_t: List[Optional[np.ndarray]] = [None] * (M + 1)
    L_s: List[Optional[np.ndarray]] = [None] * (M + 1)
    g_t, g_s = seed_t, seed_s
    for m in range(M, 0, -1):
        L_t[m] = g_t * activation_slope(cache.h_t[m], cache.activation)
        L_s[m] = g_s * activation_slope(cache.h_s[m], cache.activation)
        dW[m] = L_t[m].T @ cache.h_t[m - 1] + L_s[m].T @ cache.h_s[m - 1]
        db[m] = L_t[m].sum(axis=0) + L_s[m].sum(axis=0)
        w = params.weights[m - 1]
        g_t = L_t[m] @ w
        g_s = L_s[m] @ w
    return dW, db, L_t, L_s, g_t, g_s


def backward(params: NetworkParams, cache: ForwardCache, cfg: TrainConfig) -> Gradients:
    """∂C/∂W^(m)、∂C/∂b^(m)：互信息项 + (-α) MMD 项 + (-2β') 正则项"""
    mi_t, mi_s = mi_seeds(cache, cfg)
    d_t, d_s = mmd_seeds(cache)
    seed_t = mi_t - cfg.alpha * d_t
    seed_s = mi_s - cfg.alpha * d_s
    dW, db, L_t, L_s, in_t, in_s = backpropagate(params, cache, seed_t, seed_s)

    beta = regularizer_weight(params, cfg)
    grad_w = [dW[m] - 2.0 * beta * params.weights[m - 1] for m in range(1, params.n_layers + 1)]
    grad_b = [db[m] - 2.0 * beta * params.biases[m - 1] for m in range(1, params.n_layers + 1)]
    return Gradients(dW=grad_w, db=grad_b, L_t=L_t, L_s=L_s, input_t=in_t, input_s=in_s)


def input_gradient(
        params: NetworkParams,
        cache: ForwardCache,
        cfg: TrainConfig,
        term: Literal["both", "mi", "mmd"] = "both",
) -> np.ndarray:
    """
    C 对源分支输入特征 x_s 的梯度 (N × d)。

    term="mi" 只回传 ∂I/∂h_s，term="mmd" 只回传 ∂D/∂h_s（不乘 -α），
    term="both" 回传 ∂I/∂h_s - α ∂D/∂h_s。正则项与输入无关。
    """
    mi_t, mi_s = mi_seeds(cache, cfg)
    d_t, d_s = mmd_seeds(cache)
    if term == "mi":
        seed_t, seed_s = mi_t, mi_s
    elif term == "mmd":
        seed_t, seed_s = d_t, d_s
    else:
        seed_t, seed_s = mi_t - cfg.alpha * d_t, mi_s - cfg.alpha * d_s
    *_, g_s = backpropagate(params, cache, seed_t, seed_s)
    return g_s


def init_params(arch: List[int], cfg: TrainConfig) -> NetworkParams:
    """均匀分布 [-s, s] 初始化权重（s 缺省为 1/sqrt(fan_in)），偏置置零"""
    if len(arch) < 2 or min(arch) < 1:
        raise NetworkShapeError(f"architecture needs an input size and at least one layer, got {arch}")
    rng = np.random.default_rng(cfg.rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        scale = cfg.init_scale if cfg.init_scale is not None else 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, cfg.activation)


if __name__ == "__main__":
    cfg = TrainConfig(alpha=0.1, beta=0.01)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, 3))
    batch = FeatureBatch(source=x + 0.1 * rng.normal(size=x.shape), target=x)
    params = init_params([3, 4, 3], cfg)
    cache = forward(params, batch)
    print("MI", mutual_information(cache), "MMD", mmd(cache), "C", cost(params, cache, cfg))
