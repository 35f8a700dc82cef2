"""
数值自检套件：网络梯度与配准梯度的中心差分检查、互信息 / MMD 的朴素实现对照、密度分析网格。
每项检查给出实测误差与容差，供 verify 命令汇总成 CSV。
"""

from dataclasses import asdict, dataclass
from typing import Callable, List, Tuple

import numpy as np
import pandas as pd

from cdl import network
from cdl.network import FeatureBatch, NetworkParams, TrainConfig
from cdl.trainer import CdlModel
from registration.metrics import DEFAULT_PARAM_SCALING, CdlMetric
from registration.transform import PARAM_NAMES, AffineParams, volume_center_mm
from tools.density_analysis import GaussianSpec, density_mass, gaussianity_check
from tools.synthetic import default_phantom_spec, drift_preset, make_pair, random_rigid_perturbation
from utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class CheckResult:
    check: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""


def _result(name: str, measured: float, tolerance: float, detail: str = "") -> CheckResult:
    passed = bool(np.isfinite(measured) and measured < tolerance)
    if not passed:
        logger.error(f"check {name} failed: {measured:.3g} >= {tolerance:.3g} {detail}")
    return CheckResult(name, float(measured), tolerance, passed, detail)


def entrywise_relative_error(analytic: np.ndarray, numeric: np.ndarray, rel_floor: float = 1e-3) -> Tuple[float, int]:
    """
    逐项比较：|a_i - n_i| / max(|n_i|, rel_floor·max|n|)，返回 (最大误差, 对应下标)。
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    floor = max(rel_floor * float(np.max(np.abs(numeric))), 1e-12)
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
    worst = int(np.argmax(err))
    return float(err[worst]), worst


# ---------------------------------------------------------------- 网络梯度

def network_check_batch(seed: int, n: int = 64, d: int = 3) -> FeatureBatch:
    """目标特征 x，源特征为 x 的偏移缩放加噪声，保证 MMD 项不为零"""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    return FeatureBatch(source=0.8 * x + 0.3 + 0.1 * rng.normal(size=x.shape), target=x)


def network_gradient_error(params: NetworkParams, batch: FeatureBatch, cfg: TrainConfig, h: float = 1e-5) -> float:
    """∂C/∂W、∂C/∂b 解析梯度与中心差分的逐项最大相对误差"""
    grads = network.backward(params, network.forward(params, batch), cfg)

    def cost_at(p: NetworkParams) -> float:
        return network.cost(p, network.forward(p, batch), cfg)

    analytic, numeric, labels = [], [], []
    for group, grad_group in (("weights", grads.dW), ("biases", grads.db)):
        for m, grad in enumerate(grad_group):
            for idx in np.ndindex(grad.shape):
                plus, minus = params.copy(), params.copy()
                getattr(plus, group)[m][idx] += h
                getattr(minus, group)[m][idx] -= h
                numeric.append((cost_at(plus) - cost_at(minus)) / (2.0 * h))
                analytic.append(grad[idx])
                labels.append(f"{group}[{m}]{idx}")
    err, worst = entrywise_relative_error(np.array(analytic), np.array(numeric))
    logger.debug(f"network gradient: worst entry {labels[worst]} error {err:.3g}")
    return err


def check_network_gradients(n_networks: int = 20, arch=(3, 4, 3), seed: int = 0, tol: float = 1e-4) -> CheckResult:
    worst = 0.0
    for i in range(n_networks):
        for activation in ("sigmoid", "tanh"):
            cfg = TrainConfig(alpha=0.5, beta=0.01, rng_seed=seed + i, activation=activation)
            params = network.init_params(list(arch), cfg)
            worst = max(worst, network_gradient_error(params, network_check_batch(seed + i, d=arch[0]), cfg))
    return _result("network_gradient", worst, tol, f"{n_networks} networks {list(arch)}, sigmoid+tanh, per-entry")


# ---------------------------------------------------------------- 估计量对照

def check_mi_oracle(seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """互信息 ≡ -½(1 - Pearson)，Pearson 由 np.corrcoef 在合并激活值上计算"""
    cfg = TrainConfig(rng_seed=seed)
    params = network.init_params([3, 5, 4], cfg)
    cache = network.forward(params, network_check_batch(seed))
    r = np.corrcoef(cache.h_t[-1].ravel(), cache.h_s[-1].ravel())[0, 1]
    oracle = -0.5 * (1.0 - r)
    err = max(abs(network.mutual_information(cache) - oracle),
              abs(network.mutual_information(cache, estimator="literal") - oracle))
    return _result("mi_oracle", err, tol)


def check_mmd_oracle(seed: int = 0, tol: float = 1e-12) -> CheckResult:
    cfg = TrainConfig(rng_seed=seed)
    params = network.init_params([3, 5, 4], cfg)
    cache = network.forward(params, network_check_batch(seed))
    h_t, h_s = cache.h_t[-1], cache.h_s[-1]
    delta = [0.0] * h_t.shape[1]
    for i in range(h_t.shape[0]):
        for j in range(h_t.shape[1]):
            delta[j] += (h_t[i, j] - h_s[i, j]) / h_t.shape[0]
    oracle = sum(v * v for v in delta)
    return _result("mmd_oracle", abs(network.mmd(cache) - oracle), tol)


# ---------------------------------------------------------------- 配准梯度

def registration_gradient_error(case_seed: int, n_samples: int = 400, h: float = 1e-3) -> float:
    """
    随机网络 + 合成体数据对 + 随机仿射参数：search direction 与度量中心差分的相对误差。
    差分步长按参数缩放取 h / scaling_i，误差在缩放空间中逐个参数比较。
    """
    rng = np.random.default_rng(case_seed)
    spec = default_phantom_spec(case_seed, dims=(20, 20, 20))
    center = volume_center_mm(spec)
    truth = random_rigid_perturbation(rng, center, max_rot_deg=5.0, max_trans_mm=3.0)
    pair = make_pair(spec, drift_preset("t1-t2"), truth, drift_seed=case_seed)

    cfg = TrainConfig(alpha=0.1, beta=0.01, rng_seed=case_seed)
    model = CdlModel(network.init_params([3, 6, 4], cfg), cfg, "local")
    metric = CdlMetric.from_volumes(model, pair.target, pair.source, n_samples=n_samples, seed=case_seed)

    mu_vec = AffineParams.identity(center).mu.copy()
    mu_vec[0:3] += rng.uniform(-0.05, 0.05, size=3)
    mu_vec[3:6] += rng.uniform(-2.0, 2.0, size=3)
    mu_vec[6:9] += rng.uniform(-0.05, 0.05, size=3)
    mu_vec[9:12] += rng.uniform(-0.03, 0.03, size=3)
    mu = AffineParams(mu_vec, center)

    scaling = np.asarray(DEFAULT_PARAM_SCALING)
    _, direction = metric.value_and_direction(mu)
    numeric = np.zeros(12)
    for i in range(12):
        step = h / scaling[i]
        plus, minus = mu_vec.copy(), mu_vec.copy()
        plus[i] += step
        minus[i] -= step
        numeric[i] = (metric.value(mu.with_mu(plus)) - metric.value(mu.with_mu(minus))) / (2.0 * step)
    err, worst = entrywise_relative_error(direction / scaling, numeric / scaling)
    logger.debug(f"registration gradient case {case_seed}: worst parameter {PARAM_NAMES[worst]} error {err:.3g}")
    return err


def check_registration_gradients(n_cases: int = 10, seed: int = 0, tol: float = 1e-3) -> CheckResult:
    worst = max(registration_gradient_error(seed + i) for i in range(n_cases))
    return _result("registration_gradient", worst, tol, f"{n_cases} synthetic cases, per-parameter over 12 affine parameters")


# ---------------------------------------------------------------- 密度分析

def check_density(seed: int = 0, n_samples: int = 100_000) -> List[CheckResult]:
    mass_err, ks_worst = 0.0, 0.0
    for act in ("tanh", "sigmoid"):
        for mu in (-1.0, 0.0, 1.0):
            for sigma in (0.1, 0.5, 1.0, 2.0):
                g = GaussianSpec(mu=mu, sigma=sigma)
                mass_err = max(mass_err, abs(density_mass(g, act) - 1.0))
                ks_worst = max(ks_worst, gaussianity_check(g, act, n_samples, seed).ks_closed_form)
    small = gaussianity_check(GaussianSpec(mu=0.0, sigma=0.01), "tanh", n_samples, seed)
    return [
        _result("density_mass", mass_err, 1e-6),
        _result("density_ks_closed_form", ks_worst, 0.01),
        _result("small_sigma_skewness", abs(small.skewness), 0.05),
        _result("small_sigma_excess_kurtosis", abs(small.excess_kurtosis), 0.1),
    ]


def run_suite(seed: int = 0, quick: bool = False, progress: Callable = lambda it: it) -> pd.DataFrame:
    """运行全部检查；quick=True 时减少网络与配准用例数（用于测试）"""
    steps = [
        lambda: [check_network_gradients(n_networks=3 if quick else 20, seed=seed)],
        lambda: [check_mi_oracle(seed), check_mmd_oracle(seed)],
        lambda: [check_registration_gradients(n_cases=2 if quick else 10, seed=seed)],
        lambda: check_density(seed),
    ]
    results: List[CheckResult] = []
    for step in progress(steps):
        results.extend(step())
    df = pd.DataFrame([asdict(r) for r in results])
    logger.info(f"verify: {int(df['passed'].sum())}/{len(df)} checks passed")
    return df
