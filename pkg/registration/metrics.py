"""
配准相似性度量

CdlMetric：用训练好的 CDL 网络把目标/源特征映射到公共子空间，以训练代价 C 作为相似性，
并给出 C 对 12 个仿射参数的解析导数（经 φ'、W、样条空间梯度与 ∂T_μ/∂μ 链式求导）。
HistMiMetric：75 bin 联合直方图互信息基线，支持 none / background / supplied 三种掩膜策略，
方向用中心差分估计。
"""

from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union

import numpy as np

from cdl.features import draw_sample_points, feature_dim, feature_maps, prepare_source, sample_pairs
from cdl.network import FeatureBatch, cost, forward, input_gradient
from cdl.trainer import CdlModel
from config.config import Config
from registration.transform import (
    PARAM_NAMES,
    AffineParams,
    apply_transform,
    resample,
    transform_jacobian,
)
from utils.bspline import SplineCoefficients, prefilter_bspline
from utils.logger import get_logger
from utils.volume_io import BinaryMask, EmptyMaskError, ImageVolume, MaskMismatchError

logger = get_logger(__name__)

MaskPolicy = Literal["none", "background", "supplied"]

DEFAULT_PARAM_SCALING: Tuple[float, ...] = (100.0, 100.0, 100.0, 1.0, 1.0, 1.0,
                                            100.0, 100.0, 100.0, 100.0, 100.0, 100.0)


class InsufficientOverlapError(RuntimeError):
    """变换后落在源图像支撑区间内的样本太少，度量无意义"""

    def __init__(self, n_valid: int, n_required: int):
        self.n_valid = n_valid
        self.n_required = n_required
        super().__init__(f"only {n_valid} samples map inside the source support, need {n_required}")


# ---------------------------------------------------------------- CDL 度量

class CdlMetric:
    """
    固定样本集上的 CDL 度量。样本点在构造时按 seed 从目标支撑区域抽取一次，
    之后每次求值都复用同一组点（resample() 可按新种子重抽）。
    """

    def __init__(
            self,
            model: CdlModel,
            target: ImageVolume,
            source_coeffs: SplineCoefficients,
            n_samples: int = Config.REG_SAMPLES,
            seed: int = 0,
            min_valid_samples: int = 64,
    ):
        d = feature_dim(model.feature_mode)
        if not source_coeffs.stacked or source_coeffs.coeffs.shape[0] != d:
            raise ValueError(f"source coefficients must stack {d} feature grids for mode {model.feature_mode!r}")
        if model.params.input_dim != d:
            raise ValueError(f"model expects {model.params.input_dim} features, feature mode gives {d}")
        self.model = model
        self.target = target
        self.source_coeffs = source_coeffs
        self.n_samples = n_samples
        self.min_valid_samples = min_valid_samples
        self.target_maps = feature_maps(target, model.feature_mode)
        self._source_spacing = np.asarray(source_coeffs.spacing)
        self.resample(seed)

    @classmethod
    def from_volumes(cls, model: CdlModel, target: ImageVolume, source: ImageVolume, **kwargs) -> "CdlMetric":
        return cls(model, target, prepare_source(source, model.feature_mode), **kwargs)

    def resample(self, seed: int) -> None:
        self.seed = seed
        self.points_vox = draw_sample_points(target=self.target, n=self.n_samples, seed=seed)
        self.points_mm = self.points_vox * np.asarray(self.target.spacing)

    def _pairs(self, mu: AffineParams):
        mapped = apply_transform(mu, self.points_mm) / self._source_spacing
        x_t, x_s, grad_s, inside = sample_pairs(self.target_maps, self.source_coeffs, self.points_vox, mapped)
        n_valid = int(inside.sum())
        if n_valid < self.min_valid_samples:
            logger.error(f"CDL metric: {n_valid} valid samples < {self.min_valid_samples}")
            raise InsufficientOverlapError(n_valid, self.min_valid_samples)
        return FeatureBatch(source=x_s[inside], target=x_t[inside]), grad_s[:, inside], inside

    def value(self, mu: AffineParams) -> float:
        """C(μ)：包含与 μ 无关的 β 正则项，与训练代价同值"""
        batch, _, _ = self._pairs(mu)
        cache = forward(self.model.params, batch)
        return cost(self.model.params, cache, self.model.config)

    def direction_terms(self, mu: AffineParams) -> Tuple[float, np.ndarray, np.ndarray]:
        """
        返回 (C, d_mi, d_mmd)：d_mi = ∂I/∂μ，d_mmd = ∂D/∂μ（未乘 α），
        完整搜索方向 d = d_mi - α·d_mmd。
        """
        batch, grad_s, inside = self._pairs(mu)
        params, cfg = self.model.params, self.model.config
        cache = forward(params, batch)
        c = cost(params, cache, cfg)

        # ∂x_s/∂q_mm：样条梯度按源体素间距换算到 mm
        grad_mm = grad_s / self._source_spacing
        jac = transform_jacobian(mu, self.points_mm[inside])
        dx_dmu = np.einsum("kna,nap->nkp", grad_mm, jac)

        g_mi = input_gradient(params, cache, cfg, term="mi")
        g_mmd = input_gradient(params, cache, cfg, term="mmd")
        d_mi = np.einsum("nk,nkp->p", g_mi, dx_dmu)
        d_mmd = np.einsum("nk,nkp->p", g_mmd, dx_dmu)
        return c, d_mi, d_mmd

    def value_and_direction(self, mu: AffineParams) -> Tuple[float, np.ndarray]:
        c, d_mi, d_mmd = self.direction_terms(mu)
        return c, d_mi - self.model.config.alpha * d_mmd


def cdl_metric(
        model: CdlModel,
        target: ImageVolume,
        source_coeffs: SplineCoefficients,
        mu: AffineParams,
        sample_seed: int,
        n_samples: int = Config.REG_SAMPLES,
) -> float:
    return CdlMetric(model, target, source_coeffs, n_samples=n_samples, seed=sample_seed).value(mu)


def search_direction(
        model: CdlModel,
        target: ImageVolume,
        source_coeffs: SplineCoefficients,
        mu: AffineParams,
        sample_seed: int,
        n_samples: int = Config.REG_SAMPLES,
) -> np.ndarray:
    """d_k = ∂C/∂μ（12 维）"""
    metric = CdlMetric(model, target, source_coeffs, n_samples=n_samples, seed=sample_seed)
    return metric.value_and_direction(mu)[1]


# ---------------------------------------------------------------- 直方图互信息

def _mi_mask(target: ImageVolume, moving: ImageVolume, policy: MaskPolicy,
             supplied: Optional[BinaryMask], threshold: float) -> Optional[np.ndarray]:
    if policy == "none":
        return None
    if policy == "background":
        return (target.data > threshold) | (moving.data > threshold)
    if supplied is None:
        raise ValueError("mask policy 'supplied' needs a mask")
    if supplied.dims != target.dims:
        raise MaskMismatchError(f"supplied mask {supplied.dims} does not match volume {target.dims}")
    return supplied.bits


def hist_mi(
        target: ImageVolume,
        moving: ImageVolume,
        bins: int = Config.HIST_BINS,
        mask: MaskPolicy = "none",
        supplied: Optional[BinaryMask] = None,
        threshold: float = Config.BACKGROUND_THRESHOLD,
) -> float:
    """
    联合直方图互信息 I = ΣΣ p_ij ln(p_ij / (p_i p_j))，强度范围固定 [0,1]。

    mask:
        none        全部体素（MI）
        background  任一图像强度 > threshold 的体素（MI+M）
        supplied    使用 supplied 掩膜（MI+B）
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if target.dims != moving.dims:
        raise MaskMismatchError(f"volume dims differ: {target.dims} vs {moving.dims}")
    sel = _mi_mask(target, moving, mask, supplied, threshold)
    a, b = target.data, moving.data
    if sel is not None:
        if not sel.any():
            raise EmptyMaskError(f"mask policy {mask!r} selects no voxels")
        a, b = a[sel], b[sel]

    # 样条重采样会略微越出 [0,1]，截断后再分箱，保证每个体素都计入直方图
    a = np.clip(a, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    p = joint / joint.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(pa, pb)
    return float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))


def histogram_entropy(volume: ImageVolume, bins: int = Config.HIST_BINS) -> float:
    """边缘直方图熵 H = -Σ p_i ln p_i"""
    counts, _ = np.histogram(np.clip(volume.data, 0.0, 1.0).ravel(), bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


class HistMiMetric:
    """直方图互信息基线度量；方向 = 每个参数上的中心差分"""

    def __init__(
            self,
            target: ImageVolume,
            source: ImageVolume,
            bins: int = Config.HIST_BINS,
            mask: MaskPolicy = "none",
            supplied: Optional[BinaryMask] = None,
            fd_step: float = 0.5,
            param_scaling: Tuple[float, ...] = DEFAULT_PARAM_SCALING,
    ):
        if bins < 2:
            raise ValueError(f"bins must be >= 2, got {bins}")
        self.target = target
        self.coeffs = prefilter_bspline(source)
        self.bins = bins
        self.mask = mask
        self.supplied = supplied
        # 每个参数的差分步长，单位与 param_scaling 一致（mm 当量）
        self.fd_steps = fd_step / np.asarray(param_scaling, dtype=np.float64)

    def resample(self, seed: int) -> None:
        """直方图度量使用全部体素，与样本种子无关"""

    def value(self, mu: AffineParams) -> float:
        moving = resample(self.coeffs, mu, self.target)
        return hist_mi(self.target, moving, self.bins, self.mask, self.supplied)

    def value_and_direction(self, mu: AffineParams) -> Tuple[float, np.ndarray]:
        c = self.value(mu)
        direction = np.zeros(len(PARAM_NAMES))
        free = 6 if mu.mode == "rigid" else len(PARAM_NAMES)
        for i, h in enumerate(self.fd_steps[:free]):
            plus = np.array(mu.mu)
            minus = np.array(mu.mu)
            plus[i] += h
            minus[i] -= h
            direction[i] = (self.value(mu.with_mu(plus)) - self.value(mu.with_mu(minus))) / (2.0 * h)
        return c, direction


# ---------------------------------------------------------------- 度量选择

@dataclass(frozen=True)
class CdlMetricKind:
    model: CdlModel
    n_samples: int = Config.REG_SAMPLES
    min_valid_samples: int = 64


@dataclass(frozen=True)
class HistMiMetricKind:
    bins: int = Config.HIST_BINS
    mask: MaskPolicy = "none"
    supplied: Optional[BinaryMask] = None
    fd_step: float = 0.5

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.mask == "supplied" and self.supplied is None:
            raise ValueError("mask policy 'supplied' needs a mask")


MetricKind = Union[CdlMetricKind, HistMiMetricKind]


def build_metric(kind: MetricKind, target: ImageVolume, source: ImageVolume, seed: int,
                 param_scaling: Tuple[float, ...] = DEFAULT_PARAM_SCALING):
    if isinstance(kind, CdlMetricKind):
        return CdlMetric.from_volumes(kind.model, target, source, n_samples=kind.n_samples,
                                      seed=seed, min_valid_samples=kind.min_valid_samples)
    return HistMiMetric(target, source, kind.bins, kind.mask, kind.supplied, kind.fd_step, param_scaling)


def method_label(kind: MetricKind) -> str:
    """报告中的方法名：cdl / mi / mi+m / mi+b"""
    if isinstance(kind, CdlMetricKind):
        return "cdl"
    return {"none": "mi", "background": "mi+m", "supplied": "mi+b"}[kind.mask]
