"""
合成数据生成：平滑椭球体模 + 强度漂移 + 已知仿射真值的配对体数据
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import expit

from registration.transform import (
    AffineParams,
    resample_matrix,
    volume_center_mm,
    warp_mask_matrix,
)
from utils.bspline import prefilter_bspline
from utils.logger import get_logger
from utils.volume_io import BinaryMask, ImageVolume

logger = get_logger(__name__)

DriftKind = Literal["identity", "gamma", "sigmoid_remap", "piecewise_monotone", "inversion"]
Protocol = Literal["rigid", "validation"]

# 平滑过渡带：ρ ∈ [1-w, 1+w] 内由 1 降到 0，ρ ≥ 1+w 处严格为 0
EDGE_WIDTH = 0.25


class DriftSpecError(ValueError):
    """漂移参数非法（如 piecewise_monotone 的节点不单调）"""
    pass


class Blob(BaseModel):
    """加性椭球：中心与半轴单位 mm，intensity 可为负"""

    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    intensity: float = 1.0

    @model_validator(mode="after")
    def check_radii(self):
        if min(self.radii) <= 0:
            raise ValueError(f"blob radii must be positive, got {self.radii}")
        return self


class PhantomSpec(BaseModel):
    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    blobs: List[Blob] = Field(default_factory=list)
    noise_sigma: float = Field(0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_blobs_inside(self):
        if min(self.dims) < 4 or min(self.spacing) <= 0:
            raise ValueError(f"invalid phantom geometry dims={self.dims} spacing={self.spacing}")
        lo = np.asarray(self.spacing)
        hi = (np.asarray(self.dims) - 2.0) * np.asarray(self.spacing)
        for i, blob in enumerate(self.blobs):
            c = np.asarray(blob.center)
            r = np.asarray(blob.radii) * (1.0 + EDGE_WIDTH)
            if np.any(c - r < lo - 1e-9) or np.any(c + r > hi + 1e-9):
                raise ValueError(f"blob {i} extends outside the interior of the volume")
        return self


class DriftSpec(BaseModel):
    """
    强度漂移：逐体素重映射 → 可选多项式偏置场（乘性）→ 加性高斯噪声 → 截断到 [0,1]。

    kind:
        identity            x
        gamma               x ** gamma
        sigmoid_remap       归一化 sigmoid，(s(x) - s(0)) / (s(1) - s(0))，s = expit(slope·(x - center))
        piecewise_monotone  按 knots 分段线性，必须单调不减
        inversion           1 - x；给定 knots 时按 knots 分段线性（允许非单调）
    """

    kind: DriftKind = "identity"
    gamma: float = Field(1.0, gt=0)
    center: float = 0.5
    slope: float = Field(10.0, gt=0)
    knots: Optional[List[Tuple[float, float]]] = None
    bias_coeffs: Optional[Tuple[float, float, float, float, float, float]] = None
    noise_sigma: float = Field(0.0, ge=0)

    def check(self) -> None:
        if self.kind == "piecewise_monotone" and not self.knots:
            raise DriftSpecError("piecewise_monotone drift needs knots")
        if self.knots:
            xs = np.array([k[0] for k in self.knots])
            ys = np.array([k[1] for k in self.knots])
            if len(xs) < 2 or np.any(np.diff(xs) <= 0) or xs[0] > 0.0 or xs[-1] < 1.0:
                raise DriftSpecError("knot positions must increase strictly and cover [0, 1]")
            if self.kind == "piecewise_monotone" and np.any(np.diff(ys) < 0):
                raise DriftSpecError("piecewise_monotone knots must be non-decreasing")

    def remap(self, x: np.ndarray) -> np.ndarray:
        self.check()
        if self.kind == "gamma":
            return np.power(x, self.gamma)
        if self.kind == "sigmoid_remap":
            s0, s1 = expit(self.slope * (0.0 - self.center)), expit(self.slope * (1.0 - self.center))
            return (expit(self.slope * (x - self.center)) - s0) / (s1 - s0)
        if self.knots:
            xs, ys = zip(*self.knots)
            return np.interp(x, xs, ys)
        if self.kind == "inversion":
            return 1.0 - x
        return np.array(x, dtype=np.float64)


DRIFT_PRESETS = {
    "identity": DriftSpec(kind="identity"),
    # 中段强度部分反转，近似 T1 → T2 的对比度翻转
    "t1-t2": DriftSpec(
        kind="inversion",
        knots=[(0.0, 0.0), (0.2, 0.15), (0.35, 0.85), (0.75, 0.3), (0.9, 0.95), (1.0, 1.0)],
        noise_sigma=0.02,
    ),
    # 软组织范围被 sigmoid 强烈压缩，高亮结构拉开
    "mr-ct": DriftSpec(kind="sigmoid_remap", center=0.6, slope=12.0, noise_sigma=0.01),
}


def drift_preset(name: str) -> DriftSpec:
    try:
        return DRIFT_PRESETS[name].model_copy(deep=True)
    except KeyError:
        raise DriftSpecError(f"unknown drift preset {name!r}, choose from {sorted(DRIFT_PRESETS)}") from None


def _profile(rho: np.ndarray) -> np.ndarray:
    """ρ ≤ 1-w 为 1，ρ ≥ 1+w 为 0，中间 smootherstep 过渡"""
    t = np.clip((1.0 + EDGE_WIDTH - rho) / (2.0 * EDGE_WIDTH), 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def make_phantom(spec: PhantomSpec) -> Tuple[ImageVolume, BinaryMask]:
    """
    生成体模：各椭球平滑轮廓相加 + 高斯噪声，截断到 [0,1]。
    掩膜 = 各椭球 ρ ≤ 1 的并集（Dice / HD 的金标准前景）。
    """
    axes = [np.arange(n) * s for n, s in zip(spec.dims, spec.spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    data = np.zeros(spec.dims)
    mask = np.zeros(spec.dims, dtype=bool)
    for blob in spec.blobs:
        (cx, cy, cz), (rx, ry, rz) = blob.center, blob.radii
        rho = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2)
        data += blob.intensity * _profile(rho)
        mask |= rho <= 1.0
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data += rng.normal(0.0, spec.noise_sigma, size=data.shape)
    volume = ImageVolume(np.clip(data, 0.0, 1.0), spacing=spec.spacing, normalized=True)
    return volume, BinaryMask(mask)


def default_phantom_spec(seed: int = 0, dims=(32, 32, 32), spacing=(2.0, 2.0, 2.0),
                         n_small_blobs: int = 3, noise_sigma: float = 0.0) -> PhantomSpec:
    """头颅状体模：外层椭球 0.3 + 内层椭球 +0.4 + 若干随机小结构"""
    rng = np.random.default_rng(seed)
    center = (np.asarray(dims) - 1.0) / 2.0 * np.asarray(spacing)
    extent = center.min() - spacing[0]
    outer = np.array([0.74, 0.66, 0.58]) * extent / (1.0 + EDGE_WIDTH)
    blobs = [
        Blob(center=tuple(center), radii=tuple(outer), intensity=0.3),
        Blob(center=tuple(center), radii=tuple(outer * 0.5), intensity=0.4),
    ]
    for _ in range(n_small_blobs):
        offset = rng.uniform(-0.3, 0.3, size=3) * outer
        radii = rng.uniform(0.2, 0.35, size=3) * outer.min()
        blobs.append(Blob(center=tuple(center + offset), radii=tuple(radii),
                          intensity=float(rng.uniform(-0.2, 0.3))))
    return PhantomSpec(dims=dims, spacing=spacing, blobs=blobs, noise_sigma=noise_sigma, seed=seed)


def apply_drift(v: ImageVolume, d: DriftSpec, seed: int = 0) -> ImageVolume:
    """逐体素重映射 + 偏置场 + 噪声，结果截断到 [0,1]；几何不变"""
    out = d.remap(np.clip(v.data, 0.0, 1.0))
    if d.bias_coeffs is not None:
        # 体素坐标归一化到 [-1, 1] 后的一次 + 二次多项式
        u = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in v.dims], indexing="ij")
        c = d.bias_coeffs
        bias = 1.0 + sum(c[i] * u[i] + c[3 + i] * u[i] ** 2 for i in range(3))
        out = out * bias
    if d.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, d.noise_sigma, size=out.shape)
    return v.with_data(np.clip(out, 0.0, 1.0), normalized=True, notes=v.notes + (f"drift:{d.kind}",))


@dataclass
class SyntheticPair:
    source: ImageVolume
    target: ImageVolume
    source_mask: BinaryMask
    target_mask: BinaryMask
    mu_true: AffineParams
    overlap: float


def make_pair(spec: PhantomSpec, drift: DriftSpec, mu_true: AffineParams, drift_seed: int = 0) -> SyntheticPair:
    """
    target = 体模；source = drift(体模) 经 T_true⁻¹ 重采样，
    因而 source(T_true(p)) ≈ target(p)，把 source 配准到 target 应恢复 mu_true。
    """
    target, target_mask = make_phantom(spec)
    drifted = apply_drift(target, drift, drift_seed)
    inverse = mu_true.inverse_matrix()
    warped = resample_matrix(prefilter_bspline(drifted), inverse, target)
    source = warped.with_data(np.clip(warped.data, 0.0, 1.0), normalized=True, notes=drifted.notes)
    source_mask = warp_mask_matrix(target_mask, target.spacing, inverse, target)

    total = target_mask.count()
    overlap = 1.0 if total == 0 else source_mask.count() / total
    if overlap < 0.5:
        logger.warning(f"synthetic pair: only {overlap:.0%} of the phantom stays in frame")
    return SyntheticPair(source, target, source_mask, target_mask, mu_true, overlap)


def random_rigid_perturbation(rng: np.random.Generator, center, max_rot_deg: float = 10.0,
                              max_trans_mm: float = 10.0) -> AffineParams:
    rot = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg, size=3))
    trans = rng.uniform(-max_trans_mm, max_trans_mm, size=3)
    mu = np.concatenate([rot, trans, np.ones(3), np.zeros(3)])
    return AffineParams(mu, center, mode="rigid")


def single_rotation_perturbation(rng: np.random.Generator, center, max_rot_deg: float = 10.0) -> AffineParams:
    """随机选一个旋转参数，均匀扰动 ±max_rot_deg"""
    mu = AffineParams.identity(center, mode="rigid").mu.copy()
    mu[rng.integers(0, 3)] = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    return AffineParams(mu, center, mode="rigid")


def perturbation(seed: int, center, protocol: Protocol = "rigid", max_rot_deg: float = 10.0,
                 max_trans_mm: float = 10.0) -> AffineParams:
    """rigid: 六个刚体参数全部随机；validation: 只扰动一个随机选中的旋转参数"""
    rng = np.random.default_rng(seed)
    if protocol == "validation":
        return single_rotation_perturbation(rng, center, max_rot_deg)
    return random_rigid_perturbation(rng, center, max_rot_deg, max_trans_mm)


def synth_pair(seed: int, drift: DriftSpec, perturb: bool, dims=(32, 32, 32), spacing=(2.0, 2.0, 2.0),
               max_rot_deg: float = 10.0, max_trans_mm: float = 10.0, noise_sigma: float = 0.0,
               protocol: Protocol = "rigid") -> SyntheticPair:
    """单个体数据对：perturb=False 给出已对齐（训练用）的对，否则按 protocol 施加随机扰动"""
    spec = default_phantom_spec(seed, dims=dims, spacing=spacing, noise_sigma=noise_sigma)
    center = volume_center_mm(spec)
    if perturb:
        mu = perturbation(seed, center, protocol, max_rot_deg, max_trans_mm)
    else:
        mu = AffineParams.identity(center, mode="rigid")
    return make_pair(spec, drift, mu, drift_seed=seed + 1000)


def validation_protocol(seed: int, drift: DriftSpec, n_pairs: int = 10, max_rot_deg: float = 10.0,
                        dims=(32, 32, 32), spacing=(2.0, 2.0, 2.0)) -> List[SyntheticPair]:
    """与 synth --protocol validation 生成的测试对相同：第 i 对种子为 seed + i，每对只扰动一个旋转参数"""
    return [synth_pair(seed + i, drift, True, dims=dims, spacing=spacing, max_rot_deg=max_rot_deg,
                       protocol="validation")
            for i in range(n_pairs)]
