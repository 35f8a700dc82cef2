"""
12 参数仿射变换

参数顺序 (rx, ry, rz, tx, ty, tz, sx, sy, sz, kxy, kxz, kyz)，角度单位弧度、平移单位 mm。
T_μ(p) = Rz·Ry·Rx·K·S·(p - c) + c + t，K 为上三角剪切矩阵 [[1,kxy,kxz],[0,1,kyz],[0,0,1]]。
所有坐标均为物理坐标（mm），体素坐标 p_vox 对应 p_mm = p_vox ⊙ spacing。
"""

from dataclasses import dataclass, field
from typing import Dict, Literal, Sequence, Tuple

import numpy as np
from scipy import ndimage

from utils.bspline import SplineCoefficients, sample_points
from utils.logger import get_logger
from utils.volume_io import BinaryMask, ImageVolume

logger = get_logger(__name__)

PARAM_NAMES: Tuple[str, ...] = ("rx", "ry", "rz", "tx", "ty", "tz", "sx", "sy", "sz", "kxy", "kxz", "kyz")
COMPOSITION_ORDER = "translate*center*rot_z*rot_y*rot_x*shear*scale*center^-1/v1"
RIGID_PARAMS = slice(0, 6)
IDENTITY_MU = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0], dtype=np.float64)

TransformMode = Literal["rigid", "affine"]


class TransformError(ValueError):
    """变换参数非法（维度、非有限值、非正缩放或刚体模式下含缩放/剪切）"""
    pass


def _rot_x(a: float):
    c, s = np.cos(a), np.sin(a)
    r = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    dr = np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    return r, dr


def _rot_y(a: float):
    c, s = np.cos(a), np.sin(a)
    r = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    dr = np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return r, dr


def _rot_z(a: float):
    c, s = np.cos(a), np.sin(a)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dr = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    return r, dr


@dataclass(frozen=True)
class AffineParams:
    """仿射参数 μ（12 维）+ 旋转/缩放中心（mm）+ 模式"""

    mu: np.ndarray = field(default_factory=lambda: IDENTITY_MU.copy())
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mode: TransformMode = "affine"

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        if mu.shape != (12,):
            raise TransformError(f"affine parameters need 12 entries, got {mu.shape[0]}")
        if not np.all(np.isfinite(mu)):
            raise TransformError("affine parameters must be finite")
        if np.any(mu[6:9] <= 0):
            raise TransformError(f"scales must be positive, got {tuple(mu[6:9])}")
        if self.mode not in ("rigid", "affine"):
            raise TransformError(f"unknown transform mode {self.mode!r}")
        if self.mode == "rigid" and not np.array_equal(mu[6:], IDENTITY_MU[6:]):
            raise TransformError("rigid mode requires unit scales and zero shears")
        center = tuple(float(v) for v in self.center)
        if len(center) != 3:
            raise TransformError(f"center must be a 3-vector, got {self.center}")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "center", center)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0), mode: TransformMode = "affine") -> "AffineParams":
        return cls(IDENTITY_MU.copy(), center, mode)

    @classmethod
    def from_dict(cls, values: Dict[str, float], center=(0.0, 0.0, 0.0), mode: TransformMode = "affine"):
        mu = IDENTITY_MU.copy()
        for i, name in enumerate(PARAM_NAMES):
            if name in values:
                mu[i] = float(values[name])
        return cls(mu, center, mode)

    def as_dict(self) -> Dict[str, float]:
        return {name: float(v) for name, v in zip(PARAM_NAMES, self.mu)}

    def with_mu(self, mu) -> "AffineParams":
        return AffineParams(mu, self.center, self.mode)

    @property
    def rotation(self) -> np.ndarray:
        rx, ry, rz = self.mu[0:3]
        return _rot_z(rz)[0] @ _rot_y(ry)[0] @ _rot_x(rx)[0]

    @property
    def translation(self) -> np.ndarray:
        return self.mu[3:6].copy()

    @property
    def shear(self) -> np.ndarray:
        kxy, kxz, kyz = self.mu[9:12]
        return np.array([[1.0, kxy, kxz], [0.0, 1.0, kyz], [0.0, 0.0, 1.0]])

    def linear(self) -> np.ndarray:
        """3×3 线性部分 A = R·K·S"""
        return self.rotation @ self.shear @ np.diag(self.mu[6:9])

    def matrix(self) -> np.ndarray:
        """4×4 齐次矩阵：x' = A x + (c + t - A c)"""
        a = self.linear()
        c = np.asarray(self.center)
        m = np.eye(4)
        m[:3, :3] = a
        m[:3, 3] = c + self.mu[3:6] - a @ c
        return m

    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix())


def apply_matrix(m: np.ndarray, p) -> np.ndarray:
    """对点 (…, 3) 施加 4×4 齐次矩阵"""
    p = np.asarray(p, dtype=np.float64)
    return p @ m[:3, :3].T + m[:3, 3]


def apply_transform(mu: AffineParams, p) -> np.ndarray:
    """T_μ(p)，p 为单点 (3,) 或点集 (n, 3)，单位 mm"""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(mu.center)
    return (p - c) @ mu.linear().T + c + mu.mu[3:6]


def transform_jacobian(mu: AffineParams, p) -> np.ndarray:
    """
    ∂T_μ(p)/∂μ 的解析形式。单点输入返回 3×12，点集 (n, 3) 返回 (n, 3, 12)。
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    q = np.atleast_2d(p) - np.asarray(mu.center)
    rx, ry, rz = mu.mu[0:3]
    r_x, d_x = _rot_x(rx)
    r_y, d_y = _rot_y(ry)
    r_z, d_z = _rot_z(rz)
    rot = r_z @ r_y @ r_x
    k = mu.shear
    sq = q * mu.mu[6:9]          # S q
    ksq = sq @ k.T               # K S q

    n = q.shape[0]
    jac = np.zeros((n, 3, 12))
    jac[:, :, 0] = ksq @ (r_z @ r_y @ d_x).T
    jac[:, :, 1] = ksq @ (r_z @ d_y @ r_x).T
    jac[:, :, 2] = ksq @ (d_z @ r_y @ r_x).T
    jac[:, :, 3:6] = np.eye(3)
    rk = rot @ k
    for i in range(3):
        jac[:, :, 6 + i] = q[:, i:i + 1] * rk[:, i]
    jac[:, :, 9] = sq[:, 1:2] * rot[:, 0]
    jac[:, :, 10] = sq[:, 2:3] * rot[:, 0]
    jac[:, :, 11] = sq[:, 2:3] * rot[:, 1]
    return jac[0] if single else jac


def grid_points(dims: Sequence[int]) -> np.ndarray:
    """所有体素的整数坐标 (n, 3)，与 data.ravel(order="C") 同序"""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def volume_center_mm(volume) -> Tuple[float, float, float]:
    """体数据几何中心（mm），用作默认旋转中心"""
    return tuple((np.asarray(volume.dims) - 1.0) / 2.0 * np.asarray(volume.spacing))


def resample_matrix(source: SplineCoefficients, m: np.ndarray, grid: ImageVolume) -> ImageVolume:
    """在 grid 的每个体素 p 处取 source(M·p_mm)；越出样条支撑区间的位置置 0"""
    if source.stacked:
        raise ValueError("resample expects a single coefficient grid")
    pts = grid_points(grid.dims)
    mapped = apply_matrix(m, pts * np.asarray(grid.spacing)) / np.asarray(source.spacing)
    values, _, inside = sample_points(source, mapped, policy="zero")
    outside = int((~inside).sum())
    if outside:
        logger.debug(f"resample: {outside}/{len(inside)} voxels outside source support, zero-filled")
    return ImageVolume(values.reshape(grid.dims), spacing=grid.spacing, normalized=grid.normalized)


def resample(source: SplineCoefficients, mu: AffineParams, grid: ImageVolume) -> ImageVolume:
    """输出体素 p 的值 = source 在 T_μ(p) 处的 B 样条插值"""
    return resample_matrix(source, mu.matrix(), grid)


def warp_mask_matrix(mask: BinaryMask, mask_spacing, m: np.ndarray, grid: ImageVolume) -> BinaryMask:
    """最近邻方式把掩膜采样到 grid：输出 p 处取 mask(M·p_mm)，越界为 0"""
    pts = grid_points(grid.dims)
    mapped = apply_matrix(m, pts * np.asarray(grid.spacing)) / np.asarray(mask_spacing, dtype=np.float64)
    bits = ndimage.map_coordinates(mask.bits.astype(np.uint8), mapped.T, order=0, mode="constant", cval=0)
    return BinaryMask(bits.reshape(grid.dims).astype(bool))


def warp_mask(mask: BinaryMask, mask_spacing, mu: AffineParams, grid: ImageVolume) -> BinaryMask:
    return warp_mask_matrix(mask, mask_spacing, mu.matrix(), grid)


if __name__ == "__main__":
    mu = AffineParams.from_dict({"rz": np.pi / 2})
    print(apply_transform(mu, [1.0, 0.0, 0.0]))
    print(transform_jacobian(AffineParams.identity(), [1.0, 0.0, 0.0])[:, 2])
