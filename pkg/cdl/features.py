"""
逐体素特征提取

"local" 模式 d=3：(归一化强度, 3×3×3 邻域均值, 3×3×3 邻域标准差)；"intensity" 模式 d=1 只用强度。
特征先在整幅体数据上计算成特征图；源图像的特征图再做 B 样条预滤波，
这样变换后的任意连续位置都能得到特征值及其空间梯度。
"""

from typing import List, Literal, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config.config import Config
from utils.bspline import SplineCoefficients, prefilter_bspline, sample_points, stack_coefficients
from utils.volume_io import ImageVolume

FeatureMode = Literal["local", "intensity"]


def feature_dim(mode: FeatureMode) -> int:
    return 3 if mode == "local" else 1


def feature_maps(volume: ImageVolume, mode: FeatureMode = "local") -> np.ndarray:
    """返回 (d, nx, ny, nz) 的特征图"""
    data = volume.data
    if mode == "intensity":
        return data[None].copy()
    mean = ndimage.uniform_filter(data, size=3, mode="mirror")
    mean_sq = ndimage.uniform_filter(data * data, size=3, mode="mirror")
    std = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
    return np.stack([data, mean, std])


def prepare_source(volume: ImageVolume, mode: FeatureMode = "local") -> SplineCoefficients:
    """对源图像每个特征图做预滤波，返回堆叠的样条系数 (d, nx, ny, nz)"""
    maps = feature_maps(volume, mode)
    parts = [prefilter_bspline(volume.with_data(fmap)) for fmap in maps]
    return stack_coefficients(*parts)


def draw_sample_points(
        target: ImageVolume,
        n: int,
        seed: int,
        threshold: float = Config.BACKGROUND_THRESHOLD,
        dilation: int = 2,
) -> np.ndarray:
    """
    从目标图像的支撑区域中随机抽取 n 个体素（整数体素坐标，形状 (n, 3)）。

    支撑区域 = 前景 {强度 > threshold} 膨胀 dilation 个体素后、位于 [1, dim-2] 内部的体素；
    候选数不足 n 时全部返回。抽样只依赖 seed。
    """
    region = target.data > threshold
    if dilation > 0 and region.any():
        region = ndimage.binary_dilation(region, iterations=dilation)
    interior = np.zeros_like(region)
    interior[1:-1, 1:-1, 1:-1] = True
    candidates = np.argwhere(region & interior)
    if len(candidates) <= n:
        return candidates.astype(np.float64)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(candidates), size=n, replace=False))
    return candidates[picked].astype(np.float64)


def sample_pairs(
        target_maps: np.ndarray,
        source_coeffs: SplineCoefficients,
        target_points: np.ndarray,
        source_points: np.ndarray,
):
    """
    取成对特征：目标特征直接读网格，源特征在连续坐标 source_points 上做样条插值。

    返回:
        x_t: (n, d) 目标特征
        x_s: (n, d) 源特征
        grad_s: (d, n, 3) 源特征对源体素坐标的梯度
        inside: (n,) 源位置是否在样条支撑区间内
    """
    idx = target_points.astype(np.int64)
    x_t = target_maps[:, idx[:, 0], idx[:, 1], idx[:, 2]].T
    values, grads, inside = sample_points(source_coeffs, source_points, policy="zero")
    return x_t, values.T, grads, inside


def build_training_batch(
        pairs: Sequence[Tuple[ImageVolume, ImageVolume]],
        n_samples: int,
        seed: int,
        mode: FeatureMode = "local",
):
    """
    由若干已对齐的 (目标, 源) 图像对汇总训练特征（T_μ = 恒等）。

    每对抽取 n_samples / len(pairs) 个样本，只保留源位置在支撑区间内的样本。
    返回 (x_target, x_source) 两个 (N, d) 矩阵。
    """
    per_pair = max(1, n_samples // max(1, len(pairs)))
    xs_t: List[np.ndarray] = []
    xs_s: List[np.ndarray] = []
    for i, (target, source) in enumerate(pairs):
        points = draw_sample_points(target, per_pair, seed + i)
        mapped = points * np.asarray(target.spacing) / np.asarray(source.spacing)
        x_t, x_s, _, inside = sample_pairs(feature_maps(target, mode), prepare_source(source, mode), points, mapped)
        xs_t.append(x_t[inside])
        xs_s.append(x_s[inside])
    return np.concatenate(xs_t), np.concatenate(xs_s)
