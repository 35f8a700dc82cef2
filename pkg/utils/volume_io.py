"""
三维标量体数据模块

负责 CDLV1 体数据/掩膜文件的读写、百分位强度归一化与背景阈值掩膜。
内部数组形状为 (nx, ny, nz)，按 [x, y, z] 索引；文件载荷按 x 最快的顺序存放（即 Fortran 序展开）。
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from config.config import Config
from utils.logger import get_logger

logger = get_logger(__name__)

MAGIC = "CDLV1"
VOLUME_DTYPE = "f32le"
MASK_DTYPE = "u8"

PathLike = Union[str, Path]


class VolumeFormatError(Exception):
    """自定义异常：体数据文件格式错误的基类"""
    pass


class MalformedHeaderError(VolumeFormatError):
    """文件头缺失或字段非法"""
    pass


class TruncatedPayloadError(VolumeFormatError):
    """载荷长度与 dims 不符"""
    pass


class NonFiniteVolumeError(VolumeFormatError):
    """体数据中含 NaN / Inf"""
    pass


class MaskMismatchError(ValueError):
    """两个体数据/掩膜的网格尺寸不一致"""
    pass


class EmptyMaskError(ValueError):
    """掩膜为空，无法统计"""
    pass


@dataclass(frozen=True)
class ImageVolume:
    """三维标量强度网格，附带物理体素间距（mm）。构造后不可变。"""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalized: bool = False
    notes: Tuple[str, ...] = ()
    intensity_range: Tuple[float, float] = field(init=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"volume must be a non-empty 3-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteVolumeError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeFormatError(f"spacing must be 3 positive reals, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_range", (float(data.min()), float(data.max())))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray, **changes) -> "ImageVolume":
        """保持几何信息不变，替换强度数组"""
        return replace(self, data=data, **changes)


@dataclass(frozen=True)
class BinaryMask:
    """与体数据同布局的二值掩膜"""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise VolumeFormatError(f"mask must be 3-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)

    def count(self) -> int:
        return int(self.bits.sum())


def _write_header(fh, dims, spacing, dtype: str) -> None:
    lines = [
        MAGIC,
        "dims {} {} {}".format(*dims),
        "spacing {} {} {}".format(*(repr(float(s)) for s in spacing)),
        f"dtype {dtype}",
        "",
    ]
    fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _read_header(raw: bytes, path: PathLike):
    """解析文本头，返回 (dims, spacing, dtype, 载荷起始偏移)"""
    lines = []
    offset = 0
    for _ in range(5):
        end = raw.find(b"\n", offset)
        if end < 0:
            raise MalformedHeaderError(f"{path}: header ended prematurely")
        lines.append(raw[offset:end].decode("ascii", errors="replace").strip())
        offset = end + 1

    magic, dims_line, spacing_line, dtype_line, blank = lines
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}, expected {MAGIC}")
    if blank != "":
        raise MalformedHeaderError(f"{path}: header must end with a blank line")
    try:
        key, *vals = dims_line.split()
        if key != "dims" or len(vals) != 3:
            raise ValueError(dims_line)
        dims = tuple(int(v) for v in vals)
        key, *vals = spacing_line.split()
        if key != "spacing" or len(vals) != 3:
            raise ValueError(spacing_line)
        spacing = tuple(float(v) for v in vals)
        key, dtype = dtype_line.split()
        if key != "dtype":
            raise ValueError(dtype_line)
    except ValueError as e:
        raise MalformedHeaderError(f"{path}: cannot parse header line: {e}") from e

    if min(dims) < 1:
        raise MalformedHeaderError(f"{path}: dims must be positive, got {dims}")
    if min(spacing) <= 0 or not np.all(np.isfinite(spacing)):
        raise MalformedHeaderError(f"{path}: spacing must be positive, got {spacing}")
    return dims, spacing, dtype, offset


def load_volume(path: PathLike) -> ImageVolume:
    """
    读取 CDLV1 体数据文件。

    返回的体数据只记录是否已处于 [0,1] 区间（normalized 标志），不做任何归一化。

    异常:
        MalformedHeaderError / TruncatedPayloadError / NonFiniteVolumeError
    """
    raw = Path(path).read_bytes()
    dims, spacing, dtype, offset = _read_header(raw, path)
    if dtype != VOLUME_DTYPE:
        raise MalformedHeaderError(f"{path}: volume dtype must be {VOLUME_DTYPE}, got {dtype}")

    n_voxels = dims[0] * dims[1] * dims[2]
    payload = raw[offset:]
    if len(payload) != 4 * n_voxels:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload) // 4} voxels, header declares {n_voxels}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteVolumeError(f"{path}: payload contains non-finite values")

    data = flat.reshape(dims, order="F")
    lo, hi = float(data.min()), float(data.max())
    logger.debug(f"loaded {path}: dims={dims} spacing={spacing} range=({lo:.4g}, {hi:.4g})")
    return ImageVolume(data=data, spacing=spacing, normalized=(lo >= 0.0 and hi <= 1.0))


def save_volume(volume: ImageVolume, path: PathLike) -> None:
    """写出 CDLV1 体数据（32 位小端浮点，x 最快）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        _write_header(fh, volume.dims, volume.spacing, VOLUME_DTYPE)
        fh.write(volume.data.ravel(order="F").astype("<f4").tobytes())


def load_mask(path: PathLike) -> BinaryMask:
    raw = Path(path).read_bytes()
    dims, _, dtype, offset = _read_header(raw, path)
    if dtype != MASK_DTYPE:
        raise MalformedHeaderError(f"{path}: mask dtype must be {MASK_DTYPE}, got {dtype}")
    n_voxels = dims[0] * dims[1] * dims[2]
    payload = raw[offset:]
    if len(payload) != n_voxels:
        raise TruncatedPayloadError(f"{path}: payload holds {len(payload)} voxels, header declares {n_voxels}")
    flat = np.frombuffer(payload, dtype=np.uint8)
    if flat.size and flat.max() > 1:
        raise VolumeFormatError(f"{path}: mask values must be 0/1")
    return BinaryMask(bits=flat.reshape(dims, order="F").astype(bool))


def save_mask(mask: BinaryMask, path: PathLike, spacing=(1.0, 1.0, 1.0)) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        _write_header(fh, mask.dims, spacing, MASK_DTYPE)
        fh.write(mask.bits.ravel(order="F").astype(np.uint8).tobytes())


def normalize_intensities(
        volume: ImageVolume,
        lo_pct: float = Config.NORMALIZE_LO_PCT,
        hi_pct: float = Config.NORMALIZE_HI_PCT,
) -> ImageVolume:
    """
    百分位仿射归一化：lo_pct 百分位映射到 0，hi_pct 百分位映射到 1，再截断到 [0,1]。

    百分位跨度为 0（常数图像）时所有体素置 0，并在 notes 中记录 "degenerate-span"。
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got ({lo_pct}, {hi_pct})")

    lo, hi = np.percentile(volume.data, [lo_pct, hi_pct])
    note = f"normalized p{lo_pct:g}-p{hi_pct:g}"
    if hi - lo <= 0.0:
        logger.warning(f"normalize_intensities: zero percentile span ({lo:.6g}), mapping all voxels to 0")
        return volume.with_data(
            np.zeros_like(volume.data), normalized=True, notes=volume.notes + (note, "degenerate-span")
        )

    out = np.clip((volume.data - lo) / (hi - lo), 0.0, 1.0)
    return volume.with_data(out, normalized=True, notes=volume.notes + (note,))


def threshold_mask(volume: ImageVolume, t: float = Config.BACKGROUND_THRESHOLD) -> BinaryMask:
    """背景阈值掩膜：强度 > t 的体素置位"""
    return BinaryMask(bits=volume.data > t)


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    vol = ImageVolume(rng.random((4, 5, 6)) * 100.0, spacing=(1.0, 1.0, 2.0))
    norm = normalize_intensities(vol)
    print(norm.intensity_range, threshold_mask(norm).count(), norm.notes)
