"""
配准结果评估：Dice、Hausdorff 距离、秩和检验、Dice 增益曲线与汇总报告
"""

from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import List, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from registration.optimizer import RegistrationTrace
from utils.logger import get_logger
from utils.volume_io import BinaryMask, EmptyMaskError, MaskMismatchError

logger = get_logger(__name__)

# 6 邻接结构元
_FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def _check_dims(a: BinaryMask, b: BinaryMask) -> None:
    if a.dims != b.dims:
        raise MaskMismatchError(f"mask dims differ: {a.dims} vs {b.dims}")


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """2|A∩B| / (|A|+|B|)；两个掩膜都为空时按约定返回 1 并记录警告"""
    _check_dims(a, b)
    total = a.count() + b.count()
    if total == 0:
        logger.warning("dice: both masks are empty, returning 1 by convention")
        return 1.0
    return 2.0 * float(np.logical_and(a.bits, b.bits).sum()) / total


def boundary_voxels(mask: BinaryMask) -> np.ndarray:
    """6 邻接意义下的表面体素坐标 (n, 3)：属于掩膜且至少一个面邻居不属于掩膜"""
    eroded = ndimage.binary_erosion(mask.bits, structure=_FACE_CONNECTIVITY, border_value=0)
    return np.argwhere(mask.bits & ~eroded)


def hausdorff_mm(a: BinaryMask, b: BinaryMask, spacing=(1.0, 1.0, 1.0)) -> float:
    """两个表面体素集合之间的对称 Hausdorff 距离（经典 max-min，单位 mm）"""
    _check_dims(a, b)
    if a.count() == 0 or b.count() == 0:
        raise EmptyMaskError("hausdorff distance needs two non-empty masks")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = boundary_voxels(a) * scale
    pb = boundary_voxels(b) * scale
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(max(d_ab.max(), d_ba.max()))


def ranksum_p(x: Sequence[float], y: Sequence[float]) -> float:
    """
    双侧 Wilcoxon 秩和检验 p 值（正态近似，含结校正与连续性校正）。

    两组合并后全部相等时返回 1 并记录警告。
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3 or len(y) < 3:
        raise ValueError(f"rank-sum test needs at least 3 values per sample, got {len(x)} and {len(y)}")
    pooled = np.concatenate([x, y])
    if np.all(pooled == pooled[0]):
        logger.warning("ranksum_p: all values tie, returning p = 1")
        return 1.0
    res = stats.mannwhitneyu(x, y, use_continuity=True, alternative="two-sided", method="asymptotic")
    return float(min(1.0, res.pvalue))


# ---------------------------------------------------------------- 增益曲线

def _dice_series(trace: RegistrationTrace) -> np.ndarray:
    series = trace.dice
    if len(series) == 0 or np.any(np.isnan(series)):
        raise ValueError("gain curve needs traces annotated with Dice on every row")
    return series


def gain_curve(traces: Sequence[RegistrationTrace]) -> pd.DataFrame:
    """
    逐迭代的平均 Dice 增益（Dice_k - Dice_0）。
    迭代次数不同的 trace 用各自最后一个 Dice 向后补齐。
    """
    if not traces:
        return pd.DataFrame({"k": [], "mean_gain": [], "mean_dice": [], "n_cases": []})
    series = [_dice_series(t) for t in traces]
    length = max(len(s) for s in series)
    padded = np.stack([np.concatenate([s, np.full(length - len(s), s[-1])]) for s in series])
    gains = padded - padded[:, :1]
    return pd.DataFrame({
        "k": np.arange(length),
        "mean_gain": gains.mean(axis=0),
        "mean_dice": padded.mean(axis=0),
        "n_cases": len(series),
    })


def scatter_table(traces: Sequence[RegistrationTrace], case_ids: Sequence[str]) -> pd.DataFrame:
    """每个病例的 (配准前 Dice, 配准后 Dice)"""
    rows = []
    for case, trace in zip(case_ids, traces):
        s = _dice_series(trace)
        rows.append({"case": case, "initial_dice": float(s[0]), "final_dice": float(s[-1])})
    return pd.DataFrame(rows, columns=["case", "initial_dice", "final_dice"])


# ---------------------------------------------------------------- 报告

@dataclass
class CaseResult:
    case: str
    method: str
    initial_dice: float
    final_dice: float
    initial_hd_mm: float
    final_hd_mm: float


@dataclass
class EvalReport:
    cases: pd.DataFrame
    aggregates: pd.DataFrame
    p_values: pd.DataFrame
    notes: List[str] = field(default_factory=list)

    def summary_text(self) -> str:
        """表格式文本块：方法 × Dice/HD 的 mean±sd，再列出两两 p 值"""
        lines = [f"{'method':<10}{'n':>4}  {'Dice initial':>16}  {'Dice final':>16}  {'HD final (mm)':>18}"]
        for rec in self.aggregates.to_dict("records"):
            lines.append(
                f"{rec['method']:<10}{int(rec['n']):>4}  "
                f"{rec['initial_dice_mean']:>7.3f}±{rec['initial_dice_sd']:<8.3f}  "
                f"{rec['final_dice_mean']:>7.3f}±{rec['final_dice_sd']:<8.3f}  "
                f"{rec['final_hd_mm_mean']:>9.2f}±{rec['final_hd_mm_sd']:<8.2f}"
            )
        if len(self.p_values):
            lines.append("")
            lines.append("rank-sum p-values (final Dice / final HD)")
            for rec in self.p_values.to_dict("records"):
                lines.append(f"  {rec['method_a']} vs {rec['method_b']}: "
                             f"p_dice={rec['p_dice']:.4g}  p_hd={rec['p_hd']:.4g}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def _ranksum_finite(x: pd.Series, y: pd.Series, label: str, notes: List[str]) -> float:
    """HD 可能为 NaN（空掩膜），剔除后不足 3 个则不做检验"""
    x, y = x.dropna(), y.dropna()
    if min(len(x), len(y)) < 3:
        notes.append(f"{label}: fewer than 3 finite values, rank-sum test skipped")
        return float("nan")
    return ranksum_p(x, y)


def build_report(cases: Sequence[CaseResult]) -> EvalReport:
    df = pd.DataFrame([asdict(c) for c in cases],
                      columns=["case", "method", "initial_dice", "final_dice", "initial_hd_mm", "final_hd_mm"])
    metrics = ["initial_dice", "final_dice", "initial_hd_mm", "final_hd_mm"]
    agg_rows = []
    notes: List[str] = []
    for method, group in df.groupby("method", sort=True):
        row = {"method": method, "n": len(group)}
        for m in metrics:
            row[f"{m}_mean"] = float(group[m].mean())
            row[f"{m}_sd"] = float(group[m].std(ddof=1)) if len(group) > 1 else 0.0
        agg_rows.append(row)
    aggregates = pd.DataFrame(agg_rows)

    p_rows = []
    methods = sorted(df["method"].unique()) if len(df) else []
    for a, b in combinations(methods, 2):
        da, db = df[df["method"] == a], df[df["method"] == b]
        if min(len(da), len(db)) < 3:
            notes.append(f"{a} vs {b}: fewer than 3 cases, rank-sum test skipped")
            continue
        p_rows.append({
            "method_a": a,
            "method_b": b,
            "p_dice": ranksum_p(da["final_dice"], db["final_dice"]),
            "p_hd": _ranksum_finite(da["final_hd_mm"], db["final_hd_mm"], f"{a} vs {b} HD", notes),
        })
    p_values = pd.DataFrame(p_rows, columns=["method_a", "method_b", "p_dice", "p_hd"])
    return EvalReport(cases=df, aggregates=aggregates, p_values=p_values, notes=notes)
