"""
静态 SVG 图：Dice 增益曲线与 配准前/后 Dice 散点
"""

from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

# 固定 SVG 内部 id 与元数据，保证同样的数据生成同样的文件
plt.rcParams["svg.hashsalt"] = "cdl"
_SVG_METADATA = {"Date": None, "Creator": None}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)


def render_gain_curves(curves: Dict[str, pd.DataFrame], path) -> None:
    """每种方法一条平均 Dice 增益曲线"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, df in sorted(curves.items()):
        ax.plot(df["k"], df["mean_gain"], label=method)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean Dice gain")
    ax.axhline(0.0, color="grey", linewidth=0.5)
    ax.legend()
    _save(fig, path)


def render_scatter(scatter: Dict[str, pd.DataFrame], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for method, df in sorted(scatter.items()):
        ax.scatter(df["initial_dice"], df["final_dice"], label=method, s=16)
    ax.plot([0, 1], [0, 1], color="grey", linewidth=0.5)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("Dice before registration")
    ax.set_ylabel("Dice after registration")
    ax.legend()
    _save(fig, path)
