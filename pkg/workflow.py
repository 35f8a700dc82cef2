"""
命令流程：synth -> train -> register -> evaluate，另有 verify 与 densitycheck。

每个 run_* 函数接收解析完成的 RunConfig，把结果写到 <out>/<命令名>/ 下，
并在同一目录写出 resolved_config.txt。
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from cdl.features import build_training_batch, feature_dim
from cdl.network import FeatureBatch
from cdl.trainer import CdlModel, TrainResult, fit
from config.run_config import RunConfig, write_resolved_config
from registration.metrics import CdlMetricKind, HistMiMetricKind, MetricKind
from registration.optimizer import RegistrationTrace, register
from registration.transform import AffineParams, warp_mask, warp_mask_matrix
from tools.density_analysis import INVERSE_NOTES, density_grid, taylor_coefficients
from tools.evaluation import CaseResult, build_report, dice, gain_curve, hausdorff_mm, scatter_table
from tools.plots import render_gain_curves, render_scatter
from tools.synthetic import drift_preset, synth_pair
from tools.verify import run_suite
from utils.artifacts import (
    load_model,
    load_trace,
    load_transform,
    read_table,
    save_history,
    save_model,
    save_trace,
    save_transform,
    write_table,
)
from utils.logger import get_logger
from utils.volume_io import (
    BinaryMask,
    EmptyMaskError,
    ImageVolume,
    load_mask,
    load_volume,
    normalize_intensities,
    save_mask,
    save_volume,
    threshold_mask,
)

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["pair", "role", "seed", "preset", "source", "target",
                    "source_mask", "target_mask", "truth", "overlap"]
CASE_COLUMNS = ["case", "method", "initial_dice", "final_dice", "initial_hd_mm", "final_hd_mm",
                "translation_error_mm", "rotation_error_deg", "iterations", "best_cost"]

# 训练对与测试对的体模种子错开，避免两组数据重合
TRAIN_SEED_OFFSET = 10_000


def _command_dir(cfg: RunConfig, name: str) -> Path:
    path = Path(cfg.out) / name
    path.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, path)
    return path


def _ordered_map(fn: Callable, items: Sequence, threads: int, desc: str) -> List:
    """线程池并行，结果顺序与输入一致"""
    if threads <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, disable=not items)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not items))


def _ready(volume: ImageVolume) -> ImageVolume:
    return volume if volume.normalized else normalize_intensities(volume)


# ---------------------------------------------------------------- synth

def run_synth(cfg: RunConfig) -> pd.DataFrame:
    """生成训练用已对齐对与待配准的扰动对，写出体数据、掩膜、真值变换和 manifest.csv"""
    out = _command_dir(cfg, "synth")
    drift = drift_preset(cfg.preset)
    dims = (cfg.dims,) * 3
    spacing = (cfg.spacing,) * 3

    jobs = [(f"train_{i:03d}", "train", cfg.seed + TRAIN_SEED_OFFSET + i) for i in range(cfg.train_pairs)]
    jobs += [(f"pair_{i:03d}", "test", cfg.seed + i) for i in range(cfg.n_pairs)]

    def generate(job: Tuple[str, str, int]) -> Dict:
        name, role, seed = job
        pair = synth_pair(seed, drift, perturb=(role == "test"), dims=dims, spacing=spacing,
                          max_rot_deg=cfg.max_rot_deg, max_trans_mm=cfg.max_trans_mm,
                          noise_sigma=cfg.phantom_noise, protocol=cfg.protocol)
        folder = out / name
        save_volume(pair.source, folder / "source.cdlv")
        save_volume(pair.target, folder / "target.cdlv")
        save_mask(pair.source_mask, folder / "source_mask.cdlm", pair.source.spacing)
        save_mask(pair.target_mask, folder / "target_mask.cdlm", pair.target.spacing)
        note = f"{role} pair, seed {seed}" + (f", {cfg.protocol} perturbation" if role == "test" else "")
        save_transform(pair.mu_true, folder / "truth.xfm", note=note)
        return {
            "pair": name,
            "role": role,
            "seed": seed,
            "preset": cfg.preset,
            "source": f"{name}/source.cdlv",
            "target": f"{name}/target.cdlv",
            "source_mask": f"{name}/source_mask.cdlm",
            "target_mask": f"{name}/target_mask.cdlm",
            "truth": f"{name}/truth.xfm",
            "overlap": pair.overlap,
        }

    rows = _ordered_map(generate, jobs, cfg.threads, "synth")
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    write_table(manifest, out / MANIFEST_NAME)
    logger.info(f"合成数据已生成: {len(jobs)} 对 -> {out / MANIFEST_NAME}")
    return manifest


def _manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.manifest) if cfg.manifest else Path(cfg.out) / "synth" / MANIFEST_NAME


def read_manifest(path: Path, role: Optional[str] = None) -> pd.DataFrame:
    df = read_table(path)
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: manifest lacks columns {missing}")
    if role is not None:
        df = df[df["role"] == role]
    return df.reset_index(drop=True)


# ---------------------------------------------------------------- train

def run_train(cfg: RunConfig) -> TrainResult:
    """在 manifest 中 role=train 的已对齐对上训练 CDL 网络"""
    manifest_path = _manifest_path(cfg)
    rows = read_manifest(manifest_path, role="train")
    if rows.empty:
        raise ValueError(f"{manifest_path}: no aligned training pairs (role=train)")
    base = manifest_path.parent
    pairs = [(_ready(load_volume(base / r["target"])), _ready(load_volume(base / r["source"])))
             for r in rows.to_dict("records")]

    x_target, x_source = build_training_batch(pairs, cfg.train_samples, cfg.seed, cfg.feature_mode)
    batch = FeatureBatch(source=x_source, target=x_target)
    arch = [feature_dim(cfg.feature_mode), cfg.hidden_units, cfg.output_units]
    logger.info(f"开始训练: {len(pairs)} 对, {batch.n} 个样本, 结构 {arch}")

    tcfg = cfg.train_config()
    result = fit(batch, arch, tcfg)

    out = _command_dir(cfg, "train")
    model = CdlModel(
        params=result.params,
        config=tcfg,
        feature_mode=cfg.feature_mode,
        provenance={
            "manifest": manifest_path.name,
            "pairs": " ".join(rows["pair"]),
            "samples": str(batch.n),
            "converged": str(result.converged).lower(),
        },
    )
    save_model(model, out / "model.json")
    save_history(result.history, out / "history.csv")
    return result


# ---------------------------------------------------------------- register

@dataclass
class PairInputs:
    name: str
    source: ImageVolume
    target: ImageVolume
    source_mask: Optional[BinaryMask] = None
    target_mask: Optional[BinaryMask] = None
    truth: Optional[AffineParams] = None


def _metric_kind(cfg: RunConfig, model: Optional[CdlModel], brain_mask: Optional[BinaryMask]) -> MetricKind:
    if cfg.method == "cdl":
        return CdlMetricKind(model=model, n_samples=cfg.reg_samples)
    policy = {"mi": "none", "mi+m": "background", "mi+b": "supplied"}[cfg.method]
    return HistMiMetricKind(bins=cfg.bins, mask=policy, supplied=brain_mask if policy == "supplied" else None)


def _safe_hausdorff(a: BinaryMask, b: BinaryMask, spacing) -> float:
    try:
        return hausdorff_mm(a, b, spacing)
    except EmptyMaskError:
        logger.warning("hausdorff distance undefined for an empty mask, recorded as NaN")
        return float("nan")


def _register_pair(cfg: RunConfig, model: Optional[CdlModel], pair: PairInputs,
                   brain_mask: Optional[BinaryMask], folder: Path) -> Dict:
    dice_fn = None
    if pair.source_mask is not None and pair.target_mask is not None:
        def dice_fn(mu: AffineParams) -> float:
            return dice(warp_mask(pair.source_mask, pair.source.spacing, mu, pair.target), pair.target_mask)

    best_mu, trace = register(
        _metric_kind(cfg, model, brain_mask),
        pair.target,
        pair.source,
        mode=cfg.mode,
        opt=cfg.optimizer_config(),
        seed=cfg.seed,
        dice_fn=dice_fn,
    )

    row = {"case": pair.name, "method": cfg.method, "iterations": len(trace) - 1,
           "best_cost": float(trace.metadata["best_cost"])}
    if pair.truth is not None:
        t_err = float(np.linalg.norm(best_mu.translation - pair.truth.translation))
        r_err = float(np.rad2deg(np.max(np.abs(best_mu.mu[0:3] - pair.truth.mu[0:3]))))
        trace.metadata["translation_error_mm"] = repr(t_err)
        trace.metadata["rotation_error_deg"] = repr(r_err)
        row.update(translation_error_mm=t_err, rotation_error_deg=r_err)
    if dice_fn is not None:
        identity = AffineParams.identity(best_mu.center, cfg.mode)
        initial = warp_mask(pair.source_mask, pair.source.spacing, identity, pair.target)
        final = warp_mask(pair.source_mask, pair.source.spacing, best_mu, pair.target)
        row.update(
            initial_dice=dice(initial, pair.target_mask),
            final_dice=dice(final, pair.target_mask),
            initial_hd_mm=_safe_hausdorff(initial, pair.target_mask, pair.target.spacing),
            final_hd_mm=_safe_hausdorff(final, pair.target_mask, pair.target.spacing),
        )

    save_transform(best_mu, folder / "transform.txt", note=f"{cfg.method} {pair.name}")
    save_trace(trace, folder / "trace.csv")
    return row


def _single_pair(cfg: RunConfig) -> PairInputs:
    """--source/--target 指定的单对；给出 --truth 时以阈值掩膜作为 Dice 参照"""
    target = _ready(load_volume(cfg.target))
    source = _ready(load_volume(cfg.source))
    pair = PairInputs(Path(cfg.source).stem, source, target)
    if cfg.truth:
        pair.truth = load_transform(cfg.truth)
        pair.target_mask = threshold_mask(target)
        pair.source_mask = warp_mask_matrix(pair.target_mask, target.spacing, pair.truth.inverse_matrix(), source)
    return pair


def run_register(cfg: RunConfig) -> pd.DataFrame:
    """
    两种模式：
        --source/--target  单对配准，结果写到 <out>/register/<method>/
        其余情况            对 manifest 中全部 role=test 的对逐一配准，
                            每对写 <out>/register/<method>/<pair>/，并汇总 cases.csv
    """
    model = None
    if cfg.method == "cdl":
        model = load_model(cfg.model or Path(cfg.out) / "train" / "model.json")
    out = _command_dir(cfg, "register") / cfg.method

    if cfg.source or cfg.target:
        if not (cfg.source and cfg.target):
            raise ValueError("single-pair registration needs both --source and --target")
        brain = load_mask(cfg.brain_mask) if cfg.brain_mask else None
        if cfg.method == "mi+b" and brain is None:
            raise ValueError("method mi+b needs --brain-mask")
        row = _register_pair(cfg, model, _single_pair(cfg), brain, out)
        return pd.DataFrame([row], columns=CASE_COLUMNS)

    manifest_path = _manifest_path(cfg)
    rows = read_manifest(manifest_path, role="test")
    base = manifest_path.parent

    def one(rec: Dict) -> Dict:
        pair = PairInputs(
            name=rec["pair"],
            source=_ready(load_volume(base / rec["source"])),
            target=_ready(load_volume(base / rec["target"])),
            source_mask=load_mask(base / rec["source_mask"]),
            target_mask=load_mask(base / rec["target_mask"]),
            truth=load_transform(base / rec["truth"]),
        )
        # mi+b 以目标体模的前景掩膜作为脑掩膜
        return _register_pair(cfg, model, pair, pair.target_mask, out / pair.name)

    cases = pd.DataFrame(_ordered_map(one, rows.to_dict("records"), cfg.threads, f"register {cfg.method}"),
                         columns=CASE_COLUMNS)
    write_table(cases, out / "cases.csv")
    if len(cases):
        logger.info(f"{cfg.method}: mean final Dice {cases['final_dice'].mean():.4f} over {len(cases)} pairs")
    return cases


# ---------------------------------------------------------------- evaluate

def _method_dirs(register_dir: Path) -> List[Path]:
    dirs = sorted(p for p in register_dir.iterdir() if (p / "cases.csv").exists()) if register_dir.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no registration results (*/cases.csv) under {register_dir}")
    return dirs


def run_evaluate(cfg: RunConfig):
    """汇总各方法的 cases.csv 与 trace：报告、均值±标准差、两两秩和检验、增益曲线、散点"""
    register_dir = Path(cfg.out) / "register"
    cases: List[CaseResult] = []
    curves: Dict[str, pd.DataFrame] = {}
    scatters: Dict[str, pd.DataFrame] = {}
    for method_dir in _method_dirs(register_dir):
        df = read_table(method_dir / "cases.csv")
        method = method_dir.name
        for rec in df.to_dict("records"):
            cases.append(CaseResult(
                case=str(rec["case"]),
                method=str(rec["method"]),
                initial_dice=float(rec["initial_dice"]),
                final_dice=float(rec["final_dice"]),
                initial_hd_mm=float(rec["initial_hd_mm"]),
                final_hd_mm=float(rec["final_hd_mm"]),
            ))
        case_ids = [str(c) for c in df["case"]]
        traces: List[RegistrationTrace] = [load_trace(method_dir / c / "trace.csv") for c in case_ids]
        curves[method] = gain_curve(traces)
        scatters[method] = scatter_table(traces, case_ids)

    report = build_report(cases)
    out = _command_dir(cfg, "evaluate")
    write_table(report.cases, out / "report.csv")
    write_table(report.aggregates, out / "aggregates.csv")
    write_table(report.p_values, out / "pvalues.csv")
    (out / "summary.txt").write_text(report.summary_text() + "\n", encoding="utf-8")
    for method in curves:
        write_table(curves[method], out / f"gain_{method}.csv")
        write_table(scatters[method], out / f"scatter_{method}.csv")
    if cfg.svg:
        render_gain_curves(curves, out / "gain.svg")
        render_scatter(scatters, out / "scatter.svg")
    logger.info(f"评估完成: {len(cases)} 个病例, {len(curves)} 种方法 -> {out}")
    return report


# ---------------------------------------------------------------- verify / densitycheck

def run_verify(cfg: RunConfig, quick: bool = False) -> pd.DataFrame:
    out = _command_dir(cfg, "verify")
    df = run_suite(seed=cfg.seed, quick=quick, progress=lambda steps: tqdm(steps, desc="verify"))
    write_table(df, out / "verify.csv")
    return df


def run_densitycheck(cfg: RunConfig, taylor_order: int = 7) -> pd.DataFrame:
    """(μ, σ, 激活) 网格上的密度检查，附带反激活函数的泰勒系数表"""
    out = _command_dir(cfg, "densitycheck")
    grid = density_grid(n_samples=cfg.density_samples, seed=cfg.seed)
    write_table(grid, out / "density.csv")
    taylor = pd.DataFrame({act: taylor_coefficients(act, taylor_order) for act in ("tanh", "sigmoid")})
    taylor.insert(0, "power", np.arange(taylor_order + 1))
    write_table(taylor, out / "taylor.csv")
    (out / "notes.txt").write_text("\n".join(INVERSE_NOTES) + "\n", encoding="utf-8")
    return grid
