# main.py
"""
命令行入口（typer）：

    python main.py [--config F] [--seed N] [--out DIR] [--threads N] <synth|train|register|evaluate|verify|densitycheck> ...

退出码：0 成功；1 训练达到迭代上限；2 配置/参数错误；3 数值失败；4 文件读写错误
"""

from typing import Any, Dict, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

import workflow
from config.run_config import RunConfig, RunConfigError, resolve_config
from registration.metrics import InsufficientOverlapError
from utils.artifacts import ArtifactFormatError
from utils.bspline import SplineSupportError
from utils.logger import get_logger
from utils.volume_io import VolumeFormatError

logger = get_logger(__name__)
console = Console()
app = typer.Typer(help="Communal domain learning registration pipeline", add_completion=False)

EXIT_OK = 0
EXIT_TRAINING_CAPPED = 1
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _exit_code(e: Exception) -> int:
    # 顺序有关：VolumeFormatError 等需先于 ValueError 判断
    if isinstance(e, (ArithmeticError, InsufficientOverlapError, SplineSupportError)):
        return EXIT_NUMERICAL
    if isinstance(e, (OSError, VolumeFormatError, ArtifactFormatError)):
        return EXIT_IO
    if isinstance(e, (RunConfigError, ValidationError, ValueError)):
        return EXIT_INVALID
    raise e


def _resolve(ctx: typer.Context, **overrides: Any) -> RunConfig:
    opts: Dict[str, Any] = dict(ctx.obj or {})
    path = opts.pop("config", None)
    opts.update(overrides)
    return resolve_config(path, opts)


def _run(ctx: typer.Context, fn, **overrides: Any):
    """解析配置并执行命令；领域异常映射为退出码"""
    try:
        cfg = _resolve(ctx, **overrides)
        return fn(cfg)
    except typer.Exit:
        raise
    except Exception as e:
        code = _exit_code(e)
        logger.error(f"{ctx.info_name} 失败: {e}")
        console.print(f"[red]error:[/red] {e}")
        raise typer.Exit(code)


def _print_frame(title: str, df, columns=None) -> None:
    table = Table(title=title)
    columns = list(columns or df.columns)
    for col in columns:
        table.add_column(str(col))
    for rec in df[columns].to_dict("records"):
        table.add_row(*(f"{v:.4g}" if isinstance(v, float) else str(v) for v in rec.values()))
    console.print(table)


@app.callback()
def cli(
        ctx: typer.Context,
        config: Optional[str] = typer.Option(None, "--config", help="key = value 运行配置文件"),
        seed: Optional[int] = typer.Option(None, "--seed"),
        out: Optional[str] = typer.Option(None, "--out", help="输出根目录"),
        threads: Optional[int] = typer.Option(None, "--threads", min=1),
):
    ctx.obj = {"config": config, "seed": seed, "out": out, "threads": threads}


@app.command()
def synth(
        ctx: typer.Context,
        n_pairs: Optional[int] = typer.Option(None, "--n-pairs"),
        n_train_pairs: Optional[int] = typer.Option(None, "--n-train-pairs"),
        preset: Optional[str] = typer.Option(None, "--preset", help="t1-t2 | mr-ct | identity"),
        dims: Optional[int] = typer.Option(None, "--dims"),
        spacing: Optional[float] = typer.Option(None, "--spacing"),
        max_rot_deg: Optional[float] = typer.Option(None, "--max-rot-deg"),
        max_trans_mm: Optional[float] = typer.Option(None, "--max-trans-mm"),
        phantom_noise: Optional[float] = typer.Option(None, "--phantom-noise"),
        protocol: Optional[str] = typer.Option(None, "--protocol", help="rigid | validation（每对只扰动一个旋转参数）"),
):
    """生成合成体模对与 manifest.csv"""
    manifest = _run(ctx, workflow.run_synth, n_pairs=n_pairs, n_train_pairs=n_train_pairs, preset=preset,
                    dims=dims, spacing=spacing, max_rot_deg=max_rot_deg, max_trans_mm=max_trans_mm,
                    phantom_noise=phantom_noise, protocol=protocol)
    console.print(f"{len(manifest)} pairs written")


@app.command()
def train(
        ctx: typer.Context,
        manifest: Optional[str] = typer.Option(None, "--manifest"),
        activation: Optional[str] = typer.Option(None, "--activation"),
        learning_rate: Optional[float] = typer.Option(None, "--learning-rate"),
        alpha: Optional[float] = typer.Option(None, "--alpha"),
        beta: Optional[float] = typer.Option(None, "--beta"),
        decay: Optional[float] = typer.Option(None, "--decay"),
        eps: Optional[float] = typer.Option(None, "--eps"),
        max_iters: Optional[int] = typer.Option(None, "--max-iters"),
        hidden_units: Optional[int] = typer.Option(None, "--hidden-units"),
        output_units: Optional[int] = typer.Option(None, "--output-units"),
        train_samples: Optional[int] = typer.Option(None, "--samples"),
        feature_mode: Optional[str] = typer.Option(None, "--feature-mode"),
        update_rule: Optional[str] = typer.Option(None, "--update-rule"),
        reg_normalization: Optional[str] = typer.Option(None, "--reg-normalization", help="mean | sum"),
        mi_estimator: Optional[str] = typer.Option(None, "--mi-estimator"),
        mi_gradient: Optional[str] = typer.Option(None, "--mi-gradient"),
):
    """在已对齐对上训练 CDL 网络，写出 model.json 与 history.csv"""
    result = _run(ctx, workflow.run_train, manifest=manifest, activation=activation,
                  learning_rate=learning_rate, alpha=alpha, beta=beta, decay=decay, eps=eps,
                  train_max_iters=max_iters, hidden_units=hidden_units, output_units=output_units,
                  train_samples=train_samples, feature_mode=feature_mode, update_rule=update_rule,
                  reg_normalization=reg_normalization,
                  mi_estimator=mi_estimator, mi_gradient=mi_gradient)
    final = result.history[-1]
    console.print(f"cost {result.initial_cost:.6f} -> {final:.6f} after {len(result.history)} iterations")
    if not result.converged:
        console.print("[yellow]iteration cap reached before |ΔC| < eps[/yellow]")
        raise typer.Exit(EXIT_TRAINING_CAPPED)


@app.command()
def register(
        ctx: typer.Context,
        method: Optional[str] = typer.Option(None, "--method", help="cdl | mi | mi+m | mi+b"),
        model: Optional[str] = typer.Option(None, "--model"),
        manifest: Optional[str] = typer.Option(None, "--manifest"),
        source: Optional[str] = typer.Option(None, "--source"),
        target: Optional[str] = typer.Option(None, "--target"),
        truth: Optional[str] = typer.Option(None, "--truth", help="真值变换文件，给出时 trace 记录 Dice"),
        brain_mask: Optional[str] = typer.Option(None, "--brain-mask"),
        mode: Optional[str] = typer.Option(None, "--mode", help="rigid | affine"),
        max_iters: Optional[int] = typer.Option(None, "--max-iters"),
        base_step: Optional[float] = typer.Option(None, "--base-step"),
        step_scale: Optional[float] = typer.Option(None, "--step-scale"),
        stop_tol: Optional[float] = typer.Option(None, "--stop-tol"),
        samples: Optional[int] = typer.Option(None, "--samples"),
        bins: Optional[int] = typer.Option(None, "--bins"),
        resample_each_iter: Optional[bool] = typer.Option(None, "--resample-each-iter/--fixed-samples"),
):
    """配准：单对（--source/--target）或 manifest 中的全部测试对"""
    cases = _run(ctx, workflow.run_register, method=method, model=model, manifest=manifest, source=source,
                 target=target, truth=truth, brain_mask=brain_mask, mode=mode, max_iters=max_iters,
                 base_step=base_step, step_scale=step_scale, stop_tol=stop_tol, reg_samples=samples,
                 bins=bins, resample_each_iter=resample_each_iter)
    if len(cases):
        _print_frame("registration", cases, ["case", "method", "initial_dice", "final_dice", "iterations"])


@app.command()
def evaluate(
        ctx: typer.Context,
        svg: Optional[bool] = typer.Option(None, "--svg/--no-svg", help="同时输出 SVG 图"),
):
    """汇总配准结果：报告、秩和检验、增益曲线与散点数据"""
    report = _run(ctx, workflow.run_evaluate, svg=svg)
    console.print(report.summary_text())


@app.command()
def verify(
        ctx: typer.Context,
        quick: bool = typer.Option(False, "--quick", help="减少随机网络与配准用例数"),
):
    """梯度差分检查、估计量对照与密度分析自检；任何一项失败退出码为 3"""
    df = _run(ctx, lambda cfg: workflow.run_verify(cfg, quick=quick))
    _print_frame("verify", df, ["check", "measured", "tolerance", "passed"])
    if not df["passed"].all():
        raise typer.Exit(EXIT_NUMERICAL)


@app.command()
def densitycheck(
        ctx: typer.Context,
        samples: Optional[int] = typer.Option(None, "--samples"),
):
    """高斯变量经激活函数后的密度与 Gaussianity 网格"""
    grid = _run(ctx, workflow.run_densitycheck, density_samples=samples)
    _print_frame("density", grid, ["mu", "sigma", "act", "skew", "kurtosis", "ks_closed_form", "mass"])


if __name__ == "__main__":
    app()
