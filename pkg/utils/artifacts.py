"""
结果文件读写：模型 JSON、变换文本文件、各类 CSV 表
"""

from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import orjson
import pandas as pd

from cdl.network import NetworkParams, TrainConfig
from cdl.trainer import CdlModel
from registration.optimizer import TRACE_COLUMNS, RegistrationTrace
from registration.transform import COMPOSITION_ORDER, PARAM_NAMES, AffineParams
from utils.logger import get_logger

logger = get_logger(__name__)

MODEL_VERSION = 1
TRANSFORM_MAGIC = "CDL-TRANSFORM 1"

PathLike = Union[str, Path]


class ArtifactFormatError(ValueError):
    """结果文件内容不合法"""
    pass


# ---------------------------------------------------------------- 模型

def save_model(model: CdlModel, path: PathLike) -> None:
    """写出模型 JSON：键排序、两空格缩进，浮点数为最短往返表示，同一模型字节级一致"""
    payload = {
        "version": MODEL_VERSION,
        "activation": model.params.activation,
        "dims": model.params.dims,
        "weights": [w.tolist() for w in model.params.weights],
        "biases": [b.tolist() for b in model.params.biases],
        "train_config": model.config.model_dump(),
        "data_provenance": dict(model.provenance),
        "feature_mode": model.feature_mode,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    logger.info(f"模型已保存: {path}")


def load_model(path: PathLike) -> CdlModel:
    try:
        payload = orjson.loads(Path(path).read_bytes())
    except orjson.JSONDecodeError as e:
        raise ArtifactFormatError(f"{path}: not valid JSON: {e}") from e
    if payload.get("version") != MODEL_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported model version {payload.get('version')!r}")
    try:
        params = NetworkParams(
            weights=[np.array(w, dtype=np.float64) for w in payload["weights"]],
            biases=[np.array(b, dtype=np.float64) for b in payload["biases"]],
            activation=payload["activation"],
        )
        config = TrainConfig(**payload["train_config"])
    except (KeyError, ValueError) as e:
        raise ArtifactFormatError(f"{path}: invalid model content: {e}") from e
    if params.dims != list(payload.get("dims", [])):
        raise ArtifactFormatError(f"{path}: dims {payload.get('dims')} disagree with weights {params.dims}")
    return CdlModel(
        params=params,
        config=config,
        feature_mode=payload.get("feature_mode", "local"),
        provenance=dict(payload.get("data_provenance", {})),
    )


# ---------------------------------------------------------------- 变换

def save_transform(mu: AffineParams, path: PathLike, note: str = "") -> None:
    lines = [
        TRANSFORM_MAGIC,
        f"composition {COMPOSITION_ORDER}",
        f"mode {mu.mode}",
        "center {} {} {}".format(*(repr(float(c)) for c in mu.center)),
    ]
    lines += [f"{name} {float(v)!r}" for name, v in zip(PARAM_NAMES, mu.mu)]
    if note:
        lines.append(f"# {note}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def load_transform(path: PathLike) -> AffineParams:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="ascii").splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != TRANSFORM_MAGIC:
        raise ArtifactFormatError(f"{path}: missing {TRANSFORM_MAGIC!r} header")
    fields: Dict[str, List[str]] = {}
    for ln in lines[1:]:
        key, *vals = ln.split()
        fields[key] = vals
    if fields.get("composition", [""])[0] != COMPOSITION_ORDER:
        raise ArtifactFormatError(f"{path}: unknown composition order {fields.get('composition')}")
    missing = [n for n in PARAM_NAMES if n not in fields]
    if missing or "center" not in fields or "mode" not in fields:
        raise ArtifactFormatError(f"{path}: missing fields {missing or ['center/mode']}")
    try:
        values = {n: float(fields[n][0]) for n in PARAM_NAMES}
        center = tuple(float(v) for v in fields["center"])
        return AffineParams.from_dict(values, center=center, mode=fields["mode"][0])
    except (ValueError, IndexError) as e:
        raise ArtifactFormatError(f"{path}: {e}") from e


# ---------------------------------------------------------------- CSV

def write_table(df: pd.DataFrame, path: PathLike) -> None:
    """统一的 CSV 输出：无索引列，NaN 写为空"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, na_rep="", lineterminator="\n")


def read_table(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing table {path}")
    return pd.read_csv(path)


def save_trace(trace: RegistrationTrace, path: PathLike) -> None:
    write_table(trace.to_frame(), path)


def load_trace(path: PathLike) -> RegistrationTrace:
    df = read_table(path)
    if list(df.columns) != TRACE_COLUMNS:
        raise ArtifactFormatError(f"{path}: unexpected trace header {list(df.columns)}")
    return RegistrationTrace.from_frame(df)


def save_history(history: List[float], path: PathLike) -> None:
    """训练代价历史：每次更新一行"""
    write_table(pd.DataFrame({"k": np.arange(1, len(history) + 1), "cost": history}), path)
