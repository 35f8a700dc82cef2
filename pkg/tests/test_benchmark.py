"""默认参数下的端到端基准：耗时数分钟，只在 -m slow 时运行"""

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from cdl.features import build_training_batch, feature_dim
from cdl.network import FeatureBatch, TrainConfig
from cdl.trainer import CdlModel, fit
from config.config import Config
from main import app
from registration.metrics import CdlMetricKind
from registration.optimizer import OptimizerConfig, register
from registration.transform import AffineParams, volume_center_mm
from tools.synthetic import default_phantom_spec, drift_preset, make_pair, synth_pair

pytestmark = pytest.mark.slow

runner = CliRunner()


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    args = ["--out", str(out), "--seed", "0"]
    steps = [
        ["synth", "--n-pairs", "10", "--n-train-pairs", "10"],
        ["train"],
        ["register", "--method", "cdl"],
        ["register", "--method", "mi"],
        ["evaluate"],
    ]
    for step in steps:
        result = runner.invoke(app, [*args, *step])
        assert result.exit_code in (0, 1), result.output
    return out


class TestTenPairBenchmark:

    def test_cdl_final_dice(self, benchmark):
        cdl = pd.read_csv(benchmark / "register" / "cdl" / "cases.csv")
        mi = pd.read_csv(benchmark / "register" / "mi" / "cases.csv")
        assert len(cdl) == 10
        assert cdl["final_dice"].mean() >= 0.90
        assert cdl["final_dice"].mean() >= mi["final_dice"].mean()

    def test_cdl_improves_nearly_every_pair(self, benchmark):
        cdl = pd.read_csv(benchmark / "register" / "cdl" / "cases.csv")
        assert (cdl["final_dice"] > cdl["initial_dice"]).sum() >= 9

    def test_gain_curve_rises(self, benchmark):
        curve = pd.read_csv(benchmark / "evaluate" / "gain_cdl.csv")
        assert curve["mean_gain"].iloc[-1] >= curve["mean_gain"].iloc[0] + 0.05


def test_cdl_recovers_translation():
    drift = drift_preset("t1-t2")
    pairs = [synth_pair(seed, drift, perturb=False) for seed in range(5)]
    x_target, x_source = build_training_batch([(p.target, p.source) for p in pairs], Config.CDL_TRAIN_SAMPLES, 0)
    cfg = TrainConfig()
    result = fit(FeatureBatch(source=x_source, target=x_target),
                 [feature_dim("local"), Config.CDL_HIDDEN_UNITS, Config.CDL_OUTPUT_UNITS], cfg)
    model = CdlModel(params=result.params, config=cfg)

    spec = default_phantom_spec(100)
    truth = AffineParams.from_dict({"tx": 3.0, "ty": -2.0, "tz": 1.0}, center=volume_center_mm(spec), mode="rigid")
    pair = make_pair(spec, drift, truth, drift_seed=101)
    mu, _ = register(CdlMetricKind(model=model), pair.target, pair.source, mode="rigid", opt=OptimizerConfig())
    assert np.linalg.norm(mu.translation - truth.translation) < 0.5
