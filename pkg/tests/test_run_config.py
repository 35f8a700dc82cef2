import pytest

from config.config import Config
from config.run_config import (
    RESOLVED_CONFIG_NAME,
    RunConfig,
    RunConfigError,
    format_config,
    parse_config_text,
    resolve_config,
    write_resolved_config,
)


class TestParse:

    def test_comments_and_blank_lines(self):
        text = "# 实验配置\nseed = 3\n\nalpha = 0.2   # MMD 权重\nmodel =\n"
        assert parse_config_text(text) == {"seed": "3", "alpha": "0.2", "model": ""}

    def test_missing_equals(self):
        with pytest.raises(RunConfigError, match=":2:"):
            parse_config_text("seed = 1\nalpha 0.1\n")

    def test_duplicate_key(self):
        with pytest.raises(RunConfigError):
            parse_config_text("seed = 1\nseed = 2\n")


class TestResolve:

    def test_defaults(self):
        cfg = resolve_config()
        assert cfg.beta == Config.CDL_BETA
        assert cfg.bins == Config.HIST_BINS
        assert cfg.train_pairs == cfg.n_pairs

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 4\nalpha = 0.5\nmethod = mi+m\n", encoding="utf-8")
        cfg = resolve_config(path, {"alpha": 0.25, "beta": None})
        assert cfg.seed == 4
        assert cfg.alpha == 0.25
        assert cfg.method == "mi+m"
        assert cfg.beta == Config.CDL_BETA

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("sede = 4\n", encoding="utf-8")
        with pytest.raises(RunConfigError):
            resolve_config(path)

    def test_bad_value(self):
        with pytest.raises(RunConfigError):
            resolve_config(overrides={"bins": 1})

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            resolve_config(tmp_path / "absent.cfg")

    def test_empty_value_is_none(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("n_train_pairs =\nn_pairs = 3\n", encoding="utf-8")
        cfg = resolve_config(path)
        assert cfg.n_train_pairs is None and cfg.train_pairs == 3


class TestDerivedConfigs:

    def test_train_config(self):
        cfg = RunConfig(seed=9, train_max_iters=12, activation="tanh", update_rule="explicit")
        tc = cfg.train_config()
        assert (tc.rng_seed, tc.max_iters, tc.activation, tc.update_rule) == (9, 12, "tanh", "explicit")

    def test_optimizer_config(self):
        opt = RunConfig(max_iters=0, reg_samples=50, resample_each_iter=True).optimizer_config()
        assert (opt.max_iters, opt.n_samples, opt.resample_each_iter) == (0, 50, True)


class TestResolvedFile:

    def test_written_and_reloadable(self, tmp_path):
        cfg = RunConfig(seed=2, alpha=0.125, svg=True, model=None)
        path = write_resolved_config(cfg, tmp_path)
        assert path.name == RESOLVED_CONFIG_NAME
        assert "svg = true" in path.read_text(encoding="utf-8")
        assert resolve_config(path) == cfg

    def test_format_is_stable(self):
        assert format_config(RunConfig(seed=1)) == format_config(RunConfig(seed=1))
