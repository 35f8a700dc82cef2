import numpy as np
import pytest

from cdl import network
from registration.metrics import CdlMetric
from tools.verify import (
    check_mi_oracle,
    check_mmd_oracle,
    check_network_gradients,
    entrywise_relative_error,
    registration_gradient_error,
    run_suite,
)


def test_network_gradients_pass():
    result = check_network_gradients(n_networks=2)
    assert result.passed, result.measured


def test_estimator_oracles():
    assert check_mi_oracle(3).passed
    assert check_mmd_oracle(3).passed


def test_sign_flipped_mmd_gradient_is_caught(monkeypatch):
    real = network.mmd_seeds

    def flipped(cache):
        d_t, d_s = real(cache)
        return -d_t, -d_s

    monkeypatch.setattr(network, "mmd_seeds", flipped)
    result = check_network_gradients(n_networks=2)
    assert not result.passed
    assert result.measured > result.tolerance


class TestEntrywiseError:

    def test_small_wrong_component_not_masked(self):
        numeric = np.array([100.0, 0.01, -3.0])
        analytic = np.array([100.0, -0.01, -3.0])
        err, worst = entrywise_relative_error(analytic, numeric)
        assert err == pytest.approx(2.0)
        assert worst == 1

    def test_near_zero_entry_uses_floor(self):
        numeric = np.array([10.0, 0.0])
        analytic = np.array([10.0, 1e-6])
        err, worst = entrywise_relative_error(analytic, numeric)
        # 分母下限 1e-3·10
        assert err == pytest.approx(1e-4)
        assert worst == 1

    def test_exact_match(self):
        v = np.array([1.0, -2.0, 3e-5])
        assert entrywise_relative_error(v, v) == (0.0, 0)


def test_flipped_shear_direction_is_caught(monkeypatch):
    real = CdlMetric.value_and_direction

    def flipped(self, mu):
        c, d = real(self, mu)
        d = d.copy()
        d[9] = -d[9]
        return c, d

    assert registration_gradient_error(0) < 1e-3
    monkeypatch.setattr(CdlMetric, "value_and_direction", flipped)
    assert registration_gradient_error(0) > 1e-3


@pytest.mark.slow
def test_quick_suite():
    df = run_suite(seed=0, quick=True)
    assert list(df.columns) == ["check", "measured", "tolerance", "passed", "detail"]
    assert df["passed"].all(), df[~df["passed"]].to_dict("records")
