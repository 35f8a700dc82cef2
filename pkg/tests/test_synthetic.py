import numpy as np
import pytest
from pydantic import ValidationError

from registration.transform import AffineParams, volume_center_mm
from tools.evaluation import dice
from tools.synthetic import (
    Blob,
    DriftSpec,
    DriftSpecError,
    PhantomSpec,
    apply_drift,
    default_phantom_spec,
    drift_preset,
    make_pair,
    make_phantom,
    perturbation,
    random_rigid_perturbation,
    synth_pair,
    validation_protocol,
)
from utils.volume_io import ImageVolume


class TestPhantom:

    def test_no_blobs(self):
        volume, mask = make_phantom(PhantomSpec(dims=(8, 8, 8)))
        assert np.all(volume.data == 0.0)
        assert mask.count() == 0

    def test_sphere_voxel_count(self):
        spec = PhantomSpec(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0),
                           blobs=[Blob(center=(15.5, 15.5, 15.5), radii=(10.0, 10.0, 10.0), intensity=0.6)])
        volume, mask = make_phantom(spec)
        expected = 4.0 / 3.0 * np.pi * 10.0 ** 3
        assert abs(mask.count() - expected) / expected < 0.05
        assert volume.data.max() == pytest.approx(0.6)
        assert volume.normalized

    def test_blob_outside_rejected(self):
        with pytest.raises(ValueError):
            PhantomSpec(dims=(10, 10, 10), blobs=[Blob(center=(2.0, 2.0, 2.0), radii=(4.0, 4.0, 4.0))])

    def test_noise_is_seeded(self):
        spec = default_phantom_spec(3, dims=(12, 12, 12), noise_sigma=0.05)
        a, _ = make_phantom(spec)
        b, _ = make_phantom(spec)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data.min() >= 0.0 and a.data.max() <= 1.0


class TestDrift:

    def test_identity(self, random_volume):
        out = apply_drift(random_volume, DriftSpec())
        np.testing.assert_array_equal(out.data, random_volume.data)
        assert out.spacing == random_volume.spacing

    def test_gamma(self):
        out = apply_drift(ImageVolume(np.full((4, 4, 4), 0.5)), DriftSpec(kind="gamma", gamma=2.0))
        np.testing.assert_allclose(out.data, 0.25)

    def test_sigmoid_remap_fixes_endpoints(self):
        spec = drift_preset("mr-ct")
        np.testing.assert_allclose(spec.remap(np.array([0.0, 1.0])), [0.0, 1.0], atol=1e-12)
        assert spec.center == 0.6 and spec.slope == 12.0

    def test_non_monotone_knots(self, random_volume):
        spec = DriftSpec(kind="piecewise_monotone", knots=[(0.0, 0.0), (0.5, 0.8), (1.0, 0.4)])
        with pytest.raises(DriftSpecError):
            apply_drift(random_volume, spec)

    def test_inversion_knots_may_decrease(self):
        spec = drift_preset("t1-t2")
        y = spec.remap(np.linspace(0.0, 1.0, 101))
        assert np.any(np.diff(y) < 0)
        assert y[0] == 0.0 and y[-1] == 1.0

    def test_unknown_preset(self):
        with pytest.raises(DriftSpecError):
            drift_preset("pet-ct")

    def test_unknown_kind_rejected_on_construction(self):
        with pytest.raises(ValidationError):
            DriftSpec(kind="solarize")

    def test_noise_clipped(self, random_volume):
        out = apply_drift(random_volume, DriftSpec(noise_sigma=0.5), seed=3)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        assert "drift:identity" in out.notes


class TestMakePair:

    def test_identity_pair(self, phantom_spec):
        pair = make_pair(phantom_spec, drift_preset("identity"), AffineParams.identity(volume_center_mm(phantom_spec)))
        np.testing.assert_allclose(pair.source.data, pair.target.data, atol=1e-5)
        np.testing.assert_array_equal(pair.source_mask.bits, pair.target_mask.bits)
        assert pair.overlap == 1.0

    def test_inversion_keeps_geometry(self, phantom_spec):
        pair = make_pair(phantom_spec, DriftSpec(kind="inversion"), AffineParams.identity(volume_center_mm(phantom_spec)))
        assert dice(pair.source_mask, pair.target_mask) == 1.0
        inner = (slice(1, -1),) * 3
        r = np.corrcoef(pair.source.data[inner].ravel(), pair.target.data[inner].ravel())[0, 1]
        assert r < -0.99

    def test_rotation_moves_mask(self, phantom_spec):
        mu = AffineParams.from_dict({"rz": np.deg2rad(5.0)}, center=volume_center_mm(phantom_spec), mode="rigid")
        pair = make_pair(phantom_spec, drift_preset("identity"), mu)
        assert dice(pair.source_mask, pair.target_mask) < 1.0
        assert pair.mu_true is mu

    def test_synth_pair_deterministic(self):
        a = synth_pair(4, drift_preset("mr-ct"), perturb=True, dims=(16, 16, 16))
        b = synth_pair(4, drift_preset("mr-ct"), perturb=True, dims=(16, 16, 16))
        np.testing.assert_array_equal(a.source.data, b.source.data)
        np.testing.assert_array_equal(a.mu_true.mu, b.mu_true.mu)

    def test_synth_pair_aligned(self):
        pair = synth_pair(2, drift_preset("t1-t2"), perturb=False, dims=(16, 16, 16))
        np.testing.assert_array_equal(pair.mu_true.mu, AffineParams.identity().mu)
        assert pair.mu_true.mode == "rigid"


class TestPerturbations:

    def test_rigid_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mu = random_rigid_perturbation(rng, (0.0, 0.0, 0.0), max_rot_deg=10.0, max_trans_mm=5.0)
            assert np.all(np.abs(mu.mu[0:3]) <= np.deg2rad(10.0))
            assert np.all(np.abs(mu.mu[3:6]) <= 5.0)
            assert mu.mode == "rigid"

    def test_validation_protocol_single_rotation(self):
        pairs = validation_protocol(0, drift_preset("identity"), n_pairs=3, dims=(14, 14, 14))
        assert len(pairs) == 3
        for pair in pairs:
            assert np.count_nonzero(pair.mu_true.mu[0:3]) == 1
            np.testing.assert_array_equal(pair.mu_true.mu[3:6], 0.0)

    def test_validation_protocol_matches_synth_pairs(self):
        pairs = validation_protocol(5, drift_preset("t1-t2"), n_pairs=2, dims=(14, 14, 14))
        for i, pair in enumerate(pairs):
            single = synth_pair(5 + i, drift_preset("t1-t2"), perturb=True, dims=(14, 14, 14), protocol="validation")
            np.testing.assert_array_equal(pair.mu_true.mu, single.mu_true.mu)
            np.testing.assert_array_equal(pair.source.data, single.source.data)

    def test_rigid_protocol_moves_all_six_parameters(self):
        mu = perturbation(3, (10.0, 10.0, 10.0), "rigid")
        assert np.count_nonzero(mu.mu[0:6]) == 6
        np.testing.assert_array_equal(mu.mu[6:9], 1.0)
