import numpy as np
import pytest

from utils.volume_io import (
    BinaryMask,
    ImageVolume,
    MalformedHeaderError,
    NonFiniteVolumeError,
    TruncatedPayloadError,
    VolumeFormatError,
    load_mask,
    load_volume,
    normalize_intensities,
    save_mask,
    save_volume,
    threshold_mask,
)


def _write_raw(path, dims, n_values, dtype="f32le", values=None):
    header = f"CDLV1\ndims {dims[0]} {dims[1]} {dims[2]}\nspacing 1.0 1.0 1.0\ndtype {dtype}\n\n"
    payload = np.zeros(n_values, dtype="<f4") if values is None else np.asarray(values, dtype="<f4")
    path.write_bytes(header.encode("ascii") + payload.tobytes())


class TestLoadVolume:

    def test_zero_file(self, tmp_path):
        path = tmp_path / "zeros.cdlv"
        _write_raw(path, (2, 2, 2), 8)
        vol = load_volume(path)
        assert vol.dims == (2, 2, 2)
        assert np.count_nonzero(vol.data) == 0
        assert vol.data.size == 8

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.cdlv"
        _write_raw(path, (3, 3, 3), 26)
        with pytest.raises(TruncatedPayloadError):
            load_volume(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.cdlv"
        path.write_bytes(b"NOPE\ndims 1 1 1\nspacing 1 1 1\ndtype f32le\n\n\x00\x00\x00\x00")
        with pytest.raises(MalformedHeaderError):
            load_volume(path)

    def test_non_finite(self, tmp_path):
        path = tmp_path / "nan.cdlv"
        _write_raw(path, (1, 1, 2), 2, values=[0.0, np.nan])
        with pytest.raises(NonFiniteVolumeError):
            load_volume(path)

    def test_errors_share_base_class(self):
        for cls in (MalformedHeaderError, TruncatedPayloadError, NonFiniteVolumeError):
            assert issubclass(cls, VolumeFormatError)

    def test_round_trip_bytes(self, tmp_path, rng):
        vol = ImageVolume(rng.random((5, 6, 7)).astype(np.float32), spacing=(0.5, 1.0, 2.5))
        first, second = tmp_path / "a.cdlv", tmp_path / "b.cdlv"
        save_volume(vol, first)
        loaded = load_volume(first)
        save_volume(loaded, second)
        assert first.read_bytes() == second.read_bytes()
        np.testing.assert_array_equal(loaded.data, vol.data)
        assert loaded.spacing == (0.5, 1.0, 2.5)

    def test_x_fastest_layout(self, tmp_path):
        data = np.arange(24, dtype=np.float64).reshape((2, 3, 4))
        path = tmp_path / "order.cdlv"
        save_volume(ImageVolume(data), path)
        payload = np.frombuffer(path.read_bytes()[-24 * 4:], dtype="<f4")
        assert payload[0] == data[0, 0, 0]
        assert payload[1] == data[1, 0, 0]
        assert payload[2] == data[0, 1, 0]

    def test_normalized_flag(self, tmp_path):
        path = tmp_path / "wide.cdlv"
        save_volume(ImageVolume(np.full((2, 2, 2), 5.0)), path)
        assert not load_volume(path).normalized


class TestMaskIO:

    def test_round_trip(self, tmp_path, rng):
        mask = BinaryMask(rng.random((4, 5, 6)) > 0.5)
        path = tmp_path / "m.cdlm"
        save_mask(mask, path, spacing=(2.0, 2.0, 2.0))
        np.testing.assert_array_equal(load_mask(path).bits, mask.bits)

    def test_rejects_volume_dtype(self, tmp_path):
        path = tmp_path / "vol.cdlm"
        _write_raw(path, (1, 1, 1), 1)
        with pytest.raises(MalformedHeaderError):
            load_mask(path)


class TestNormalize:

    def test_constant_volume(self):
        out = normalize_intensities(ImageVolume(np.full((3, 3, 3), 7.0)))
        assert np.all(out.data == 0.0)
        assert "degenerate-span" in out.notes
        assert out.normalized

    def test_two_values(self):
        data = np.zeros((2, 2, 2))
        data[0] = 100.0
        out = normalize_intensities(ImageVolume(data), lo_pct=0.0, hi_pct=100.0)
        assert set(np.unique(out.data)) == {0.0, 1.0}

    def test_percentiles_against_sort(self, random_volume):
        scaled = random_volume.with_data(random_volume.data * 40.0 - 3.0, normalized=False)
        out = normalize_intensities(scaled, 5.0, 95.0)
        flat = np.sort(scaled.data.ravel())
        n = flat.size

        def pct(q):
            # 线性插值的百分位，与 numpy 默认方法一致
            pos = q / 100.0 * (n - 1)
            lo = int(np.floor(pos))
            hi = min(lo + 1, n - 1)
            return flat[lo] + (flat[hi] - flat[lo]) * (pos - lo)

        lo, hi = pct(5.0), pct(95.0)
        expected = np.clip((scaled.data - lo) / (hi - lo), 0.0, 1.0)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        assert out.intensity_range == (0.0, 1.0)

    def test_bad_percentiles(self, random_volume):
        with pytest.raises(ValueError):
            normalize_intensities(random_volume, 90.0, 10.0)


class TestThresholdMask:

    def test_all_zero(self):
        assert threshold_mask(ImageVolume(np.zeros((3, 3, 3))), 0.01).count() == 0

    def test_all_one(self):
        assert threshold_mask(ImageVolume(np.ones((3, 3, 3))), 0.01).count() == 27

    def test_random_count(self, random_volume):
        expected = 0
        for v in random_volume.data.ravel():
            if v > 0.3:
                expected += 1
        assert threshold_mask(random_volume, 0.3).count() == expected


class TestImageVolume:

    def test_immutable(self, random_volume):
        with pytest.raises(ValueError):
            random_volume.data[0, 0, 0] = 1.0

    def test_rejects_bad_spacing(self):
        with pytest.raises(VolumeFormatError):
            ImageVolume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))
