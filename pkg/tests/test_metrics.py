import numpy as np
import pytest

from assimlab.fields import GridSpec, StateField, toy_grid
from assimlab.metrics import (SpectrumProfile, lat_weighted_rmse, mae, mse,
                              power_spectrum, spec_div)


def grid_with_lats(lats, W=8):
    return GridSpec(H=len(lats), W=W, P=1, K=1, latitudes=np.asarray(lats))


class TestMseMae:
    def test_identical(self):
        x = np.random.default_rng(0).standard_normal((4, 4, 2))
        assert mse(x, x) == 0.0
        assert mae(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros((4, 4, 2))
        y = x + 0.25
        assert mse(x, y) == pytest.approx(0.0625)
        assert mae(x, y) == pytest.approx(0.25)

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
        acc_sq = acc_abs = 0.0
        for i in range(3):
            for j in range(4):
                for c in range(2):
                    d = a[i, j, c] - b[i, j, c]
                    acc_sq += d * d
                    acc_abs += abs(d)
        assert abs(mse(a, b) - acc_sq / 24) <= 1e-10
        assert abs(mae(a, b) - acc_abs / 24) <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros((2, 2)), np.zeros((2, 3)))


class TestLatWeightedRmse:
    def test_perfect_prediction(self):
        g = toy_grid(16, 16)
        x = StateField(g, np.random.default_rng(0).standard_normal(g.shape))
        assert lat_weighted_rmse(x, x, 0) == 0.0

    def test_uniform_latitudes_reduce_to_plain_rmse(self):
        g = toy_grid(16, 16, lat_span=0.0)
        rng = np.random.default_rng(1)
        a = StateField(g, rng.standard_normal(g.shape))
        b = StateField(g, rng.standard_normal(g.shape))
        plain = np.sqrt(np.mean((a.values[:, :, 2] - b.values[:, :, 2]) ** 2))
        assert lat_weighted_rmse(a, b, 2) == pytest.approx(plain, abs=1e-14)

    def test_two_row_hand_case(self):
        # rows at 0 and 60 degrees, error 1 on row 0 only:
        # weights 2cos0/(cos0+cos60) = 4/3 and 2/3; mean weighted sq = 2/3
        g = grid_with_lats([0.0, 60.0])
        truth = StateField(g, np.zeros(g.shape))
        pred = np.zeros(g.shape)
        pred[0, :, 0] = 1.0
        got = lat_weighted_rmse(truth, StateField(g, pred), 0)
        # scalar brute-force oracle
        cos = np.cos(np.deg2rad(g.latitudes))
        acc = 0.0
        for h in range(g.H):
            for w in range(g.W):
                wgt = g.H * cos[h] / cos.sum()
                acc += wgt * (pred[h, w, 0] - 0.0) ** 2
        oracle = np.sqrt(acc / (g.H * g.W))
        assert got == pytest.approx(oracle, abs=1e-14)
        assert got == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-12)

    def test_channel_out_of_range(self):
        g = toy_grid(16, 16)
        x = StateField(g, np.zeros(g.shape))
        with pytest.raises(IndexError):
            lat_weighted_rmse(x, x, 99)


class TestPowerSpectrum:
    def test_pure_mode_single_bin(self):
        H = W = 32
        x = np.arange(W) / W
        field = np.tile(np.sin(2 * np.pi * 3 * x), (H, 1))
        sp = power_spectrum(field)
        assert sp.power[sp.wavenumbers == 3] == pytest.approx(1.0)
        assert sp.power.sum() == pytest.approx(1.0)

    def test_parseval_against_loop_oracle(self):
        # independent oracle: scalar loop over all modes, binning by rounded
        # radius; its bin total must equal sum |FFT|^2 minus the mean mode
        rng = np.random.default_rng(2)
        field = rng.standard_normal((32, 32))
        H, W = field.shape
        coeff = np.fft.fft2(field)
        iy = np.fft.fftfreq(H) * H
        ix = np.fft.fftfreq(W) * W
        bins: dict[int, float] = {}
        total_no_mean = 0.0
        for i in range(H):
            for j in range(W):
                if i == 0 and j == 0:
                    continue
                p = abs(coeff[i, j]) ** 2
                w = int(round(np.hypot(iy[i], ix[j])))
                bins[w] = bins.get(w, 0.0) + p
                total_no_mean += p
        assert abs(sum(bins.values()) - total_no_mean) <= 1e-8 * total_no_mean

        sp = power_spectrum(field)
        for w, p in bins.items():
            assert sp.power[sp.wavenumbers == w] == pytest.approx(
                p / total_no_mean, rel=1e-10)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        field = rng.standard_normal((32, 32))
        a = power_spectrum(field).power
        b = power_spectrum(np.rot90(field)).power
        assert np.abs(a - b).max() <= 1e-8

    def test_mean_mode_excluded(self):
        rng = np.random.default_rng(4)
        field = rng.standard_normal((16, 16))
        a = power_spectrum(field).power
        b = power_spectrum(field + 100.0).power
        assert np.allclose(a, b, atol=1e-9)

    def test_zero_field_rejected(self):
        with pytest.raises(ValueError):
            power_spectrum(np.zeros((16, 16)))
        with pytest.raises(ValueError):
            power_spectrum(np.full((16, 16), 2.5))  # mean mode only

    def test_profile_invariants(self):
        rng = np.random.default_rng(5)
        sp = power_spectrum(rng.standard_normal((64, 64)))
        assert np.all(sp.power >= 0)
        assert sp.power.sum() == pytest.approx(1.0, abs=1e-9)
        assert sp.wavenumbers[0] == 1
        assert sp.wavenumbers[-1] >= 32  # covers at least the Nyquist radius


class TestSpecDiv:
    def test_identical_fields(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((32, 32))
        assert spec_div(f, f) == 0.0

    def test_amplitude_invariance(self):
        rng = np.random.default_rng(7)
        f = rng.standard_normal((32, 32))
        assert spec_div(f, 3.7 * f) == pytest.approx(0.0, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.standard_normal((16, 16))
            b = rng.standard_normal((16, 16))
            assert spec_div(a, b) >= 0

    def test_two_bin_closed_form(self):
        # S = (0.5, 0.5), S_hat = (0.25, 0.75):
        # KL = 0.5 log 2 + 0.5 log(2/3) = 0.14384...
        expected = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
        s = np.array([0.5, 0.5])
        s_hat = np.array([0.25, 0.75])
        kl = float(np.sum(s * np.log(s / s_hat)))
        assert kl == pytest.approx(expected, abs=1e-12)
        assert kl == pytest.approx(0.1438, abs=1e-4)

        # realize the same two-bin spectra with pure modes on a grid
        H = W = 16
        x = np.arange(W) / W
        m1 = np.tile(np.sin(2 * np.pi * x), (H, 1))
        m2 = np.tile(np.sin(2 * np.pi * 2 * x), (H, 1))
        truth = np.sqrt(0.5) * m1 + np.sqrt(0.5) * m2
        pred = np.sqrt(0.25) * m1 + np.sqrt(0.75) * m2
        assert spec_div(truth, pred) == pytest.approx(expected, abs=1e-9)

    def test_missing_prediction_bin_floored(self):
        H = W = 16
        x = np.arange(W) / W
        truth = np.tile(np.sin(2 * np.pi * x), (H, 1)) \
            + 0.5 * np.tile(np.sin(2 * np.pi * 3 * x), (H, 1))
        pred = np.tile(np.sin(2 * np.pi * x), (H, 1))  # no power at omega=3
        val = spec_div(truth, pred)
        assert np.isfinite(val) and val > 0

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            SpectrumProfile(np.array([1, 2]), np.array([0.7, 0.7]))
        with pytest.raises(ValueError):
            SpectrumProfile(np.array([1, 2]), np.array([-0.1, 1.1]))
