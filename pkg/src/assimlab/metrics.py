"""Accuracy and physical-consistency metrics: MSE, MAE, latitude-weighted
RMSE, radially binned power spectra, and the spectral divergence between a
prediction's spectrum and the truth's.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import StateField

SPECTRUM_FLOOR = 1.0e-12


def mse(truth: np.ndarray, pred: np.ndarray) -> float:
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    return float(np.mean((truth.astype(np.float64) - pred) ** 2))


def mae(truth: np.ndarray, pred: np.ndarray) -> float:
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    return float(np.mean(np.abs(truth.astype(np.float64) - pred)))


def latitude_weights(latitudes: np.ndarray) -> np.ndarray:
    """Per-row weight H * cos(lat_h) / sum_h' cos(lat_h'); all ones for
    uniform latitudes."""
    cos = np.cos(np.deg2rad(np.asarray(latitudes, dtype=np.float64)))
    return len(cos) * cos / cos.sum()


def lat_weighted_rmse(truth: StateField, pred: StateField, channel: int) -> float:
    """Latitude-weighted RMSE of one channel."""
    grid = truth.grid
    if pred.values.shape != truth.values.shape:
        raise ValueError("truth/pred shape mismatch")
    if not (0 <= channel < grid.C):
        raise IndexError(f"channel {channel} out of range [0, {grid.C})")
    w = latitude_weights(grid.latitudes)[:, None]
    err2 = (truth.values[:, :, channel].astype(np.float64)
            - pred.values[:, :, channel]) ** 2
    return float(np.sqrt(np.mean(w * err2)))


@dataclass(eq=False)
class SpectrumProfile:
    """Normalized radial power distribution over scalar wavenumbers."""

    wavenumbers: np.ndarray  # sorted integer radii, starting at 1
    power: np.ndarray  # sums to 1

    def __post_init__(self):
        if np.any(self.power < 0):
            raise ValueError("spectral power must be non-negative")
        if abs(self.power.sum() - 1.0) > 1.0e-9:
            raise ValueError("spectral power must sum to 1")


def _radial_bins(H: int, W: int) -> np.ndarray:
    iy = np.fft.fftfreq(H) * H
    ix = np.fft.fftfreq(W) * W
    radius = np.sqrt(iy[:, None] ** 2 + ix[None, :] ** 2)
    return np.round(radius).astype(int)


def power_spectrum(field: np.ndarray) -> SpectrumProfile:
    """2-D FFT -> |coefficient|^2 -> sum per rounded radial wavenumber,
    excluding the mean mode, normalized to a distribution.

    All bins up to the corner radius round(sqrt((H/2)^2 + (W/2)^2)) are kept so
    the binned power accounts for the full non-mean spectral energy.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("power_spectrum expects a 2-D field")
    if not np.all(np.isfinite(field)):
        raise ValueError("power_spectrum input contains non-finite entries")
    H, W = field.shape
    p2 = np.abs(np.fft.fft2(field)) ** 2
    bins = _radial_bins(H, W)
    n_bins = bins.max()
    power = np.bincount(bins.ravel(), weights=p2.ravel(), minlength=n_bins + 1)[1:]
    total = power.sum()
    if total <= 0:
        raise ValueError("degenerate field: no spectral power outside the mean mode")
    return SpectrumProfile(wavenumbers=np.arange(1, n_bins + 1), power=power / total)


def spec_div(truth_field: np.ndarray, pred_field: np.ndarray) -> float:
    """sum_w S'(w) * log(S'(w) / S_hat'(w)) over normalized spectra.

    Zero truth bins contribute 0; empty prediction bins are floored at
    SPECTRUM_FLOOR. Non-negative; zero iff the spectra agree.
    """
    truth_field, pred_field = np.asarray(truth_field), np.asarray(pred_field)
    if truth_field.shape != pred_field.shape:
        raise ValueError("truth/pred shape mismatch")
    s = power_spectrum(truth_field).power
    s_hat = power_spectrum(pred_field).power
    pos = s > 0
    return float(np.sum(s[pos] * np.log(s[pos] / np.maximum(s_hat[pos], SPECTRUM_FLOOR))))


def spec_div_channel(truth: StateField, pred: StateField, channel: int) -> float:
    return spec_div(truth.values[:, :, channel], pred.values[:, :, channel])
