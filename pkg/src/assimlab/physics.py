"""Physical-constraint machinery: spectral differentiation on the doubly
periodic grid, per-variable time tendencies of the rotating shallow-water +
tracer system, the snapshot geostrophic-balance residual, and its mean-square
energy.

Everything here runs on torch tensors so the residual energy is exactly
differentiable by reverse mode; numpy arrays are accepted and returned at the
public entry points. Fields are (..., H, W) or (..., H, W, C); axis H is y
(rows), axis W is x (columns).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch

from .fields import GridSpec, StateField

if TYPE_CHECKING:  # only for annotations; avoids a circular import
    from .shallow_water import ToyParams

__all__ = [
    "Tendencies", "ResidualVector", "spectral_gradient", "tendencies_tensor",
    "pde_tendencies", "balance_residual", "residual_energy",
    "residual_energy_tensor", "residual_energy_samples",
    "residual_scales_from_states", "random_band_limited",
]


@dataclass(eq=False)
class Tendencies:
    """Per-variable time derivatives (H, W) of the five toy channels."""

    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    q: np.ndarray
    T: np.ndarray


@dataclass(eq=False)
class ResidualVector:
    """Named snapshot-constraint residuals with their normalization scales."""

    components: dict[str, np.ndarray]
    scale: dict[str, float]


def _require_spectral_grid(grid: GridSpec) -> None:
    if not grid.is_power_of_two():
        raise ValueError(
            f"spectral differentiation needs power-of-two extents >= 16, "
            f"got {grid.H}x{grid.W}")


def _wavenumbers(grid: GridSpec, device, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Angular wavenumbers (kx over axis W, ky over axis H), broadcastable to
    (H, W). Nyquist rows/columns are zeroed for odd derivatives."""
    kx = 2.0 * np.pi * np.fft.fftfreq(grid.W, d=grid.Lx / grid.W)
    ky = 2.0 * np.pi * np.fft.fftfreq(grid.H, d=grid.Ly / grid.H)
    if grid.W % 2 == 0:
        kx[grid.W // 2] = 0.0
    if grid.H % 2 == 0:
        ky[grid.H // 2] = 0.0
    kx_t = torch.as_tensor(kx, device=device, dtype=dtype).reshape(1, grid.W)
    ky_t = torch.as_tensor(ky, device=device, dtype=dtype).reshape(grid.H, 1)
    return kx_t, ky_t


def _k2(grid: GridSpec, device, dtype) -> torch.Tensor:
    """|k|^2 on the full (H, W) spectral grid (Nyquist modes included: even
    derivatives keep conjugate symmetry)."""
    kx = 2.0 * np.pi * np.fft.fftfreq(grid.W, d=grid.Lx / grid.W)
    ky = 2.0 * np.pi * np.fft.fftfreq(grid.H, d=grid.Ly / grid.H)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    return torch.as_tensor(k2, device=device, dtype=dtype)


def _grad_t(f: torch.Tensor, grid: GridSpec) -> tuple[torch.Tensor, torch.Tensor]:
    kx, ky = _wavenumbers(grid, f.device, f.dtype)
    fhat = torch.fft.fft2(f, dim=(-2, -1))
    dx = torch.fft.ifft2(1j * kx * fhat, dim=(-2, -1)).real
    dy = torch.fft.ifft2(1j * ky * fhat, dim=(-2, -1)).real
    return dx, dy


def _laplacian_t(f: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    k2 = _k2(grid, f.device, f.dtype)
    return torch.fft.ifft2(-k2 * torch.fft.fft2(f, dim=(-2, -1)), dim=(-2, -1)).real


def _hyperdiffusion_t(f: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """del^4 f, spectrally (k^4 multiplier)."""
    k2 = _k2(grid, f.device, f.dtype)
    return torch.fft.ifft2(k2 * k2 * torch.fft.fft2(f, dim=(-2, -1)), dim=(-2, -1)).real


def spectral_gradient(field, grid: GridSpec):
    """(d/dx, d/dy) of a periodic field by Fourier transform, multiplication
    by i*k, and inverse transform; exact for band-limited fields.

    Accepts numpy or torch input with shape (..., H, W); the return type
    matches the input type.
    """
    _require_spectral_grid(grid)
    is_np = isinstance(field, np.ndarray)
    f = torch.as_tensor(field)
    if f.shape[-2:] != (grid.H, grid.W):
        raise ValueError(f"field shape {tuple(f.shape)} does not end in "
                         f"({grid.H}, {grid.W})")
    if not torch.isfinite(f).all():
        raise ValueError("spectral_gradient input contains non-finite entries")
    dx, dy = _grad_t(f, grid)
    if is_np:
        return dx.numpy(), dy.numpy()
    return dx, dy


def _channel_slices(grid: GridSpec) -> dict[str, int]:
    missing = [name for name in ("u", "v", "z", "q", "T")
               if name not in grid.variables]
    if missing:
        raise KeyError(f"state is missing required toy variable(s): {missing}")
    return {name: grid.variable_channel(name) for name in ("u", "v", "z", "q", "T")}


def tendencies_tensor(values: torch.Tensor, grid: GridSpec,
                      params: ToyParams) -> torch.Tensor:
    """Shallow-water momentum/continuity plus tracer advection-diffusion
    tendencies for a (..., H, W, C) tensor; returns the same shape.

    This single routine drives both the trajectory integrator and the physics
    regularizer, so "the physics" has one definition.
    """
    _require_spectral_grid(grid)
    ch = _channel_slices(grid)
    u = values[..., ch["u"]]
    v = values[..., ch["v"]]
    z = values[..., ch["z"]]
    q = values[..., ch["q"]]
    T = values[..., ch["T"]]

    ux, uy = _grad_t(u, grid)
    vx, vy = _grad_t(v, grid)
    zx, zy = _grad_t(z, grid)

    du = -(u * ux + v * uy) + params.f0 * v - params.g * zx \
        - params.nu * _hyperdiffusion_t(u, grid)
    dv = -(u * vx + v * vy) - params.f0 * u - params.g * zy \
        - params.nu * _hyperdiffusion_t(v, grid)

    # continuity in flux form: the mean of z is conserved exactly
    h = params.H0 + z
    fx, _ = _grad_t(h * u, grid)
    _, fy = _grad_t(h * v, grid)
    dz = -(fx + fy) - params.nu * _hyperdiffusion_t(z, grid)

    qx, qy = _grad_t(q, grid)
    Tx, Ty = _grad_t(T, grid)
    dq = -(u * qx + v * qy) + params.kappa * _laplacian_t(q, grid)
    dT = -(u * Tx + v * Ty) + params.kappa * _laplacian_t(T, grid)

    out = torch.zeros_like(values)
    out[..., ch["u"]] = du
    out[..., ch["v"]] = dv
    out[..., ch["z"]] = dz
    out[..., ch["q"]] = dq
    out[..., ch["T"]] = dT
    return out


def pde_tendencies(state: StateField, params: ToyParams) -> Tendencies:
    """Named per-variable time derivatives of a single state."""
    values = torch.as_tensor(state.values, dtype=torch.float64)
    out = tendencies_tensor(values, state.grid, params).numpy()
    ch = _channel_slices(state.grid)
    return Tendencies(u=out[..., ch["u"]], v=out[..., ch["v"]],
                      z=out[..., ch["z"]], q=out[..., ch["q"]],
                      T=out[..., ch["T"]])


def _balance_components(values: torch.Tensor, grid: GridSpec,
                        params: ToyParams) -> tuple[torch.Tensor, torch.Tensor]:
    ch = _channel_slices(grid)
    u = values[..., ch["u"]]
    v = values[..., ch["v"]]
    z = values[..., ch["z"]]
    zx, zy = _grad_t(z, grid)
    geo_u = params.f0 * u + params.g * zy
    geo_v = params.f0 * v - params.g * zx
    return geo_u, geo_v


DEFAULT_RESIDUAL_COMPONENTS = ("geostrophic_u", "geostrophic_v")


def balance_residual(state: StateField, params: ToyParams,
                     scales: dict[str, float] | None = None) -> ResidualVector:
    """Snapshot geostrophic-balance residual, one field per component,
    each divided by its scale constant (unit scales when none given)."""
    scales = scales or {name: 1.0 for name in DEFAULT_RESIDUAL_COMPONENTS}
    values = torch.as_tensor(state.values, dtype=torch.float64)
    geo_u, geo_v = _balance_components(values, state.grid, params)
    comps = {
        "geostrophic_u": (geo_u / scales["geostrophic_u"]).numpy(),
        "geostrophic_v": (geo_v / scales["geostrophic_v"]).numpy(),
    }
    return ResidualVector(components=comps, scale=dict(scales))


def residual_energy_samples(values: torch.Tensor, grid: GridSpec,
                            params: ToyParams,
                            scales: dict[str, float] | None = None) -> torch.Tensor:
    """Per-sample mean squared residual for a (..., H, W, C) tensor: the grid
    and component axes are averaged, batch axes are kept. Differentiable."""
    scales = scales or {name: 1.0 for name in DEFAULT_RESIDUAL_COMPONENTS}
    geo_u, geo_v = _balance_components(values, grid, params)
    su = scales["geostrophic_u"]
    sv = scales["geostrophic_v"]
    return 0.5 * (torch.mean((geo_u / su) ** 2, dim=(-2, -1))
                  + torch.mean((geo_v / sv) ** 2, dim=(-2, -1)))


def residual_energy_tensor(values: torch.Tensor, grid: GridSpec,
                           params: ToyParams,
                           scales: dict[str, float] | None = None) -> torch.Tensor:
    """Mean squared residual over all grid points and components for a
    (..., H, W, C) tensor; differentiable w.r.t. `values`. Batch axes are
    averaged together with the grid."""
    return torch.mean(residual_energy_samples(values, grid, params, scales))


def residual_energy(state: StateField, params: ToyParams,
                    scales: dict[str, float] | None = None) -> float:
    """Grid-size-invariant scalar: mean of squared residual components."""
    values = torch.as_tensor(state.values, dtype=torch.float64)
    return float(residual_energy_tensor(values, state.grid, params, scales))


def residual_scales_from_states(values: np.ndarray, grid: GridSpec,
                                params: ToyParams) -> dict[str, float]:
    """Per-component nondimensionalization constants: RMS of the Coriolis
    term f0*u (resp. f0*v) over a set of states (n, H, W, C)."""
    ch = _channel_slices(grid)
    u = np.asarray(values)[..., ch["u"]]
    v = np.asarray(values)[..., ch["v"]]
    rms = lambda a: float(np.sqrt(np.mean(np.square(a, dtype=np.float64))))
    return {
        "geostrophic_u": max(params.f0 * rms(u), 1.0e-30),
        "geostrophic_v": max(params.f0 * rms(v), 1.0e-30),
    }


def random_band_limited(grid: GridSpec, band_limit: int,
                        rng: np.random.Generator,
                        slope: float = 0.0) -> np.ndarray:
    """Zero-mean random field containing only integer wavenumber radii in
    [1, band_limit], normalized to unit RMS.

    `slope` > 0 shapes the per-mode amplitude as radius**(-slope), giving the
    field a power-law spectrum instead of white-in-band.
    """
    _require_spectral_grid(grid)
    if band_limit < 1:
        raise ValueError("band_limit must be >= 1")
    if band_limit >= min(grid.H, grid.W) // 2:
        raise ValueError(
            f"band_limit {band_limit} reaches the Nyquist radius of a "
            f"{grid.H}x{grid.W} grid (aliasing)")
    white = rng.standard_normal((grid.H, grid.W))
    spec = np.fft.fft2(white)
    iy = np.fft.fftfreq(grid.H) * grid.H
    ix = np.fft.fftfreq(grid.W) * grid.W
    radius = np.sqrt(iy[:, None] ** 2 + ix[None, :] ** 2)
    inband = (radius >= 0.5) & (radius <= band_limit + 1.0e-9)
    shape = np.where(inband, np.maximum(radius, 1.0) ** (-slope), 0.0)
    field = np.fft.ifft2(spec * shape).real
    rms = np.sqrt(np.mean(field ** 2))
    if rms == 0:
        raise ValueError("degenerate band-limited sample")
    return field / rms
