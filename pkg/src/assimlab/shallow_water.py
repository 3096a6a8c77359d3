"""Ground-truth generator: a 2-D rotating shallow-water system with two
passive tracers on a doubly periodic square.

The governing equations are exactly those of
:func:`assimlab.physics.tendencies_tensor`, so generated trajectories satisfy
a known snapshot constraint (geostrophic balance at t=0, with measured drift
afterwards) that downstream residual tests can rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import h5py
import numpy as np
import torch

from . import storage
from .fields import GridSpec, StateField
from .physics import random_band_limited, residual_energy_tensor, tendencies_tensor

SPLIT_RATIO = (8, 1, 1)  # train : val : test, by trajectory index


@dataclass(frozen=True)
class ToyParams:
    """Physical and numerical parameters of the toy system."""

    f0: float = 1.5e-4  # Coriolis parameter, 1/s
    g: float = 9.81  # gravity, m/s^2
    H0: float = 1000.0  # mean layer depth, m
    nu: float = 1.0e12  # hyperdiffusion coefficient, m^4/s
    kappa: float = 1.0e3  # tracer diffusivity, m^2/s
    dt: float = 60.0  # integration step, s
    band_limit: int = 12  # max initial wavenumber
    z_amp: float = 0.75  # RMS of the initial height anomaly, m
    tracer_amp: float = 1.0  # RMS of the initial tracer fields
    spectral_slope: float = 2.0  # per-mode amplitude decay of initial fields

    def __post_init__(self):
        for name in ("f0", "g", "H0", "nu", "kappa", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ToyParams.{name} must be positive")
        if self.band_limit < 1:
            raise ValueError("band_limit must be >= 1")

    def check_stable_dt(self, grid: GridSpec) -> None:
        """Gravity-wave CFL bound: dt <= 0.5 * min(dx, dy) / sqrt(g * H0)."""
        bound = 0.5 * min(grid.Lx / grid.W, grid.Ly / grid.H) / math.sqrt(self.g * self.H0)
        if self.dt > bound:
            raise ValueError(
                f"dt={self.dt} violates the gravity-wave stability bound "
                f"{bound:.3f} s for this grid")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyParams":
        return cls(**d)


@dataclass(eq=False)
class Trajectory:
    """Ordered states plus everything needed to regenerate them."""

    states: np.ndarray  # (n_steps, H, W, C)
    dt: float
    params: ToyParams
    seed: int
    grid: GridSpec
    backgrounds: np.ndarray | None = None  # (n_steps, H, W, C)
    residual_norms: np.ndarray | None = None  # (n_steps,) residual energy


def balanced_random_state(grid: GridSpec, params: ToyParams, seed: int) -> StateField:
    """Random band-limited height field with exactly geostrophic winds and two
    independent band-limited tracers; the balance residual vanishes by
    construction."""
    if not grid.is_power_of_two():
        raise ValueError("toy generation requires power-of-two extents >= 16")
    if params.band_limit >= min(grid.H, grid.W) // 2:
        raise ValueError("band_limit reaches the Nyquist radius (aliasing)")
    rng = np.random.default_rng(seed)
    slope = params.spectral_slope
    z = params.z_amp * random_band_limited(grid, params.band_limit, rng, slope)
    # u = -(g/f0) dz/dy, v = (g/f0) dz/dx
    zt = torch.as_tensor(z, dtype=torch.float64)
    from .physics import _grad_t  # internal spectral helper
    zx, zy = _grad_t(zt, grid)
    u = (-(params.g / params.f0) * zy).numpy()
    v = ((params.g / params.f0) * zx).numpy()
    T = params.tracer_amp * random_band_limited(grid, params.band_limit, rng, slope)
    q = params.tracer_amp * random_band_limited(grid, params.band_limit, rng, slope)

    values = np.zeros(grid.shape)
    values[:, :, grid.variable_channel("u")] = u
    values[:, :, grid.variable_channel("v")] = v
    values[:, :, grid.variable_channel("z")] = z
    values[:, :, grid.variable_channel("q")] = q
    values[:, :, grid.variable_channel("T")] = T
    return StateField(grid, values)


_STAGE_NAMES = ("stage 1 (k1)", "stage 2 (k2)", "stage 3 (k3)", "stage 4 (k4)",
                "combination")


def _rk4_tensor(values: torch.Tensor, grid: GridSpec, params: ToyParams,
                n_steps: int = 1) -> torch.Tensor:
    """Classical 4-stage Runge-Kutta advance of a (..., H, W, C) tensor."""
    dt = params.dt
    x = values
    for _ in range(n_steps):
        k1 = tendencies_tensor(x, grid, params)
        k2 = tendencies_tensor(x + 0.5 * dt * k1, grid, params)
        k3 = tendencies_tensor(x + 0.5 * dt * k2, grid, params)
        k4 = tendencies_tensor(x + dt * k3, grid, params)
        stages = (k1, k2, k3, k4)
        for name, k in zip(_STAGE_NAMES, stages):
            if not torch.isfinite(k).all():
                raise FloatingPointError(f"rk4_step: {name} produced non-finite values")
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"rk4_step: {_STAGE_NAMES[4]} produced non-finite values")
    return x


def rk4_step(state: StateField, params: ToyParams) -> StateField:
    """One RK4 step of the toy system."""
    values = torch.as_tensor(state.values, dtype=torch.float64)
    return StateField(state.grid, _rk4_tensor(values, state.grid, params).numpy())


def _perturb_states(values: torch.Tensor, grid: GridSpec, params: ToyParams,
                    amplitude: float, rng: np.random.Generator) -> torch.Tensor:
    """Add independent band-limited noise per channel at `amplitude` times the
    channel RMS (unbalanced on purpose: forecast error radiates gravity waves)."""
    out = values.clone()
    n = values.shape[0]
    for i in range(n):
        for c in range(grid.C):
            field = random_band_limited(grid, params.band_limit, rng,
                                        params.spectral_slope)
            rms = float(torch.sqrt(torch.mean(values[i, :, :, c] ** 2)))
            out[i, :, :, c] += amplitude * rms * torch.as_tensor(field, dtype=values.dtype)
    return out


def generate_trajectory(grid: GridSpec, params: ToyParams, n_steps: int,
                        spinup: int, seed: int, forecast_lead: int = 20,
                        perturb_amp: float = 0.05,
                        with_backgrounds: bool = True) -> Trajectory:
    """Integrate one trajectory; store `n_steps` states after `spinup` steps.

    When `with_backgrounds` is set, each stored state i also gets a synthetic
    forecast background: the state `forecast_lead` steps earlier, perturbed by
    band-limited noise at `perturb_amp` of per-channel RMS, integrated forward
    `forecast_lead` steps. Requires spinup >= forecast_lead.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if with_backgrounds and spinup < forecast_lead:
        raise ValueError(
            f"spinup ({spinup}) must be >= forecast_lead ({forecast_lead}) "
            f"so every stored state has a forecast source")
    params.check_stable_dt(grid)

    x = torch.as_tensor(balanced_random_state(grid, params, seed).values,
                        dtype=torch.float64)
    # tail[j] ends up holding the state forecast_lead - j steps before stored
    # state 0, so the forecast source of stored state i < forecast_lead is tail[i]
    tail: list[torch.Tensor] = []
    for step in range(spinup):
        if with_backgrounds:
            tail.append(x)
            tail = tail[-forecast_lead:]
        try:
            x = _rk4_tensor(x, grid, params)
        except FloatingPointError as e:
            raise FloatingPointError(f"instability during spinup step {step}: {e}") from e

    states = torch.empty((n_steps,) + grid.shape, dtype=torch.float64)
    for step in range(n_steps):
        states[step] = x
        if step < n_steps - 1:
            try:
                x = _rk4_tensor(x, grid, params)
            except FloatingPointError as e:
                raise FloatingPointError(
                    f"instability in trajectory seed={seed} at stored step "
                    f"{step + 1}: {e}") from e

    backgrounds = None
    if with_backgrounds:
        sources = torch.empty_like(states)
        for i in range(n_steps):
            sources[i] = tail[i] if i < forecast_lead else states[i - forecast_lead]
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x6267)))
        perturbed = _perturb_states(sources, grid, params, perturb_amp, rng)
        backgrounds = _rk4_tensor(perturbed, grid, params, n_steps=forecast_lead)

    res = residual_energy_per_state(states.numpy(), grid, params)
    return Trajectory(states=states.numpy(), dt=params.dt, params=params,
                      seed=seed, grid=grid,
                      backgrounds=None if backgrounds is None else backgrounds.numpy(),
                      residual_norms=res)


def residual_energy_per_state(states: np.ndarray, grid: GridSpec,
                              params: ToyParams) -> np.ndarray:
    """Unit-scale residual energy of each state in (n, H, W, C)."""
    t = torch.as_tensor(states, dtype=torch.float64)
    return np.array([float(residual_energy_tensor(t[i], grid, params))
                     for i in range(t.shape[0])])


def split_indices(n_traj: int) -> dict[str, list[int]]:
    """Deterministic 8:1:1 split by trajectory index."""
    n_train = int(math.floor(0.8 * n_traj))
    n_val = int(math.floor(0.9 * n_traj)) - n_train
    return {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n_traj)),
    }


def generate_dataset(grid: GridSpec, params: ToyParams, n_traj: int,
                     n_steps: int, spinup: int, seed: int, path: str | Path,
                     forecast_lead: int = 20, perturb_amp: float = 0.05,
                     store_dtype: str = "float32") -> dict:
    """Write trajectories (after spinup) with paired forecast backgrounds and
    per-state residual norms; returns the metadata dict.

    The dataset is fully determined by (grid, params, n_traj, n_steps, spinup,
    seed, forecast_lead, perturb_amp): regenerating it is byte-identical.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    path = Path(path)
    splits = split_indices(n_traj)
    dtype = np.dtype(store_dtype)

    traj_seeds = [int(s) for s in
                  np.random.SeedSequence(seed).generate_state(n_traj)]
    with h5py.File(path, "w") as f:
        for ti in range(n_traj):
            traj = generate_trajectory(grid, params, n_steps, spinup,
                                       traj_seeds[ti], forecast_lead,
                                       perturb_amp)
            g = f.create_group(f"traj_{ti:03d}")
            states = traj.states.astype(dtype)
            bgs = traj.backgrounds.astype(dtype)
            storage.create_array(g, "states", states)
            storage.create_array(g, "backgrounds", bgs)
            # residual drift is measured on what is actually stored
            res = residual_energy_per_state(states.astype(np.float64), grid, params)
            storage.create_array(g, "residual_energy", res, labels=("step",))

    meta = {
        "kind": "toy_dataset",
        "grid": grid.to_dict(),
        "params": params.to_dict(),
        "n_traj": n_traj,
        "n_steps": n_steps,
        "spinup": spinup,
        "seed": seed,
        "trajectory_seeds": traj_seeds,
        "forecast_lead": forecast_lead,
        "perturb_amp": perturb_amp,
        "integrator": "rk4",
        "store_dtype": store_dtype,
        "splits": splits,
        "content_hash": storage.hash_h5_arrays(path),
    }
    storage.write_sidecar(path, meta)
    return meta


def load_dataset(path: str | Path):
    """Returns (states, backgrounds, residual_energy) keyed by trajectory
    index, plus the metadata dict."""
    path = Path(path)
    meta = storage.read_sidecar(path)
    states, bgs, res = [], [], []
    with h5py.File(path, "r") as f:
        for ti in range(meta["n_traj"]):
            g = f[f"traj_{ti:03d}"]
            states.append(g["states"][()])
            bgs.append(g["backgrounds"][()])
            res.append(g["residual_energy"][()])
    return states, bgs, res, meta


def load_split(path: str | Path, split: str):
    """Stacked (states, backgrounds) arrays of one split and the metadata."""
    states, bgs, _, meta = load_dataset(path)
    idx = meta["splits"][split]
    if not idx:
        raise ValueError(f"split {split!r} is empty in this dataset")
    s = np.concatenate([states[i] for i in idx], axis=0)
    b = np.concatenate([bgs[i] for i in idx], axis=0)
    return s, b, meta
