"""Grid geometry, channel layout, reversible per-channel normalization, and
observation masking shared by every other module.

State tensors are stored (H, W, C) with H the latitude-like row axis, W the
longitude-like column axis, and C = P*K + s channels laid out row-major by
(level, variable) with surface variables occupying the last s channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TOY_VARIABLES = ("u", "v", "z", "q", "T")


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Grid geometry and channel layout of a gridded state."""

    H: int
    W: int
    P: int
    K: int
    s: int = 0
    latitudes: np.ndarray | None = None  # degrees, length H
    Lx: float = 1.0e6  # meters, doubly periodic
    Ly: float = 1.0e6
    f0: float = 1.0e-4  # 1/s
    variables: tuple[str, ...] = ()  # per-level variable names, length K
    surface_variables: tuple[str, ...] = ()  # length s

    def __post_init__(self):
        if self.H < 2 or self.W < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.H}x{self.W}")
        if self.P < 0 or self.K < 0 or self.s < 0:
            raise ValueError("P, K, s must be non-negative")
        if self.C <= 0:
            raise ValueError("C = P*K + s must be positive")
        if self.Lx <= 0 or self.Ly <= 0:
            raise ValueError("domain lengths must be positive")
        lats = self.latitudes
        if lats is None:
            lats = np.zeros(self.H)
        lats = np.asarray(lats, dtype=np.float64)
        if lats.shape != (self.H,):
            raise ValueError(f"latitudes must have length H={self.H}")
        if np.any(lats <= -90.0) or np.any(lats >= 90.0):
            raise ValueError("latitudes must lie strictly within (-90, 90)")
        object.__setattr__(self, "latitudes", lats)
        if self.variables and len(self.variables) != self.K:
            raise ValueError("variables must name exactly K per-level variables")
        if self.surface_variables and len(self.surface_variables) != self.s:
            raise ValueError("surface_variables must name exactly s variables")

    @property
    def C(self) -> int:
        return self.P * self.K + self.s

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.H, self.W, self.C)

    def is_power_of_two(self) -> bool:
        """True when both spatial extents are powers of two and >= 16.

        Spectral differentiation and stride-2 downsampling require this; it is
        checked at those entry points rather than at construction so that
        non-dyadic grids (e.g. a 121x240 reanalysis layout) remain usable for
        masking and metrics.
        """
        ok = lambda n: n >= 16 and (n & (n - 1)) == 0
        return ok(self.H) and ok(self.W)

    def channel_index(self, level: int, variable: int) -> int:
        """Channel of per-level variable `variable` at pressure level `level`."""
        if not (0 <= level < self.P):
            raise IndexError(f"level {level} out of range [0, {self.P})")
        if not (0 <= variable < self.K):
            raise IndexError(f"variable {variable} out of range [0, {self.K})")
        return level * self.K + variable

    def surface_channel_index(self, variable: int) -> int:
        if not (0 <= variable < self.s):
            raise IndexError(f"surface variable {variable} out of range [0, {self.s})")
        return self.P * self.K + variable

    def channel_location(self, channel: int) -> tuple[str, int, int]:
        """Inverse lookup: channel -> ("level", p, k) or ("surface", 0, i)."""
        if not (0 <= channel < self.C):
            raise IndexError(f"channel {channel} out of range [0, {self.C})")
        if channel < self.P * self.K:
            return ("level", channel // self.K, channel % self.K)
        return ("surface", 0, channel - self.P * self.K)

    def channel_names(self) -> list[str]:
        """Serializable channel map; bijective over exactly C channels."""
        names = []
        for p in range(self.P):
            for k in range(self.K):
                var = self.variables[k] if self.variables else f"var{k}"
                names.append(f"{var}_p{p}" if self.P > 1 else var)
        for i in range(self.s):
            sv = self.surface_variables[i] if self.surface_variables else f"sfc{i}"
            names.append(sv)
        return names

    def variable_channel(self, name: str, level: int = 0) -> int:
        """Channel of a named variable (per-level names first, then surface)."""
        if self.variables and name in self.variables:
            return self.channel_index(level, self.variables.index(name))
        if self.surface_variables and name in self.surface_variables:
            return self.surface_channel_index(self.surface_variables.index(name))
        raise KeyError(f"unknown variable {name!r}")

    def to_dict(self) -> dict:
        return {
            "H": self.H, "W": self.W, "P": self.P, "K": self.K, "s": self.s,
            "latitudes": [float(v) for v in self.latitudes],
            "Lx": self.Lx, "Ly": self.Ly, "f0": self.f0,
            "variables": list(self.variables),
            "surface_variables": list(self.surface_variables),
            "channel_map": self.channel_names(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            H=int(d["H"]), W=int(d["W"]), P=int(d["P"]), K=int(d["K"]), s=int(d["s"]),
            latitudes=np.asarray(d["latitudes"], dtype=np.float64),
            Lx=float(d["Lx"]), Ly=float(d["Ly"]), f0=float(d["f0"]),
            variables=tuple(d.get("variables", ())),
            surface_variables=tuple(d.get("surface_variables", ())),
        )


def toy_grid(H: int = 64, W: int = 64, Lx: float = 1.0e6, Ly: float = 1.0e6,
             f0: float = 1.5e-4, lat_span: float = 60.0) -> GridSpec:
    """Default desk-scale grid: single level, five variables (u, v, z, q, T).

    Rows carry synthetic latitudes spanning (-lat_span, lat_span) so the
    latitude-weighted metrics are exercised nontrivially; lat_span=0 gives
    uniform latitudes and plain RMSE.
    """
    lats = np.linspace(-lat_span, lat_span, H) if lat_span > 0 else np.zeros(H)
    return GridSpec(H=H, W=W, P=1, K=5, s=0, latitudes=lats,
                    Lx=Lx, Ly=Ly, f0=f0, variables=TOY_VARIABLES)


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(eq=False)
class StateField:
    """Dense grid tensor (H, W, C): background, truth, or analysis."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} != grid shape {self.grid.shape}")
        _check_finite(self.values, "StateField values")

    def channel(self, name: str, level: int = 0) -> np.ndarray:
        """2-D view of a named channel."""
        return self.values[:, :, self.grid.variable_channel(name, level)]

    def copy(self) -> "StateField":
        return StateField(self.grid, self.values.copy())


@dataclass(eq=False)
class ObservationSet:
    """Sparse column observations: zero-filled values plus a 2-D column mask."""

    values: np.ndarray  # (H, W, C), exactly zero at unobserved columns
    mask: np.ndarray  # (H, W), entries in {0, 1}
    fraction: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.mask = np.asarray(self.mask)
        if self.values.ndim != 3 or self.mask.shape != self.values.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} incompatible with values "
                f"shape {self.values.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        _check_finite(self.values, "ObservationSet values")
        unobserved = self.mask == 0
        if np.any(self.values[unobserved] != 0):
            raise ValueError("values at unobserved columns must be exactly zero")

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-channel mean/std with a stabilizer, enabling exact denormalization."""

    mu: np.ndarray  # (C,)
    sigma: np.ndarray  # (C,)
    epsilon: float = 1.0e-5

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64))
        if self.mu.ndim != 1 or self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must be 1-D and the same length")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mu"]), np.asarray(d["sigma"]), float(d["epsilon"]))


def compute_stats(state: StateField, epsilon: float = 1.0e-5) -> NormStats:
    """Per-channel mean and std over all H*W grid points (per variable and
    per pressure level independently)."""
    _check_finite(state.values, "compute_stats input")
    v = state.values.reshape(-1, state.grid.C).astype(np.float64)
    return NormStats(mu=v.mean(axis=0), sigma=v.std(axis=0), epsilon=epsilon)


def masked_stats(values: np.ndarray, mask: np.ndarray,
                 epsilon: float = 1.0e-5) -> NormStats:
    """Per-channel stats over observed columns only (mask == 1).

    Used to normalize observations: the unobserved zero fill must not bias
    the statistics.
    """
    _check_finite(values, "masked_stats input")
    sel = np.asarray(mask) == 1
    if not sel.any():
        C = values.shape[-1]
        return NormStats(mu=np.zeros(C), sigma=np.zeros(C), epsilon=epsilon)
    pts = values[sel].astype(np.float64)  # (n_obs, C)
    return NormStats(mu=pts.mean(axis=0), sigma=pts.std(axis=0), epsilon=epsilon)


def _stats_compatible(values: np.ndarray, stats: NormStats) -> None:
    if values.shape[-1] != stats.mu.shape[0]:
        raise ValueError(
            f"stats for {stats.mu.shape[0]} channels, field has {values.shape[-1]}")


def normalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    _stats_compatible(values, stats)
    return (values - stats.mu) / (stats.sigma + stats.epsilon)


def denormalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    _stats_compatible(values, stats)
    return values * (stats.sigma + stats.epsilon) + stats.mu


def normalize(state: StateField, stats: NormStats) -> StateField:
    """(x - mu) / (sigma + epsilon), per channel."""
    return StateField(state.grid, normalize_values(state.values, stats))


def denormalize(state: StateField, stats: NormStats) -> StateField:
    """Exact algebraic inverse of :func:`normalize`."""
    return StateField(state.grid, denormalize_values(state.values, stats))


def sample_mask(grid: GridSpec, fraction: float, seed: int) -> np.ndarray:
    """Uniform-without-replacement column mask with exactly
    floor(fraction * H * W) observed columns; deterministic for a fixed seed."""
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n_cols = grid.H * grid.W
    n_obs = int(math.floor(fraction * n_cols))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n_cols, size=n_obs, replace=False)
    mask = np.zeros(n_cols, dtype=np.uint8)
    mask[chosen] = 1
    return mask.reshape(grid.H, grid.W)


def apply_mask(truth: StateField, mask: np.ndarray,
               fraction: float | None = None) -> ObservationSet:
    """Copy all C channels at observed columns; zero elsewhere (the 2-D mask
    broadcasts over channels)."""
    mask = np.asarray(mask)
    if mask.shape != (truth.grid.H, truth.grid.W):
        raise ValueError(
            f"mask shape {mask.shape} != grid {(truth.grid.H, truth.grid.W)}")
    values = truth.values * mask[:, :, None]
    if fraction is None:
        fraction = float(mask.sum()) / mask.size
    return ObservationSet(values=values, mask=mask.astype(np.uint8),
                          fraction=fraction)
