"""Diffusion engine: variance-preserving forward noising, denoising score
matching with a physics-residual regularizer, Euler-Maruyama reverse-SDE
sampling, training with EMA weights, and sparse-observation assimilation.

Conventions: diffusion time t runs over [0, 1]; fields are torch tensors
(B, C, H, W) in normalized units inside the engine; the network predicts the
noise and the score is -eps_hat / sigma(t).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .fields import GridSpec, NormStats, ObservationSet, StateField
from .physics import residual_energy_samples, residual_scales_from_states
from .scorenet import ScoreUNet
from .shallow_water import ToyParams
from .vae import ConvVAE, IdentityCodec
from .vre import ConditioningBundle, ObservationEncoder, PlainConvEncoder

VARIANTS = ("full", "no_prdo", "no_vre", "conv_encoder")


# ---------------------------------------------------------------------------
# schedule and pointwise diffusion algebra


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-preserving schedule with linear beta(t):
    alpha(t) = exp(-0.5 * int_0^t beta), sigma(t) = sqrt(1 - alpha^2)."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1.0e-3

    def __post_init__(self):
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 < beta_min <= beta_max")
        if not (0 < self.t_min < 1):
            raise ValueError("t_min must lie in (0, 1)")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def int_beta(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t ** 2

    def alpha(self, t):
        ib = self.int_beta(t)
        return torch.exp(-0.5 * ib) if torch.is_tensor(ib) else math.exp(-0.5 * ib)

    def sigma(self, t):
        a = self.alpha(t)
        one_m = 1.0 - a ** 2
        return torch.sqrt(torch.clamp(one_m, min=0.0)) if torch.is_tensor(one_m) \
            else math.sqrt(max(one_m, 0.0))

    def to_dict(self) -> dict:
        return {"beta_min": self.beta_min, "beta_max": self.beta_max,
                "t_min": self.t_min}


def _bcast(coef, like: torch.Tensor):
    """Broadcast a per-sample coefficient (B,) over the field axes of `like`."""
    if torch.is_tensor(coef) and coef.ndim == 1:
        return coef.reshape(-1, *([1] * (like.ndim - 1)))
    return coef


def _check_t_range(t) -> None:
    tv = t.detach() if torch.is_tensor(t) else torch.as_tensor(t)
    if bool((tv < 0).any()) or bool((tv > 1).any()):
        raise ValueError("diffusion time t must lie in [0, 1]")


def perturb(x0: torch.Tensor, t, noise: torch.Tensor,
            schedule: DiffusionSchedule) -> torch.Tensor:
    """Forward kernel sample x_t = alpha(t) x0 + sigma(t) noise."""
    _check_t_range(t)
    return _bcast(schedule.alpha(t), x0) * x0 + _bcast(schedule.sigma(t), x0) * noise


def dsm_target(x0: torch.Tensor, x_t: torch.Tensor, t,
               schedule: DiffusionSchedule) -> torch.Tensor:
    """Exact conditional Gaussian score -(x_t - alpha x0) / sigma^2."""
    _check_t_range(t)
    sigma = schedule.sigma(t)
    sv = sigma.detach() if torch.is_tensor(sigma) else torch.as_tensor(sigma)
    if bool((sv == 0).any()):
        raise ValueError("dsm_target undefined at t = 0 (sigma vanishes); "
                         "training samples t in [t_min, 1]")
    return -(x_t - _bcast(schedule.alpha(t), x0) * x0) / _bcast(sigma, x0) ** 2


def score_from_eps(eps_hat: torch.Tensor, t, schedule: DiffusionSchedule) -> torch.Tensor:
    """Noise prediction -> score estimate."""
    return -eps_hat / _bcast(schedule.sigma(t), eps_hat)


def denoise_estimate(x_t: torch.Tensor, t, score: torch.Tensor,
                     schedule: DiffusionSchedule) -> torch.Tensor:
    """Tweedie denoiser x0_hat = (x_t + sigma^2 score) / alpha."""
    _check_t_range(t)
    alpha = schedule.alpha(t)
    av = alpha.detach() if torch.is_tensor(alpha) else torch.as_tensor(alpha)
    if bool((av < 1.0e-8).any()):
        raise ValueError("alpha(t) underflow in denoise_estimate")
    return (x_t + _bcast(schedule.sigma(t), x_t) ** 2 * score) / _bcast(alpha, x_t)


LAMBDA_SHAPES = ("quadratic_decay", "snr_quadratic")


def lambda_schedule(t, lambda0: float, shape: str = "quadratic_decay",
                    schedule: DiffusionSchedule | None = None):
    """Physics weight lambda(t); non-increasing in t with lambda(1) = 0.

    quadratic_decay: lambda0 * (1 - t)^2.
    snr_quadratic:   lambda0 * (1 - t)^2 * alpha(t)^2 -- the extra alpha^2
    cancels the (sigma/alpha)^2 amplification of the Tweedie estimate, so the
    physics pressure per unit of denoiser error is uniform in t instead of
    exploding as t -> 1 (with beta_max = 20 the bare amplification reaches
    e^10 and otherwise drowns the score-matching term).
    """
    if shape not in LAMBDA_SHAPES:
        raise ValueError(f"unknown lambda shape {shape!r}; known: {LAMBDA_SHAPES}")
    lam = lambda0 * (1.0 - t) ** 2
    if shape == "snr_quadratic":
        sched = schedule or DiffusionSchedule()
        lam = lam * sched.alpha(t) ** 2
    return lam


def reverse_step(x: torch.Tensor, t: float, dt: float, score: torch.Tensor,
                 noise: torch.Tensor | None, schedule: DiffusionSchedule,
                 probability_flow: bool = False) -> torch.Tensor:
    """One Euler-Maruyama step of the reverse-time SDE from t to t - dt:

        x <- x - dt * [f(x, t) - c * g(t)^2 * score] + sqrt(g(t)^2 dt) * noise

    with f = -0.5 beta t x, g^2 = beta(t), and c = 1 (c = 1/2 and no noise for
    the deterministic probability-flow variant).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t - dt < -1.0e-12:
        raise ValueError(f"reverse step from t={t} by dt={dt} passes t=0")
    beta = schedule.beta(t)
    drift = -0.5 * beta * x
    c = 0.5 if probability_flow else 1.0
    x_new = x - dt * (drift - c * beta * score)
    if not probability_flow:
        if noise is None:
            raise ValueError("stochastic reverse step needs a noise draw")
        x_new = x_new + math.sqrt(beta * dt) * noise
    return x_new


def gaussian_reference_score(x: torch.Tensor, t, schedule: DiffusionSchedule,
                             mean: float = 0.0, var: float = 1.0) -> torch.Tensor:
    """Closed-form marginal score when the data are N(mean, var I):
    p_t = N(alpha mean, (alpha^2 var + sigma^2) I)."""
    a = schedule.alpha(t)
    s2 = schedule.sigma(t) ** 2
    return -(x - _bcast(a, x) * mean) / (_bcast(a, x) ** 2 * var + _bcast(s2, x))


# ---------------------------------------------------------------------------
# model bundle


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (32, 48, 64)
    stem_width: int = 16  # thin full-res stage; the core starts at half res
    latent_widths: tuple[int, ...] = (48, 64, 96)
    d_model: int = 64
    M: int = 3
    temb_dim: int = 64
    attn_max_tokens: int = 256
    d_latent: int = 8
    vae_depth: int = 2
    vae_width: int = 48

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["widths"] = list(self.widths)
        d["latent_widths"] = list(self.latent_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["latent_widths"] = tuple(d.get("latent_widths", (48, 64, 96)))
        return cls(**d)


class AssimilationModel(nn.Module):
    """Score network + observation encoder + codec, assembled per variant."""

    def __init__(self, grid: GridSpec, mode: str, variant: str,
                 config: ModelConfig):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if mode not in ("pixel", "latent"):
            raise ValueError(f"unknown mode {mode!r}")
        self.grid = grid
        self.mode = mode
        self.variant = variant
        self.config = config

        C = grid.C
        if mode == "latent":
            self.codec: nn.Module = ConvVAE(C, config.d_latent, config.vae_depth,
                                            config.vae_width)
            field_ch = config.d_latent
            widths = config.latent_widths
            stem_width = None  # latent grids are already coarse
        else:
            self.codec = IdentityCodec(C)
            field_ch = C
            widths = config.widths
            stem_width = config.stem_width
        self.score_net = ScoreUNet(field_channels=field_ch, cond_channels=field_ch,
                                   widths=widths, stem_width=stem_width,
                                   temb_dim=config.temb_dim,
                                   d_model=config.d_model,
                                   attn_max_tokens=config.attn_max_tokens)
        if variant == "no_vre":
            self.obs_encoder: nn.Module | None = None
        elif variant == "conv_encoder":
            self.obs_encoder = PlainConvEncoder(C, config.d_model)
        else:
            self.obs_encoder = ObservationEncoder(C, config.d_model, config.M,
                                                  config.attn_max_tokens)

    def encode_obs(self, obs_values: torch.Tensor,
                   obs_mask: torch.Tensor) -> ConditioningBundle | None:
        if self.obs_encoder is None:
            return None
        return self.obs_encoder(obs_values, obs_mask)

    def eps(self, x_t: torch.Tensor, t: torch.Tensor, background: torch.Tensor,
            bundle: ConditioningBundle | None) -> torch.Tensor:
        return self.score_net(x_t, t, background, bundle)

    def score(self, x_t: torch.Tensor, t: torch.Tensor, background: torch.Tensor,
              bundle: ConditioningBundle | None,
              schedule: DiffusionSchedule) -> torch.Tensor:
        return score_from_eps(self.eps(x_t, t, background, bundle), t, schedule)

    def trainable_parameters(self):
        return (p for p in self.parameters() if p.requires_grad)


def build_model(grid: GridSpec, mode: str, variant: str, config: ModelConfig,
                init_seed: int) -> AssimilationModel:
    """Deterministic weight initialization from a dedicated seed."""
    torch.manual_seed(init_seed)
    return AssimilationModel(grid, mode, variant, config)


# ---------------------------------------------------------------------------
# normalization helpers (per-instance reversible stats, batched)


EPS_NORM = 1.0e-5


def instance_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel mean/std over the grid; x: (B, C, H, W)."""
    mu = x.mean(dim=(-2, -1), keepdim=True)
    sigma = x.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return mu, sigma


def masked_instance_stats(values: torch.Tensor, mask: torch.Tensor
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Observed-column stats; values: (B, C, H, W), mask: (B, 1, H, W)."""
    cnt = mask.sum(dim=(-2, -1), keepdim=True).clamp(min=1.0)
    mu = (values * mask).sum(dim=(-2, -1), keepdim=True) / cnt
    var = ((values - mu) ** 2 * mask).sum(dim=(-2, -1), keepdim=True) / cnt
    return mu, torch.sqrt(var.clamp(min=0.0))


# ---------------------------------------------------------------------------
# PRDO loss


def prdo_loss(model: AssimilationModel, schedule: DiffusionSchedule,
              x0: torch.Tensor, background: torch.Tensor,
              bundle: ConditioningBundle | None, t: torch.Tensor,
              noise: torch.Tensor, lambda0: float,
              lambda_shape: str = "quadratic_decay",
              params: ToyParams | None = None,
              residual_scales: dict[str, float] | None = None,
              denorm: tuple[torch.Tensor, torch.Tensor] | None = None
              ) -> dict[str, torch.Tensor]:
    """Score matching plus lambda(t)-weighted residual energy of the denoised
    estimate.

    The score term is sigma(t)^2 ||s - target||^2, computed in its exactly
    equivalent noise-prediction form ||eps_hat - eps||^2. The physics term is
    evaluated on denormalized physical states: `denorm` carries the (mu,
    sigma) tensors of the instance normalization, and in latent mode the
    denoised latent is decoded first. With lambda0 = 0 the physics term is
    reported but kept out of the optimized loss.
    """
    x_t = perturb(x0, t, noise, schedule)
    eps_hat = model.eps(x_t, t, background, bundle)
    score_term = torch.mean((eps_hat - noise) ** 2)

    def physics_energy() -> tuple[torch.Tensor, torch.Tensor]:
        if params is None:
            raise ValueError("physics term requires toy params")
        score = score_from_eps(eps_hat, t, schedule)
        x0_hat = denoise_estimate(x_t, t, score, schedule)
        fields = model.codec.decode(x0_hat)
        if denorm is not None:
            mu, sigma = denorm
            fields = fields * (sigma + EPS_NORM) + mu
        hwc = fields.permute(0, 2, 3, 1)
        energy = residual_energy_samples(hwc, model.grid, params, residual_scales)
        lam = lambda_schedule(t, lambda0, lambda_shape, schedule)
        return torch.mean(lam * energy), torch.mean(energy)

    if lambda0 > 0:
        physics_term, energy = physics_energy()
        loss = score_term + physics_term
    else:
        # reported for diagnostics, never optimized: loss is exactly the
        # score-matching term
        with torch.no_grad():
            physics_term, energy = physics_energy()
        loss = score_term
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite PRDO loss: score={float(score_term)!r} "
            f"physics={float(physics_term)!r} t={t.tolist()}")
    return {"loss": loss, "score_term": score_term,
            "physics_term": physics_term, "residual_energy": energy}


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2.0e-4
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    lambda0: float = 0.1
    lambda_shape: str = "snr_quadratic"
    mode: str = "pixel"
    seed: int = 0
    checkpoint_every: int = 500
    obs_fraction_min: float = 0.005
    obs_fraction_max: float = 0.10
    vae_steps: int = 1500
    vae_lr: float = 1.0e-3
    vae_beta_kl: float = 1.0e-4

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if not (0 <= self.ema_decay < 1):
            raise ValueError("ema_decay must lie in [0, 1)")
        if not (0 < self.obs_fraction_min <= self.obs_fraction_max <= 1):
            raise ValueError("invalid observation fraction range")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        return cls(**d)


class EMAWeights:
    """Exponential moving average over the trainable parameters."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {name: p.detach().clone()
                       for name, p in model.named_parameters() if p.requires_grad}

    def update(self, model: nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name in self.shadow:
                    self.shadow[name].mul_(self.decay).add_(p, alpha=1 - self.decay)

    def copy_to(self, model: nn.Module) -> None:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name in self.shadow:
                    p.copy_(self.shadow[name])

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}

    def load_state_dict(self, state: dict) -> None:
        self.shadow = {k: v.clone() for k, v in state.items()}


class Trainer:
    """Stochastic-gradient optimization of the PRDO loss over a toy dataset.

    All randomness (batch indices, masks, observation fractions, diffusion
    times, noise draws) comes from one numpy generator whose state is saved in
    every checkpoint, so resuming reproduces the next step bit-exactly.
    """

    def __init__(self, model: AssimilationModel, schedule: DiffusionSchedule,
                 params: ToyParams, truth: np.ndarray, backgrounds: np.ndarray,
                 settings: TrainSettings, dataset_hash: str = "",
                 residual_scales: dict[str, float] | None = None,
                 dataset_stats: NormStats | None = None):
        self.model = model
        self.schedule = schedule
        self.params = params
        self.settings = settings
        self.dataset_hash = dataset_hash
        self.grid = model.grid
        # (N, C, H, W) float32 copies of the (N, H, W, C) dataset arrays
        self.truth = torch.as_tensor(np.ascontiguousarray(
            np.moveaxis(truth, -1, 1)), dtype=torch.float32)
        self.backgrounds = torch.as_tensor(np.ascontiguousarray(
            np.moveaxis(backgrounds, -1, 1)), dtype=torch.float32)
        self.residual_scales = residual_scales or residual_scales_from_states(
            truth, self.grid, params)
        if dataset_stats is None:
            flat = truth.reshape(-1, self.grid.C).astype(np.float64)
            dataset_stats = NormStats(flat.mean(axis=0), flat.std(axis=0))
        self.dataset_stats = dataset_stats
        self.rng = np.random.default_rng(np.random.SeedSequence((settings.seed, 0xD1F)))
        self.optimizer = torch.optim.Adam(self.model.trainable_parameters(),
                                          lr=settings.lr)
        self.ema = EMAWeights(self.model, settings.ema_decay)
        self.step_count = 0
        self.history: list[dict[str, float]] = []

    # -- batch construction ------------------------------------------------

    def _sample_masks(self, batch: int) -> torch.Tensor:
        H, W = self.grid.H, self.grid.W
        lo, hi = self.settings.obs_fraction_min, self.settings.obs_fraction_max
        masks = np.zeros((batch, H * W), dtype=np.float32)
        for i in range(batch):
            frac = math.exp(self.rng.uniform(math.log(lo), math.log(hi)))
            n_obs = int(math.floor(frac * H * W))
            idx = self.rng.choice(H * W, size=n_obs, replace=False)
            masks[i, idx] = 1.0
        return torch.from_numpy(masks.reshape(batch, 1, H, W))

    def make_batch(self) -> dict:
        B = self.settings.batch_size
        idx = self.rng.integers(0, self.truth.shape[0], size=B)
        truth_raw = self.truth[idx]
        bg_raw = self.backgrounds[idx]

        mu, sigma = instance_stats(bg_raw)
        x0_n = (truth_raw - mu) / (sigma + EPS_NORM)
        bg_n = (bg_raw - mu) / (sigma + EPS_NORM)

        mask = self._sample_masks(B)
        obs_raw = truth_raw * mask
        mu_o, sigma_o = masked_instance_stats(truth_raw, mask)
        obs_n = ((obs_raw - mu_o) / (sigma_o + EPS_NORM)) * mask

        x0 = x0_n
        bg_cond = bg_n
        if self.model.mode == "latent":
            with torch.no_grad():
                x0 = self.model.codec.encode(x0_n)[0].detach()
                bg_cond = self.model.codec.encode(bg_n)[0].detach()

        t = torch.from_numpy(self.rng.uniform(self.schedule.t_min, 1.0, size=B)
                             .astype(np.float32))
        noise = torch.from_numpy(self.rng.standard_normal(tuple(x0.shape))
                                 .astype(np.float32))
        return {"x0": x0, "bg": bg_cond, "obs_values": obs_n, "obs_mask": mask,
                "t": t, "noise": noise, "denorm": (mu, sigma)}

    # -- optimization ------------------------------------------------------

    def train_step(self) -> dict[str, float]:
        batch = self.make_batch()
        bundle = self.model.encode_obs(batch["obs_values"], batch["obs_mask"])
        out = prdo_loss(self.model, self.schedule, batch["x0"], batch["bg"],
                        bundle, batch["t"], batch["noise"],
                        self.settings.lambda0, self.settings.lambda_shape,
                        self.params, self.residual_scales, batch["denorm"])
        self.optimizer.zero_grad()
        out["loss"].backward()
        if self.settings.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(),
                                           self.settings.grad_clip)
        self.optimizer.step()
        self.ema.update(self.model)
        self.step_count += 1
        record = {"step": self.step_count,
                  "loss": out["loss"].detach().item(),
                  "score_term": out["score_term"].detach().item(),
                  "physics_term": out["physics_term"].detach().item(),
                  "residual_energy": out["residual_energy"].detach().item()}
        self.history.append(record)
        return record

    def run(self, checkpoint_path: str | Path | None = None,
            loss_csv: str | Path | None = None, log_every: int = 0) -> None:
        """Train to settings.steps, checkpointing at fixed intervals; a
        non-finite loss aborts with the last good checkpoint preserved."""
        csv_writer = _LossLog(loss_csv) if loss_csv else None
        try:
            while self.step_count < self.settings.steps:
                try:
                    record = self.train_step()
                except FloatingPointError as e:
                    raise RuntimeError(
                        f"training aborted at step {self.step_count + 1}: {e}; "
                        f"last good checkpoint: {checkpoint_path}") from e
                if csv_writer:
                    csv_writer.append(record)
                if log_every and record["step"] % log_every == 0:
                    print(f"step {record['step']}/{self.settings.steps} "
                          f"loss {record['loss']:.4f} "
                          f"score {record['score_term']:.4f} "
                          f"physics {record['physics_term']:.5f}")
                if (checkpoint_path and
                        record["step"] % self.settings.checkpoint_every == 0):
                    self.save_checkpoint(checkpoint_path)
            if checkpoint_path:
                self.save_checkpoint(checkpoint_path)
        finally:
            if csv_writer:
                csv_writer.close()

    # -- persistence ---------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        payload = {
            "format": 1,
            "variant": self.model.variant,
            "mode": self.model.mode,
            "grid": self.grid.to_dict(),
            "toy_params": self.params.to_dict(),
            "schedule": self.schedule.to_dict(),
            "model_config": self.model.config.to_dict(),
            "norm_stats": self.dataset_stats.to_dict(),
            "residual_scales": dict(self.residual_scales),
            "state_dict": self.model.state_dict(),
            "ema_state_dict": self.ema.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "step": self.step_count,
            "dataset_hash": self.dataset_hash,
            "train_settings": self.settings.to_dict(),
        }
        torch.save(payload, path)

    def restore(self, payload: dict) -> None:
        self.model.load_state_dict(payload["state_dict"])
        self.ema.load_state_dict(payload["ema_state_dict"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.rng.bit_generator.state = payload["rng_state"]
        self.step_count = payload["step"]


class _LossLog:
    FIELDS = ("step", "loss", "score_term", "physics_term", "residual_energy")

    def __init__(self, path: str | Path):
        path = Path(path)
        new = not path.exists()
        self._fh = open(path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.FIELDS)
        if new:
            self._writer.writeheader()

    def append(self, record: dict) -> None:
        self._writer.writerow({k: record[k] for k in self.FIELDS})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# checkpoint loading and assimilation


@dataclass(eq=False)
class LoadedModel:
    """Everything needed to reproduce evaluation from a checkpoint."""

    model: AssimilationModel  # EMA weights applied
    schedule: DiffusionSchedule
    params: ToyParams
    grid: GridSpec
    residual_scales: dict[str, float]
    dataset_stats: NormStats
    variant: str
    mode: str
    step: int
    dataset_hash: str
    train_settings: dict


def load_model(path: str | Path, use_ema: bool = True) -> LoadedModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    grid = GridSpec.from_dict(payload["grid"])
    config = ModelConfig.from_dict(payload["model_config"])
    model = AssimilationModel(grid, payload["mode"], payload["variant"], config)
    model.load_state_dict(payload["state_dict"])
    if use_ema:
        ema = EMAWeights(model, 0.0)
        ema.load_state_dict(payload["ema_state_dict"])
        ema.copy_to(model)
    model.eval()
    return LoadedModel(
        model=model,
        schedule=DiffusionSchedule(**payload["schedule"]),
        params=ToyParams.from_dict(payload["toy_params"]),
        grid=grid,
        residual_scales=dict(payload["residual_scales"]),
        dataset_stats=NormStats.from_dict(payload["norm_stats"]),
        variant=payload["variant"],
        mode=payload["mode"],
        step=payload["step"],
        dataset_hash=payload["dataset_hash"],
        train_settings=dict(payload["train_settings"]),
    )


def resume_trainer(path: str | Path, truth: np.ndarray, backgrounds: np.ndarray
                   ) -> Trainer:
    """Rebuild a trainer from a checkpoint; the next step reproduces what an
    uninterrupted run would have computed."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    grid = GridSpec.from_dict(payload["grid"])
    config = ModelConfig.from_dict(payload["model_config"])
    model = AssimilationModel(grid, payload["mode"], payload["variant"], config)
    trainer = Trainer(model, DiffusionSchedule(**payload["schedule"]),
                      ToyParams.from_dict(payload["toy_params"]),
                      truth, backgrounds,
                      TrainSettings.from_dict(payload["train_settings"]),
                      dataset_hash=payload["dataset_hash"],
                      residual_scales=dict(payload["residual_scales"]),
                      dataset_stats=NormStats.from_dict(payload["norm_stats"]))
    trainer.restore(payload)
    return trainer


def _per_state_noise(rngs: list[np.random.Generator], shape: tuple[int, ...]
                     ) -> torch.Tensor:
    draws = [rng.standard_normal(shape).astype(np.float32) for rng in rngs]
    return torch.from_numpy(np.stack(draws))


def sample_reverse(model: AssimilationModel, schedule: DiffusionSchedule,
                   background: torch.Tensor, bundle: ConditioningBundle | None,
                   steps: int, seeds: list[int],
                   probability_flow: bool = False) -> torch.Tensor:
    """Run the reverse SDE from pure noise for a batch of states; each state
    has its own noise stream, so results are independent of batching."""
    B = background.shape[0]
    if len(seeds) != B:
        raise ValueError("one seed per state required")
    rngs = [np.random.default_rng(np.random.SeedSequence((int(s), 0x5A11)))
            for s in seeds]
    shape = tuple(background.shape[1:])
    x = _per_state_noise(rngs, shape)
    ts = np.linspace(1.0, schedule.t_min, steps + 1)
    with torch.no_grad():
        for i in range(steps):
            t_now, t_next = float(ts[i]), float(ts[i + 1])
            t_batch = torch.full((B,), t_now, dtype=x.dtype)
            score = model.score(x, t_batch, background, bundle, schedule)
            noise = None if probability_flow else _per_state_noise(rngs, shape)
            x = reverse_step(x, t_now, t_now - t_next, score, noise, schedule,
                             probability_flow)
            if not torch.isfinite(x).all():
                raise FloatingPointError(
                    f"non-finite state during reverse sampling at step {i + 1}")
        t_batch = torch.full((B,), float(ts[-1]), dtype=x.dtype)
        score = model.score(x, t_batch, background, bundle, schedule)
        x0_hat = denoise_estimate(x, float(ts[-1]), score, schedule)
    return x0_hat


def assimilate(loaded: LoadedModel, background: StateField, obs: ObservationSet,
               steps: int = 200, seed: int = 0,
               probability_flow: bool = False) -> StateField:
    """Reconstruct an analysis from a forecast background and sparse column
    observations; deterministic given the seed."""
    out = assimilate_batch(loaded, background.values[None], obs.values[None],
                           obs.mask[None], steps=steps, seeds=[seed],
                           probability_flow=probability_flow)
    return StateField(background.grid, out[0])


def assimilate_batch(loaded: LoadedModel, backgrounds: np.ndarray,
                     obs_values: np.ndarray, obs_masks: np.ndarray,
                     steps: int = 200, seeds: list[int] | None = None,
                     probability_flow: bool = False) -> np.ndarray:
    """Vectorized assimilation of (n, H, W, C) backgrounds with matching
    observations; per-state seeds keep each analysis independent of batching."""
    grid = loaded.grid
    if backgrounds.shape[1:] != grid.shape:
        raise ValueError(
            f"background shape {backgrounds.shape[1:]} does not match the "
            f"checkpoint grid {grid.shape}")
    n = backgrounds.shape[0]
    seeds = list(range(n)) if seeds is None else list(seeds)

    bg_raw = torch.as_tensor(np.ascontiguousarray(np.moveaxis(backgrounds, -1, 1)),
                             dtype=torch.float32)
    mask = torch.as_tensor(obs_masks[:, None], dtype=torch.float32)
    obs_raw = torch.as_tensor(np.ascontiguousarray(np.moveaxis(obs_values, -1, 1)),
                              dtype=torch.float32)

    mu, sigma = instance_stats(bg_raw)
    bg_n = (bg_raw - mu) / (sigma + EPS_NORM)
    mu_o, sigma_o = masked_instance_stats(obs_raw, mask)
    obs_n = ((obs_raw - mu_o) / (sigma_o + EPS_NORM)) * mask

    with torch.no_grad():
        bundle = loaded.model.encode_obs(obs_n, mask)
        bg_cond = bg_n
        if loaded.mode == "latent":
            bg_cond = loaded.model.codec.encode(bg_n)[0]
        x0_hat = sample_reverse(loaded.model, loaded.schedule, bg_cond, bundle,
                                steps, seeds, probability_flow)
        fields = loaded.model.codec.decode(x0_hat)
        analysis = fields * (sigma + EPS_NORM) + mu
    return np.moveaxis(analysis.numpy().astype(np.float64), 1, -1)
