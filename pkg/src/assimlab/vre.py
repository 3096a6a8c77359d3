"""Observation conditioning: turn sparse, discontinuous column observations
into multi-scale, attention-refined token maps.

The pipeline is: per-channel normalization with observed-column statistics,
re-zeroing of unobserved columns, an explicit mask input channel, a lift to
d_model channels, a stride-2 convolution pyramid, and token attention at the
scales where full attention is affordable (token count <= attn_max_tokens;
finer scales pass through, which keeps the pyramid usable on small CPUs).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .fields import NormStats, ObservationSet, masked_stats, normalize_values

DEFAULT_ATTN_MAX_TOKENS = 256


@dataclass(eq=False)
class ConditioningBundle:
    """Multi-scale observation tokens plus optional background latent.

    tokens[tau] has shape (B, d_model, H/2^tau, W/2^tau); masks[tau] is the
    observation mask average-pooled to the same extent.
    """

    tokens: list[torch.Tensor]
    masks: list[torch.Tensor]
    background_latent: torch.Tensor | None = None

    def by_size(self, h: int, w: int) -> torch.Tensor | None:
        for tok in self.tokens:
            if tok.shape[-2] == h and tok.shape[-1] == w:
                return tok
        return None


class TokenAttention(nn.Module):
    """Single-head token attention: q, k, v = Linear(z);
    z' = softmax(q k^T / sqrt(C)) v."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.qkv = nn.Linear(channels, 3 * channels)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: (B, n_tokens, C)
        if z.shape[-2] == 0:
            raise ValueError("token_attention requires at least one token")
        q, k, v = self.qkv(z).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.channels), dim=-1)
        return attn @ v

    def attention_rows(self, z: torch.Tensor) -> torch.Tensor:
        """The softmax matrix itself (rows sum to 1); for diagnostics."""
        q, k, _ = self.qkv(z).chunk(3, dim=-1)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.channels), dim=-1)


def max_downsample_depth(H: int, W: int) -> int:
    """Largest M allowed by the stride-2 pyramid: M <= log2(min(H, W)) - 2."""
    return int(math.log2(min(H, W))) - 2


class ObservationEncoder(nn.Module):
    """Virtual-reconstruction encoder over (normalized obs values, mask)."""

    def __init__(self, in_channels: int, d_model: int = 64, M: int = 3,
                 attn_max_tokens: int = DEFAULT_ATTN_MAX_TOKENS):
        super().__init__()
        if M < 0:
            raise ValueError("M must be >= 0")
        self.d_model = d_model
        self.M = M
        self.attn_max_tokens = attn_max_tokens
        self.lift = nn.Conv2d(in_channels + 1, d_model, 3, padding=1,
                              padding_mode="circular")
        self.downs = nn.ModuleList(
            nn.Conv2d(d_model, d_model, 3, stride=2, padding=1,
                      padding_mode="circular")
            for _ in range(M))
        # one attention module per pyramid scale; applied only where the
        # token count is affordable
        self.attn = nn.ModuleList(TokenAttention(d_model) for _ in range(M + 1))

    def _maybe_attend(self, z: torch.Tensor, tau: int) -> torch.Tensor:
        b, d, h, w = z.shape
        if h * w > self.attn_max_tokens:
            return z
        flat = z.flatten(2).transpose(1, 2)  # (B, n_tokens, d)
        out = self.attn[tau](flat)
        return out.transpose(1, 2).reshape(b, d, h, w)

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> ConditioningBundle:
        """values: (B, C, H, W) normalized and zeroed at unobserved columns;
        mask: (B, 1, H, W) in {0, 1}."""
        H, W = values.shape[-2:]
        if self.M > max_downsample_depth(H, W):
            raise ValueError(
                f"M={self.M} exceeds the pyramid bound "
                f"{max_downsample_depth(H, W)} for a {H}x{W} grid")
        if H % (1 << self.M) or W % (1 << self.M):
            raise ValueError("spatial dims must halve exactly at every scale")
        z = self.lift(torch.cat([values, mask], dim=1))
        tokens = [self._maybe_attend(z, 0)]
        masks = [mask]
        for tau, conv in enumerate(self.downs, start=1):
            z = conv(z)
            tokens.append(self._maybe_attend(z, tau))
            masks.append(torch.nn.functional.avg_pool2d(masks[-1], 2))
        return ConditioningBundle(tokens=tokens, masks=masks)


class PlainConvEncoder(nn.Module):
    """Ablation encoder: a plain convolutional stack producing a single-scale
    token map at half resolution, with no multi-scale pyramid and no attention."""

    def __init__(self, in_channels: int, d_model: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels + 1, d_model, 3, padding=1, padding_mode="circular"),
            nn.SiLU(),
            nn.Conv2d(d_model, d_model, 3, stride=2, padding=1, padding_mode="circular"),
            nn.SiLU(),
            nn.Conv2d(d_model, d_model, 3, padding=1, padding_mode="circular"),
        )

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> ConditioningBundle:
        z = self.net(torch.cat([values, mask], dim=1))
        return ConditioningBundle(tokens=[z],
                                  masks=[torch.nn.functional.avg_pool2d(mask, 2)])


def observation_tensors(obs: ObservationSet, stats: NormStats | None = None,
                        dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized, re-zeroed observation values and mask as (1, C, H, W) /
    (1, 1, H, W) tensors ready for an encoder.

    Unobserved columns are forced back to exactly zero after normalization so
    encoder outputs depend on unobserved grid content only through the mask.
    """
    if stats is None:
        stats = masked_stats(obs.values, obs.mask)
    normed = normalize_values(obs.values, stats) * obs.mask[:, :, None]
    values = torch.as_tensor(np.moveaxis(normed, -1, 0)[None], dtype=dtype)
    mask = torch.as_tensor(obs.mask[None, None], dtype=dtype)
    return values, mask


def encode_observations(obs: ObservationSet, encoder: nn.Module,
                        stats: NormStats | None = None) -> ConditioningBundle:
    """Full pipeline for a single observation set, deterministic given the
    encoder weights. Observed-column statistics are used when none are given."""
    values, mask = observation_tensors(obs, stats)
    with torch.no_grad():
        return encoder(values, mask)
