"""Conditional score network: a U-shaped convolutional net over the noisy
field concatenated channel-wise with the background, with a sinusoidal time
embedding and observation-token injection at each resolution.

Tokens are injected by cross-attention where the token count is small enough
for full attention (<= attn_max_tokens) and by a pointwise concat-projection
at finer scales. To keep full-resolution compute affordable the core levels
can start at half resolution behind a thin full-res refinement stage
(stem_width). The network predicts the noise; the score is obtained by
dividing by -sigma(t) (see diffusion.score_from_eps).
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .vre import ConditioningBundle


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal features of diffusion time t in [0, 1]; (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype,
                                                        device=t.device) / (half - 1))
    ang = t[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _conv3(ci: int, co: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(ci, co, 3, stride=stride, padding=1, padding_mode="circular")


class ResidualBlock(nn.Module):
    def __init__(self, ci: int, co: int, temb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, ci), ci)
        self.conv1 = _conv3(ci, co)
        self.time_proj = nn.Linear(temb_dim, co)
        self.norm2 = nn.GroupNorm(min(groups, co), co)
        self.conv2 = _conv3(co, co)
        self.skip = nn.Conv2d(ci, co, 1) if ci != co else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionInject(nn.Module):
    """Feature tokens attend to observation tokens; residual update."""

    def __init__(self, d_feat: int, d_tok: int):
        super().__init__()
        self.d_feat = d_feat
        self.norm_q = nn.LayerNorm(d_feat)
        self.norm_kv = nn.LayerNorm(d_tok)
        self.q = nn.Linear(d_feat, d_feat)
        self.k = nn.Linear(d_tok, d_feat)
        self.v = nn.Linear(d_tok, d_feat)
        self.out = nn.Linear(d_feat, d_feat)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.q(self.norm_q(x.flatten(2).transpose(1, 2)))
        kv = self.norm_kv(tokens.flatten(2).transpose(1, 2))
        k, v = self.k(kv), self.v(kv)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d_feat), dim=-1)
        y = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + y


class ConcatInject(nn.Module):
    """Pointwise residual injection of spatially aligned tokens."""

    def __init__(self, d_feat: int, d_tok: int):
        super().__init__()
        self.proj = nn.Conv2d(d_feat + d_tok, d_feat, 1)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return x + self.proj(torch.cat([x, tokens], dim=1))


class _Inject(nn.Module):
    """Scale-matched token injection: cross-attention at coarse scales,
    concat-projection where full attention is unaffordable."""

    def __init__(self, d_feat: int, d_tok: int, attn_max_tokens: int):
        super().__init__()
        self.attn_max_tokens = attn_max_tokens
        self.attn = CrossAttentionInject(d_feat, d_tok)
        self.concat = ConcatInject(d_feat, d_tok)

    def forward(self, x: torch.Tensor, bundle: ConditioningBundle | None) -> torch.Tensor:
        if bundle is None:
            return x
        tokens = bundle.by_size(x.shape[-2], x.shape[-1])
        if tokens is None:
            return x
        if x.shape[-2] * x.shape[-1] <= self.attn_max_tokens:
            return self.attn(x, tokens)
        return self.concat(x, tokens)


class ScoreUNet(nn.Module):
    """U-net over (x_t, background) with token injection on the way down and
    at the bottleneck. Output has the shape of x_t.

    With stem_width set, a thin full-resolution stage wraps a core that runs
    from half resolution down: pre-conv -> (inject) -> strided entry ->
    U-net core -> upsample -> residual refinement -> head.
    """

    def __init__(self, field_channels: int, cond_channels: int,
                 widths: tuple[int, ...] = (32, 48, 64),
                 stem_width: int | None = 16,
                 temb_dim: int = 64, d_model: int = 64,
                 attn_max_tokens: int = 256):
        super().__init__()
        self.field_channels = field_channels
        self.widths = tuple(widths)
        self.stem_width = stem_width
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, 4 * temb_dim), nn.SiLU(),
                                      nn.Linear(4 * temb_dim, temb_dim))
        self.temb_dim = temb_dim
        in_ch = field_channels + cond_channels

        if stem_width is not None:
            self.pre = _conv3(in_ch, stem_width)
            self.pre_inject = _Inject(stem_width, d_model, attn_max_tokens)
            self.entry = _conv3(stem_width, widths[0], stride=2)
        else:
            self.entry = _conv3(in_ch, widths[0])

        self.down_blocks = nn.ModuleList()
        self.down_inject = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            self.down_blocks.append(ResidualBlock(w, w, temb_dim))
            self.down_inject.append(_Inject(w, d_model, attn_max_tokens))
            if i < len(widths) - 1:
                self.downsamples.append(_conv3(w, widths[i + 1], stride=2))

        wb = widths[-1]
        self.mid_block1 = ResidualBlock(wb, wb, temb_dim)
        self.mid_inject = _Inject(wb, d_model, attn_max_tokens)
        self.mid_block2 = ResidualBlock(wb, wb, temb_dim)

        self.up_convs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.up_convs.append(_conv3(widths[i], widths[i - 1]))
            self.up_blocks.append(ResidualBlock(2 * widths[i - 1], widths[i - 1], temb_dim))

        if stem_width is not None:
            self.exit_conv = _conv3(widths[0], stem_width)
            self.refine = ResidualBlock(2 * stem_width, stem_width, temb_dim,
                                        groups=min(8, stem_width))
            head_in = stem_width
        else:
            head_in = widths[0]
        self.head_norm = nn.GroupNorm(min(8, head_in), head_in)
        self.head = _conv3(head_in, field_channels)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, background: torch.Tensor,
                bundle: ConditioningBundle | None = None) -> torch.Tensor:
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.temb_dim))
        h = torch.cat([x_t, background], dim=1)
        pre = None
        if self.stem_width is not None:
            pre = self.pre_inject(self.pre(h), bundle)
            h = self.entry(pre)
        else:
            h = self.entry(h)

        skips = []
        for i, (block, inject) in enumerate(zip(self.down_blocks, self.down_inject)):
            h = block(h, temb)
            h = inject(h, bundle)
            if i < len(self.downsamples):  # deepest level feeds the middle directly
                skips.append(h)
                h = self.downsamples[i](h)
        h = self.mid_block1(h, temb)
        h = self.mid_inject(h, bundle)
        h = self.mid_block2(h, temb)
        for conv, block in zip(self.up_convs, self.up_blocks):
            h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1), temb)

        if self.stem_width is not None:
            h = self.exit_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.refine(torch.cat([h, pre], dim=1), temb)
        return self.head(F.silu(self.head_norm(h)))
