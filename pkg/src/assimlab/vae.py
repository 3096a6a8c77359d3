"""Small convolutional variational autoencoder mapping normalized states to a
compact latent space, plus the exact pixel-space bypass used by default.

The diffusion engine talks to either through the same codec interface:
`encode` returns (mean, logvar), `decode` maps latents back to fields.
"""
from __future__ import annotations

import torch
from torch import nn


class IdentityCodec(nn.Module):
    """Pixel-space bypass: encode/decode are identity maps, logvar is zero."""

    downsample_factor = 1

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.latent_channels = channels

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return x, torch.zeros_like(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


class ConvVAE(nn.Module):
    """Encoder: L stride-2 conv stages to (H/2^L, W/2^L, d_latent) mean/logvar.
    Decoder mirrors with nearest-neighbor upsampling."""

    def __init__(self, channels: int, d_latent: int = 8, depth: int = 2,
                 width: int = 48):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.channels = channels
        self.latent_channels = d_latent
        self.depth = depth
        self.downsample_factor = 1 << depth

        enc: list[nn.Module] = [nn.Conv2d(channels, width, 3, padding=1,
                                          padding_mode="circular"), nn.SiLU()]
        for _ in range(depth):
            enc += [nn.Conv2d(width, width, 3, stride=2, padding=1,
                              padding_mode="circular"), nn.SiLU()]
        enc += [nn.Conv2d(width, 2 * d_latent, 3, padding=1, padding_mode="circular")]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(d_latent, width, 3, padding=1,
                                          padding_mode="circular"), nn.SiLU()]
        for _ in range(depth):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, width, 3, padding=1, padding_mode="circular"),
                    nn.SiLU()]
        dec += [nn.Conv2d(width, channels, 3, padding=1, padding_mode="circular")]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, C, H, W) normalized state -> deterministic (mean, logvar)."""
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean, _ = self.encode(x)
        return self.decode(mean)


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mean, exp(logvar)) || N(0, I)) per latent unit,
    averaged over all units: 0.5 * (mu^2 + sigma^2 - log sigma^2 - 1)."""
    return 0.5 * torch.mean(mean ** 2 + torch.exp(logvar) - logvar - 1.0)


def vae_loss(model: ConvVAE, batch: torch.Tensor, noise: torch.Tensor,
             beta_kl: float = 1.0e-4) -> dict[str, torch.Tensor]:
    """Reconstruction MSE plus beta_kl * KL, with caller-supplied noise for
    the reparameterized sample."""
    mean, logvar = model.encode(batch)
    z = mean + torch.exp(0.5 * logvar) * noise
    recon = model.decode(z)
    rec = torch.mean((recon - batch) ** 2)
    kl = kl_divergence(mean, logvar)
    return {"loss": rec + beta_kl * kl, "reconstruction": rec, "kl": kl}


def reconstruction_rel_l2(model: ConvVAE, batch: torch.Tensor) -> float:
    """Relative L2 error of the deterministic mean-path round trip."""
    with torch.no_grad():
        recon = model(batch)
        num = torch.linalg.vector_norm(recon - batch)
        den = torch.linalg.vector_norm(batch)
    return float(num / den)


def train_vae(model: ConvVAE, data: torch.Tensor, steps: int, batch_size: int,
              lr: float, seed: int, beta_kl: float = 1.0e-4,
              log_every: int = 0) -> list[float]:
    """Adam training loop over (N, C, H, W) data; returns the loss history."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    n = data.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        batch = data[idx]
        noise = torch.randn(batch.shape[0], model.latent_channels,
                            batch.shape[2] // model.downsample_factor,
                            batch.shape[3] // model.downsample_factor,
                            generator=gen)
        out = vae_loss(model, batch, noise, beta_kl)
        opt.zero_grad()
        out["loss"].backward()
        opt.step()
        history.append(float(out["loss"]))
        if log_every and (step + 1) % log_every == 0:
            print(f"vae step {step + 1}/{steps} loss {history[-1]:.5f}")
    return history
