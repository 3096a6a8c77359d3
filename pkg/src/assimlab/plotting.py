"""Static plot emission: loss curves, field-map triptychs with shared color
limits, residual maps, spectrum overlays, sparsity-sweep curves, and ablation
bars. All outputs are PNG files; there is no interactive UI.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import power_spectrum


def loss_plot(loss_csv: str | Path, out_png: str | Path) -> Path:
    steps, loss, score, physics = [], [], [], []
    with open(loss_csv) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            loss.append(float(row["loss"]))
            score.append(float(row["score_term"]))
            physics.append(float(row["physics_term"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, loss, label="total", lw=1.0)
    ax.plot(steps, score, label="score matching", lw=0.8)
    if any(p > 0 for p in physics):
        ax.plot(steps, physics, label="physics", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def field_map_plot(truth: np.ndarray, background: np.ndarray,
                   analysis: np.ndarray, channel_name: str,
                   out_png: str | Path) -> Path:
    """Truth / background / analysis with one shared colorbar, plus the
    analysis - truth residual map and a radial spectrum overlay."""
    fields = {"truth": truth, "background": background, "analysis": analysis}
    vmin = min(f.min() for f in fields.values())
    vmax = max(f.max() for f in fields.values())

    fig, axes = plt.subplots(1, 5, figsize=(19, 3.6))
    for ax, (name, f) in zip(axes[:3], fields.items()):
        im = ax.imshow(f, vmin=vmin, vmax=vmax, cmap="RdBu_r", origin="lower")
        ax.set_title(f"{name} ({channel_name})")
        ax.set_xticks([]), ax.set_yticks([])
    fig.colorbar(im, ax=axes[:3], shrink=0.85)

    resid = analysis - truth
    lim = max(abs(resid.min()), abs(resid.max()), 1e-30)
    im2 = axes[3].imshow(resid, vmin=-lim, vmax=lim, cmap="PuOr", origin="lower")
    axes[3].set_title("analysis - truth")
    axes[3].set_xticks([]), axes[3].set_yticks([])
    fig.colorbar(im2, ax=axes[3], shrink=0.85)

    ax = axes[4]
    for name, f in fields.items():
        sp = power_spectrum(f)
        ax.loglog(sp.wavenumbers, sp.power, label=name, lw=0.9)
    ax.set_xlabel("wavenumber")
    ax.set_ylabel("normalized power")
    ax.legend(fontsize=7)
    fig.savefig(out_png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return Path(out_png)


def sweep_plot(fractions: list[float], series: dict[str, list[float]],
               ylabel: str, out_png: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in series.items():
        ax.plot(fractions, values, marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("observed fraction")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def ablation_bars(metrics: dict[str, dict[str, float]], metric_names: list[str],
                  out_png: str | Path) -> Path:
    """Grouped bars: one group per metric, one bar per variant."""
    variants = list(metrics)
    x = np.arange(len(metric_names))
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(1.8 * len(metric_names) + 2, 4))
    for i, variant in enumerate(variants):
        vals = [metrics[variant].get(m, np.nan) for m in metric_names]
        ax.bar(x + i * width, vals, width, label=variant)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(metric_names, rotation=20, ha="right", fontsize=8)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
