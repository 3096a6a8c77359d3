"""Reproducible experiment commands: dataset generation, training,
assimilation of a test split, metric reports, the ablation protocol, the
sparsity sweep, and plot emission.

Every artifact embeds the config hash and the seeds that produced it, and is
byte-stable across reruns with identical inputs.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import h5py
import numpy as np
import torch

from . import plotting, storage
from .config import ExperimentConfig
from .diffusion import (VARIANTS, Trainer, assimilate_batch, build_model,
                        load_model, resume_trainer)
from .fields import GridSpec, NormStats, StateField, sample_mask
from .metrics import lat_weighted_rmse, mae, mse, spec_div
from .shallow_water import generate_dataset, load_split
from .vae import reconstruction_rel_l2, train_vae


class CommandError(RuntimeError):
    """Validation failure that should end the process with a nonzero exit."""


def _require_absent(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CommandError(f"{path} exists; pass --force to overwrite")


def _dataset_path(config: ExperimentConfig) -> Path:
    return Path(config.out_dir) / "dataset.h5"


def checkpoint_path(config: ExperimentConfig, variant: str, seed: int) -> Path:
    return Path(config.out_dir) / "checkpoints" / f"{variant}_seed{seed}.pt"


# ---------------------------------------------------------------------------
# generate-data


def cmd_generate_data(config: ExperimentConfig, force: bool = False) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = _dataset_path(config)
    _require_absent(path, force)
    grid = config.grid.build(config.toy.f0)
    meta = generate_dataset(grid, config.toy, config.data.n_traj,
                            config.data.n_steps, config.data.spinup,
                            config.data.seed, path,
                            forecast_lead=config.data.forecast_lead,
                            perturb_amp=config.data.perturb_amp)
    meta["config_hash"] = config.config_hash()
    storage.write_sidecar(path, meta)

    splits = meta["splits"]
    print(f"dataset: {path}")
    print("splits: " + ", ".join(f"{k}={len(v)} traj" for k, v in splits.items()))
    res = []
    with h5py.File(path) as f:
        for ti in range(meta["n_traj"]):
            res.append(f[f"traj_{ti:03d}/residual_energy"][()])
    res = np.stack(res)
    print(f"balance residual energy: start {res[:, 0].mean():.3e}  "
          f"end {res[:, -1].mean():.3e}  max {res.max():.3e}")
    return path


# ---------------------------------------------------------------------------
# train


def _instance_normalized(states: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) -> per-instance normalized (N, C, H, W) float32."""
    x = torch.as_tensor(np.ascontiguousarray(np.moveaxis(states, -1, 1)),
                        dtype=torch.float32)
    mu = x.mean(dim=(-2, -1), keepdim=True)
    sigma = x.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mu) / (sigma + 1.0e-5)


def cmd_train(config: ExperimentConfig, variant: str = "full",
              seed: int | None = None, resume: bool = False,
              force: bool = False, log_every: int = 0) -> Path:
    if variant not in VARIANTS:
        raise CommandError(f"unknown variant {variant!r}; known: {VARIANTS}")
    ds_path = _dataset_path(config)
    if not ds_path.exists():
        raise CommandError(f"dataset {ds_path} not found; run generate-data first")
    seed = config.train.seed if seed is None else seed

    truth, bgs, meta = load_split(ds_path, "train")
    grid = GridSpec.from_dict(meta["grid"])

    settings = config.train
    if seed != settings.seed:
        settings = type(settings).from_dict({**settings.to_dict(), "seed": seed})
    if variant == "no_prdo" and settings.lambda0 != 0.0:
        settings = type(settings).from_dict({**settings.to_dict(), "lambda0": 0.0})

    ck_path = checkpoint_path(config, variant, seed)
    ck_path.parent.mkdir(parents=True, exist_ok=True)
    logs = Path(config.out_dir) / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    loss_csv = logs / f"loss_{variant}_seed{seed}.csv"

    if resume and ck_path.exists():
        trainer = resume_trainer(ck_path, truth, bgs)
    else:
        _require_absent(ck_path, force)
        loss_csv.unlink(missing_ok=True)
        model = build_model(grid, settings.mode, variant, config.model,
                            init_seed=seed)
        if settings.mode == "latent":
            data = _instance_normalized(truth)
            train_vae(model.codec, data, settings.vae_steps,
                      settings.batch_size, settings.vae_lr, seed,
                      settings.vae_beta_kl)
            model.codec.requires_grad_(False)
            try:
                held_states, _, _ = load_split(ds_path, "test")
                rel = reconstruction_rel_l2(model.codec,
                                            _instance_normalized(held_states))
                print(f"vae held-out reconstruction rel L2: {rel:.4f}")
            except ValueError:
                pass
        trainer = Trainer(model, config.schedule, config.toy, truth, bgs,
                          settings, dataset_hash=meta["content_hash"])

    trainer.run(checkpoint_path=ck_path, loss_csv=loss_csv, log_every=log_every)
    plotting.loss_plot(loss_csv, logs / f"loss_{variant}_seed{seed}.png")

    sidecar = {
        "kind": "checkpoint",
        "config_hash": config.config_hash(),
        "variant": variant,
        "seed": seed,
        "steps": trainer.step_count,
        "dataset_hash": meta["content_hash"],
    }
    storage.write_sidecar(ck_path, sidecar)
    print(f"checkpoint: {ck_path} ({trainer.step_count} steps)")
    return ck_path


# ---------------------------------------------------------------------------
# assimilate


def _state_seeds(base_seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence((base_seed, 0xA551))
    return [int(v) for v in ss.generate_state(n)]


def _pick_indices(total: int, n_states: int) -> np.ndarray:
    n = min(n_states, total)
    return np.unique(np.linspace(0, total - 1, n).round().astype(int))


def cmd_assimilate(config: ExperimentConfig, checkpoint: str | Path,
                   fraction: float | None = None, seed: int = 0,
                   split: str = "test", n_states: int | None = None,
                   force: bool = False) -> Path:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CommandError(f"checkpoint {checkpoint} not found")
    fraction = config.eval.fraction if fraction is None else fraction
    n_states = config.eval.n_states if n_states is None else n_states

    loaded = load_model(checkpoint)
    truth, bgs, meta = load_split(_dataset_path(config), split)
    grid = GridSpec.from_dict(meta["grid"])
    if grid.shape != loaded.grid.shape:
        raise CommandError(
            f"checkpoint grid {loaded.grid.shape} != dataset grid {grid.shape}")

    idx = _pick_indices(truth.shape[0], n_states)
    truth = truth[idx].astype(np.float64)
    bgs = bgs[idx].astype(np.float64)

    seeds = _state_seeds(seed, len(idx))
    masks = np.stack([sample_mask(grid, fraction, s) for s in seeds])
    obs_values = truth * masks[:, :, :, None]

    analysis = assimilate_batch(loaded, bgs, obs_values, masks,
                                steps=config.sample.steps, seeds=seeds,
                                probability_flow=config.sample.probability_flow)

    out_dir = Path(config.out_dir) / "analyses"
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{loaded.variant}_seed{loaded.train_settings['seed']}_f{fraction:.4f}_s{seed}"
    path = out_dir / f"analysis_{tag}.h5"
    _require_absent(path, force)

    with h5py.File(path, "w") as f:
        storage.create_array(f, "truth", truth)
        storage.create_array(f, "background", bgs)
        storage.create_array(f, "analysis", analysis)
        storage.create_array(f, "mask", masks, labels=("lat", "lon"))
    storage.write_sidecar(path, {
        "kind": "analysis_triplets",
        "grid": grid.to_dict(),
        "config_hash": config.config_hash(),
        "fraction": fraction,
        "sample_seed": seed,
        "state_seeds": seeds,
        "split": split,
        "state_indices": [int(i) for i in idx],
        "checkpoint": str(checkpoint),
        "variant": loaded.variant,
        "train_seed": loaded.train_settings["seed"],
        "train_steps": loaded.step,
        "sample_steps": config.sample.steps,
        "probability_flow": config.sample.probability_flow,
        "dataset_hash": loaded.dataset_hash,
    })
    print(f"analyses: {path} ({len(idx)} states, fraction {fraction})")
    return path


# ---------------------------------------------------------------------------
# evaluate


def _channel_names(grid: GridSpec) -> list[str]:
    return grid.channel_names()


def _metrics_for(truth: np.ndarray, pred: np.ndarray, grid: GridSpec,
                 stats: NormStats) -> dict:
    """Aggregate metrics over a stack of states (n, H, W, C)."""
    names = _channel_names(grid)
    truth_n = (truth - stats.mu) / (stats.sigma + stats.epsilon)
    pred_n = (pred - stats.mu) / (stats.sigma + stats.epsilon)
    out = {
        "mse": mse(truth_n, pred_n),
        "mae": mae(truth_n, pred_n),
        "rmse": {}, "rmse_norm": {}, "specdiv": {},
    }
    for c, name in enumerate(names):
        r = [lat_weighted_rmse(StateField(grid, truth[i]),
                               StateField(grid, pred[i]), c)
             for i in range(truth.shape[0])]
        out["rmse"][name] = float(np.mean(r))
        out["rmse_norm"][name] = float(np.mean(r) / (stats.sigma[c] + stats.epsilon))
        out["specdiv"][name] = float(np.mean(
            [spec_div(truth[i, :, :, c], pred[i, :, :, c])
             for i in range(truth.shape[0])]))
    return out


def _load_triplets(path: Path):
    with h5py.File(path) as f:
        truth = f["truth"][()]
        bgs = f["background"][()]
        analysis = f["analysis"][()]
    meta = storage.read_sidecar(path)
    return truth, bgs, analysis, meta


def cmd_evaluate(analysis_paths: list[str | Path], out_path: str | Path | None = None,
                 allow_mixed: bool = False) -> dict:
    """Metric report over one or more analysis-triplet files (averaged);
    refuses inputs with differing config hashes unless allow_mixed."""
    if not analysis_paths:
        raise CommandError("no analysis files given")
    paths = [Path(p) for p in analysis_paths]
    truths, bgs, anas, metas = [], [], [], []
    for p in paths:
        if not p.exists():
            raise CommandError(f"analysis file {p} not found")
        t, b, a, m = _load_triplets(p)
        truths.append(t), bgs.append(b), anas.append(a), metas.append(m)
    hashes = {m["config_hash"] for m in metas}
    if len(hashes) > 1 and not allow_mixed:
        raise CommandError(
            f"mixed config hashes {sorted(hashes)}; pass --allow-mixed to combine")
    grid = GridSpec.from_dict(metas[0]["grid"])
    truth = np.concatenate(truths)
    bg = np.concatenate(bgs)
    ana = np.concatenate(anas)
    if not (truth.shape == bg.shape == ana.shape):
        raise CommandError("mismatched triplet shapes across inputs")

    flat = truth.reshape(-1, grid.C).astype(np.float64)
    stats = NormStats(flat.mean(axis=0), flat.std(axis=0))

    report = {
        "kind": "evaluation_report",
        "config_hash": metas[0]["config_hash"],
        "files": [str(p) for p in paths],
        "n_states": int(truth.shape[0]),
        "channels": _channel_names(grid),
        "background": _metrics_for(truth, bg, grid, stats),
        "analysis": _metrics_for(truth, ana, grid, stats),
    }
    imp = {"rmse": {}, "specdiv": {}}
    for name in report["channels"]:
        b_ = report["background"]["rmse"][name]
        a_ = report["analysis"]["rmse"][name]
        imp["rmse"][name] = 100.0 * (b_ - a_) / b_ if b_ > 0 else 0.0
        bs = report["background"]["specdiv"][name]
        as_ = report["analysis"]["specdiv"][name]
        imp["specdiv"][name] = 100.0 * (bs - as_) / bs if bs > 0 else 0.0
    for key in ("mse", "mae"):
        b_, a_ = report["background"][key], report["analysis"][key]
        imp[key] = 100.0 * (b_ - a_) / b_ if b_ > 0 else 0.0
    report["improvement_pct"] = imp

    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(render_table(report))
    return report


def render_table(report: dict) -> str:
    """Background row first, then the analysis and relative improvements."""
    channels = report["channels"]
    z_name = "z" if "z" in channels else channels[0]
    header = ["row", f"SpecDiv({z_name})", "MSE", "MAE"] + [f"RMSE {c}" for c in channels]
    rows = []
    for label in ("background", "analysis"):
        m = report[label]
        rows.append([label, f"{m['specdiv'][z_name]:.4f}", f"{m['mse']:.4f}",
                     f"{m['mae']:.4f}"] + [f"{m['rmse'][c]:.4g}" for c in channels])
    imp = report["improvement_pct"]
    rows.append(["improvement %", f"{imp['specdiv'][z_name]:+.1f}",
                 f"{imp['mse']:+.1f}", f"{imp['mae']:+.1f}"]
                + [f"{imp['rmse'][c]:+.1f}" for c in channels])
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(config: ExperimentConfig, variants: tuple[str, ...] = VARIANTS,
               force: bool = False, log_every: int = 0) -> dict:
    """Train and evaluate the model variants under identical seeds and data;
    a failing variant aborts the report but earlier results are preserved."""
    out = Path(config.out_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict] = {}
    failure: tuple[str, Exception] | None = None
    for variant in variants:
        try:
            ck = cmd_train(config, variant=variant, force=force, log_every=log_every)
            paths = []
            for s in config.eval.seeds:
                paths.append(cmd_assimilate(config, ck, seed=s, force=force))
            report = cmd_evaluate(paths, out / f"evaluate_{variant}.json")
            results[variant] = report
        except Exception as e:  # preserve partial results
            failure = (variant, e)
            break

    report_path = out / ("ablation_partial.json" if failure else "ablation.json")
    report_path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    if results:
        channels = next(iter(results.values()))["channels"]
        z_name = "z" if "z" in channels else channels[0]
        bars = {v: {"specdiv_z": r["analysis"]["specdiv"][z_name],
                    "mse": r["analysis"]["mse"],
                    f"rmse_{z_name}": r["analysis"]["rmse"][z_name]}
                for v, r in results.items()}
        plots = Path(config.out_dir) / "plots"
        plots.mkdir(parents=True, exist_ok=True)
        plotting.ablation_bars(bars, ["specdiv_z", "mse", f"rmse_{z_name}"],
                               plots / "ablation.png")
    if failure:
        raise CommandError(
            f"variant {failure[0]!r} failed: {failure[1]}; "
            f"partial results kept in {report_path}")
    return results


# ---------------------------------------------------------------------------
# sweep-sparsity


def cmd_sweep_sparsity(config: ExperimentConfig, checkpoint: str | Path,
                       force: bool = False) -> dict:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CommandError(f"checkpoint {checkpoint} not found")
    out = Path(config.out_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    summary: dict[str, dict] = {}
    for fraction in config.eval.sweep_fractions:
        paths = [cmd_assimilate(config, checkpoint, fraction=fraction, seed=s,
                                force=force)
                 for s in config.eval.seeds]
        report = cmd_evaluate(paths, out / f"evaluate_sweep_f{fraction:.4f}.json")
        mean_rmse_norm = float(np.mean(list(report["analysis"]["rmse_norm"].values())))
        z_name = "z" if "z" in report["channels"] else report["channels"][0]
        rows.append({
            "fraction": fraction,
            "mean_rmse_norm": mean_rmse_norm,
            "specdiv_z": report["analysis"]["specdiv"][z_name],
            "mse": report["analysis"]["mse"],
            "mae": report["analysis"]["mae"],
        })
        summary[f"{fraction:.4f}"] = report["analysis"]

    csv_path = out / "sweep_sparsity.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plots = Path(config.out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    fr = [r["fraction"] for r in rows]
    plotting.sweep_plot(fr, {"mean RMSE (normalized)": [r["mean_rmse_norm"] for r in rows]},
                        "mean normalized RMSE", plots / "sweep_rmse.png")
    plotting.sweep_plot(fr, {"SpecDiv(z)": [r["specdiv_z"] for r in rows]},
                        "SpecDiv", plots / "sweep_specdiv.png")
    print(f"sweep rows: {len(rows)} -> {csv_path}")
    return {"rows": rows, "by_fraction": summary, "csv": str(csv_path)}


# ---------------------------------------------------------------------------
# plot


def cmd_plot(analysis_path: str | Path, channels: list[str] | None = None,
             out_dir: str | Path | None = None, state_index: int = 0) -> list[Path]:
    analysis_path = Path(analysis_path)
    if not analysis_path.exists():
        raise CommandError(f"analysis file {analysis_path} not found")
    truth, bgs, ana, meta = _load_triplets(analysis_path)
    grid = GridSpec.from_dict(meta["grid"])
    names = _channel_names(grid)
    channels = channels or names
    unknown = set(channels) - set(names)
    if unknown:
        raise CommandError(f"unknown channel(s) {sorted(unknown)}; have {names}")
    out_dir = Path(out_dir) if out_dir else analysis_path.parent / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in channels:
        c = names.index(name)
        png = out_dir / f"{analysis_path.stem}_{name}.png"
        plotting.field_map_plot(truth[state_index, :, :, c],
                                bgs[state_index, :, :, c],
                                ana[state_index, :, :, c], name, png)
        written.append(png)
    print(f"wrote {len(written)} plot(s) to {out_dir}")
    return written
