"""Array persistence: chunked HDF5 containers with named dimensions plus a
JSON metadata sidecar, and content hashing for reproducibility checks.

Every container written here is timestamp-free so that reruns with identical
inputs produce identical array content (verified by `array_content_hash`).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import h5py
import numpy as np

from .fields import GridSpec, ObservationSet, StateField

_DIM_LABELS = ("lat", "lon", "channel")


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_sidecar(path: str | Path, metadata: dict) -> Path:
    out = sidecar_path(path)
    out.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return out


def read_sidecar(path: str | Path) -> dict:
    return json.loads(sidecar_path(path).read_text())


def _label_dims(ds: h5py.Dataset, labels: tuple[str, ...]) -> None:
    # labels apply to the trailing axes; leading axes (e.g. a state index)
    # keep their creation-order names
    offset = ds.ndim - len(labels)
    for i, lab in enumerate(labels):
        ds.dims[offset + i].label = lab


def create_array(group: h5py.Group, name: str, data: np.ndarray,
                 labels: tuple[str, ...] = _DIM_LABELS) -> h5py.Dataset:
    """Chunked, timestamp-free dataset with labeled trailing dimensions."""
    chunks = tuple(min(n, 64) for n in data.shape[:-len(labels)]) + data.shape[-len(labels):] \
        if data.ndim > len(labels) else data.shape
    ds = group.create_dataset(name, data=data, chunks=chunks, track_times=False)
    _label_dims(ds, labels[:min(len(labels), ds.ndim)])
    return ds


def array_content_hash(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over array names, dtypes, shapes, and raw bytes (sorted by name)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def hash_h5_arrays(path: str | Path) -> str:
    """Content hash of every dataset in an HDF5 file, independent of file
    layout internals."""
    arrays: dict[str, np.ndarray] = {}
    with h5py.File(path, "r") as f:
        def visit(name, obj):
            if isinstance(obj, h5py.Dataset):
                arrays[name] = obj[()]
        f.visititems(visit)
    return array_content_hash(arrays)


def save_state(path: str | Path, state: StateField, extra_meta: dict | None = None) -> None:
    with h5py.File(path, "w") as f:
        create_array(f, "values", state.values)
    meta = {"kind": "state_field", "grid": state.grid.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    write_sidecar(path, meta)


def load_state(path: str | Path) -> StateField:
    meta = read_sidecar(path)
    grid = GridSpec.from_dict(meta["grid"])
    with h5py.File(path, "r") as f:
        values = f["values"][()]
    return StateField(grid, values)


def save_observations(path: str | Path, obs: ObservationSet, grid: GridSpec,
                      extra_meta: dict | None = None) -> None:
    with h5py.File(path, "w") as f:
        create_array(f, "values", obs.values)
        create_array(f, "mask", obs.mask, labels=("lat", "lon"))
    meta = {"kind": "observation_set", "grid": grid.to_dict(),
            "fraction": obs.fraction}
    if extra_meta:
        meta.update(extra_meta)
    write_sidecar(path, meta)


def load_observations(path: str | Path) -> tuple[ObservationSet, GridSpec]:
    meta = read_sidecar(path)
    grid = GridSpec.from_dict(meta["grid"])
    with h5py.File(path, "r") as f:
        values = f["values"][()]
        mask = f["mask"][()]
    return ObservationSet(values=values, mask=mask,
                          fraction=float(meta["fraction"])), grid
