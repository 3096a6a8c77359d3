import numpy as np
import pytest

from assimlab import storage
from assimlab.fields import StateField, apply_mask, sample_mask, toy_grid


@pytest.fixture
def grid():
    return toy_grid(16, 16)


def test_state_round_trip(tmp_path, grid):
    rng = np.random.default_rng(0)
    state = StateField(grid, rng.standard_normal(grid.shape))
    path = tmp_path / "state.h5"
    storage.save_state(path, state)
    back = storage.load_state(path)
    assert np.array_equal(back.values, state.values)
    assert back.grid.to_dict() == grid.to_dict()


def test_sidecar_carries_grid_and_channel_map(tmp_path, grid):
    state = StateField(grid, np.zeros(grid.shape))
    path = tmp_path / "state.h5"
    storage.save_state(path, state, extra_meta={"note": "test"})
    meta = storage.read_sidecar(path)
    assert meta["grid"]["channel_map"] == ["u", "v", "z", "q", "T"]
    assert meta["note"] == "test"


def test_observation_round_trip(tmp_path, grid):
    rng = np.random.default_rng(1)
    state = StateField(grid, rng.standard_normal(grid.shape))
    obs = apply_mask(state, sample_mask(grid, 0.1, seed=2), 0.1)
    path = tmp_path / "obs.h5"
    storage.save_observations(path, obs, grid)
    back, back_grid = storage.load_observations(path)
    assert np.array_equal(back.values, obs.values)
    assert np.array_equal(back.mask, obs.mask)
    assert back.fraction == obs.fraction


def test_named_dimensions(tmp_path, grid):
    import h5py

    state = StateField(grid, np.zeros(grid.shape))
    path = tmp_path / "state.h5"
    storage.save_state(path, state)
    with h5py.File(path) as f:
        labels = [d.label for d in f["values"].dims]
    assert labels == ["lat", "lon", "channel"]


def test_content_hash_sensitivity(tmp_path, grid):
    a = np.zeros(grid.shape)
    b = a.copy()
    b[0, 0, 0] = 1e-12
    h_a = storage.array_content_hash({"values": a})
    h_b = storage.array_content_hash({"values": b})
    assert h_a != h_b
    assert h_a == storage.array_content_hash({"values": a.copy()})


def test_hash_h5_arrays_stable(tmp_path, grid):
    rng = np.random.default_rng(3)
    state = StateField(grid, rng.standard_normal(grid.shape))
    p1, p2 = tmp_path / "a.h5", tmp_path / "b.h5"
    storage.save_state(p1, state)
    storage.save_state(p2, state)
    assert storage.hash_h5_arrays(p1) == storage.hash_h5_arrays(p2)
