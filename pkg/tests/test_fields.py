import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assimlab.fields import (GridSpec, NormStats, ObservationSet, StateField,
                             apply_mask, compute_stats, denormalize,
                             masked_stats, normalize, sample_mask, toy_grid)


@pytest.fixture
def grid():
    return toy_grid(16, 16)


def make_state(grid, seed=0):
    rng = np.random.default_rng(seed)
    return StateField(grid, rng.standard_normal(grid.shape))


class TestGridSpec:
    def test_channel_count(self):
        g = GridSpec(H=16, W=16, P=13, K=6, s=4)
        assert g.C == 82
        assert g.surface_channel_index(3) == 81

    def test_channel_index_first(self, grid):
        assert grid.channel_index(0, 0) == 0

    def test_channel_index_row_major(self):
        g = GridSpec(H=16, W=16, P=4, K=5, s=0)
        assert g.channel_index(2, 3) == 13

    def test_channel_map_is_bijection(self):
        g = GridSpec(H=16, W=16, P=3, K=4, s=2)
        seen = set()
        for p in range(3):
            for k in range(4):
                seen.add(g.channel_index(p, k))
        for i in range(2):
            seen.add(g.surface_channel_index(i))
        assert seen == set(range(g.C))
        for c in range(g.C):
            kind, p, k = g.channel_location(c)
            if kind == "level":
                assert g.channel_index(p, k) == c
            else:
                assert g.surface_channel_index(k) == c

    def test_out_of_range_raises(self, grid):
        with pytest.raises(IndexError):
            grid.channel_index(1, 0)
        with pytest.raises(IndexError):
            grid.channel_index(0, 5)
        with pytest.raises(IndexError):
            grid.channel_location(99)

    def test_latitude_bounds(self):
        with pytest.raises(ValueError):
            GridSpec(H=4, W=4, P=1, K=1, latitudes=np.array([0.0, 45.0, 90.0, 0.0]))

    def test_power_of_two_detection(self):
        assert toy_grid(64, 64).is_power_of_two()
        assert not GridSpec(H=121, W=240, P=13, K=6, s=4).is_power_of_two()

    def test_round_trip_dict(self, grid):
        g2 = GridSpec.from_dict(grid.to_dict())
        assert g2.to_dict() == grid.to_dict()


class TestStats:
    def test_constant_channel(self, grid):
        values = np.full(grid.shape, 5.0)
        stats = compute_stats(StateField(grid, values))
        assert np.allclose(stats.mu, 5.0)
        assert np.allclose(stats.sigma, 0.0)

    def test_two_point_channel(self, grid):
        values = np.zeros(grid.shape)
        values[: grid.H // 2] = -1.0
        values[grid.H // 2:] = 1.0
        stats = compute_stats(StateField(grid, values))
        assert np.allclose(stats.mu, 0.0)
        assert np.allclose(stats.sigma, 1.0)

    def test_standard_normal_sample(self):
        grid = toy_grid(64, 64)
        rng = np.random.default_rng(42)
        stats = compute_stats(StateField(grid, rng.standard_normal(grid.shape)))
        assert np.all(np.abs(stats.mu) < 0.1)
        assert np.all(np.abs(stats.sigma - 1.0) < 0.1)

    def test_non_finite_rejected(self, grid):
        values = np.zeros(grid.shape)
        values[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            StateField(grid, values)

    def test_masked_stats_ignore_unobserved(self, grid):
        state = make_state(grid)
        mask = sample_mask(grid, 0.25, seed=3)
        obs = apply_mask(state, mask)
        stats = masked_stats(obs.values, obs.mask)
        pts = state.values[mask == 1]
        assert np.allclose(stats.mu, pts.mean(axis=0))
        assert np.allclose(stats.sigma, pts.std(axis=0))


class TestNormalize:
    def test_normalize_then_stats(self, grid):
        state = make_state(grid)
        stats = compute_stats(state)
        out_stats = compute_stats(normalize(state, stats))
        assert np.all(np.abs(out_stats.mu) < 1e-12)
        # sigma / (sigma + eps) is just below 1 for sigma >> eps
        assert np.all(out_stats.sigma <= 1.0)
        assert np.all(out_stats.sigma >= 1.0 - 1e-3)

    def test_constant_channel_to_zero(self, grid):
        state = StateField(grid, np.full(grid.shape, 7.25))
        stats = compute_stats(state)
        assert np.allclose(normalize(state, stats).values, 0.0)

    def test_round_trip(self, grid):
        state = make_state(grid, seed=1)
        stats = compute_stats(state)
        back = denormalize(normalize(state, stats), stats)
        scale = np.abs(state.values).max()
        assert np.abs(back.values - state.values).max() <= 1e-6 * scale + 1e-9

    def test_denormalize_zeros_gives_mu(self, grid):
        stats = compute_stats(make_state(grid, seed=2))
        zeros = StateField(grid, np.zeros(grid.shape))
        assert np.allclose(denormalize(zeros, stats).values, stats.mu)

    def test_denormalize_ones(self, grid):
        stats = compute_stats(make_state(grid, seed=3))
        ones = StateField(grid, np.ones(grid.shape))
        expected = stats.mu + stats.sigma + stats.epsilon
        assert np.allclose(denormalize(ones, stats).values, expected)

    def test_shape_mismatch(self, grid):
        stats = NormStats(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            normalize(make_state(grid), stats)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_round_trip_property(self, seed):
        grid = toy_grid(16, 16)
        rng = np.random.default_rng(seed)
        state = StateField(grid, 10.0 ** rng.uniform(-3, 3)
                           * rng.standard_normal(grid.shape))
        stats = compute_stats(state)
        back = denormalize(normalize(state, stats), stats)
        scale = np.abs(state.values).max()
        assert np.abs(back.values - state.values).max() <= 1e-6 * scale + 1e-9

    def test_channel_permutation_equivariance(self, grid):
        state = make_state(grid, seed=4)
        stats = compute_stats(state)
        perm = np.array([3, 0, 4, 1, 2])
        permuted = StateField(grid, state.values[:, :, perm])
        stats_p = NormStats(stats.mu[perm], stats.sigma[perm], stats.epsilon)
        out = normalize(state, stats).values[:, :, perm]
        out_p = normalize(permuted, stats_p).values
        assert np.array_equal(out, out_p)


class TestMask:
    def test_full_fraction(self, grid):
        assert sample_mask(grid, 1.0, seed=0).sum() == grid.H * grid.W

    def test_paper_grid_count(self):
        grid = GridSpec(H=121, W=240, P=13, K=6, s=4)
        mask = sample_mask(grid, 0.02, seed=0)
        assert mask.sum() == 580  # floor(0.02 * 29040)

    @settings(max_examples=25, deadline=None)
    @given(fraction=st.floats(0.001, 1.0), seed=st.integers(0, 1000))
    def test_mask_count_property(self, fraction, seed):
        grid = toy_grid(16, 16)
        mask = sample_mask(grid, fraction, seed)
        assert mask.sum() == int(np.floor(fraction * grid.H * grid.W))

    def test_seed_replay(self, grid):
        a = sample_mask(grid, 0.1, seed=5)
        b = sample_mask(grid, 0.1, seed=5)
        c = sample_mask(grid, 0.1, seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_invalid_fraction(self, grid):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                sample_mask(grid, bad, seed=0)

    def test_apply_mask_all_ones(self, grid):
        state = make_state(grid)
        obs = apply_mask(state, np.ones((grid.H, grid.W), dtype=np.uint8))
        assert np.array_equal(obs.values, state.values)

    def test_apply_mask_zero_mask(self, grid):
        state = make_state(grid)
        obs = apply_mask(state, np.zeros((grid.H, grid.W), dtype=np.uint8))
        assert np.all(obs.values == 0)

    def test_single_column_nonzeros(self, grid):
        rng = np.random.default_rng(0)
        state = StateField(grid, rng.uniform(1.0, 2.0, grid.shape))
        mask = np.zeros((grid.H, grid.W), dtype=np.uint8)
        mask[3, 7] = 1
        obs = apply_mask(state, mask)
        assert np.count_nonzero(obs.values) == grid.C

    def test_apply_mask_idempotent(self, grid):
        state = make_state(grid)
        mask = sample_mask(grid, 0.2, seed=1)
        once = apply_mask(state, mask)
        twice = apply_mask(StateField(grid, once.values), mask)
        assert np.array_equal(once.values, twice.values)

    def test_observation_invariant_enforced(self, grid):
        values = np.ones(grid.shape)
        mask = np.zeros((grid.H, grid.W), dtype=np.uint8)
        with pytest.raises(ValueError):
            ObservationSet(values=values, mask=mask, fraction=0.5)
