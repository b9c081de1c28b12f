import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussocc.blocked import (
    bench,
    partition,
    partition_boxes,
    prepare_blocked,
    splat_backward_blocked,
    splat_forward_blocked,
)
from gaussocc.core import GaussianParams, VoxelGrid
from gaussocc.splatting import SplatConfig, neighbor_pairs, splat_backward, splat_forward

from helpers import PARAM_NAMES, random_params, random_scene, rel_close, with_param
from oracles import central_diff


def test_block_counts():
    nbr = neighbor_pairs(GaussianParams.empty(1), VoxelGrid(np.zeros(3), 0.5, (200, 200, 16), 1), 3.0)
    assert partition(VoxelGrid(np.zeros(3), 0.5, (200, 200, 16), 1), nbr).count == 10000
    g = VoxelGrid(np.zeros(3), 0.5, (7, 5, 3), 1)
    part = partition(g, neighbor_pairs(GaussianParams.empty(1), g, 3.0))
    assert part.num_blocks == (2, 2, 1) and part.count == 4
    lo, hi = part.voxel_range(3, g.dims)
    np.testing.assert_array_equal(lo, [4, 4, 0])
    np.testing.assert_array_equal(hi, [7, 5, 3])


def test_blocks_tile_the_grid():
    g = VoxelGrid(np.zeros(3), 0.5, (7, 5, 6), 1)
    part = partition(g, neighbor_pairs(GaussianParams.empty(1), g, 3.0))
    seen = np.zeros(g.dims, dtype=int)
    for b in range(part.count):
        lo, hi = part.voxel_range(b, g.dims)
        seen[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] += 1
    assert np.all(seen == 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_block_lists_equal_brute_force_union(seed):
    params, grid = random_scene(np.random.default_rng(seed), max_gauss=20, max_dim=12)
    nbr = neighbor_pairs(params, grid, 3.0)
    part = partition(grid, nbr)
    nx, ny, _ = grid.dims
    for b in range(part.count):
        lo, hi = part.voxel_range(b, grid.dims)
        union = set()
        for k in range(lo[2], hi[2]):
            for j in range(lo[1], hi[1]):
                for i in range(lo[0], hi[0]):
                    union |= set(nbr.voxel_neighbors(i + nx * (j + ny * k)).tolist())
        assert part.gaussians(b).tolist() == sorted(union)
    boxed = partition_boxes(grid, nbr.lo, nbr.hi)
    np.testing.assert_array_equal(boxed.block_ptr, part.block_ptr)
    np.testing.assert_array_equal(boxed.block_gauss, part.block_gauss)


def test_empty_set_blocked_forward():
    grid = VoxelGrid(np.zeros(3), 0.5, (5, 5, 5), 2)
    f = splat_forward_blocked(GaussianParams.empty(2), grid, SplatConfig())
    assert np.all(f.probs[:, 2] == 1) and np.all(f.probs[:, :2] == 0)


@pytest.mark.parametrize("mode", ["transpose", "fused"])
def test_blocked_matches_naive_on_random_scenes(mode):
    rng = np.random.default_rng(20)
    for _ in range(10):
        params, grid = random_scene(rng, max_gauss=30, max_dim=12)
        cfg = SplatConfig(opacity_weighted=bool(rng.integers(2)), backward_mode=mode)
        a = splat_forward(params, grid, cfg).probs
        b = splat_forward_blocked(params, grid, cfg).probs
        assert np.max(np.abs(a - b)) <= 1e-6
        up = rng.normal(size=a.shape)
        ga = splat_backward(params, grid, cfg, up)
        gb = splat_backward_blocked(params, grid, cfg, up)
        for name in PARAM_NAMES:
            assert rel_close(getattr(gb, name), getattr(ga, name), rtol=1e-6, atol=1e-9), name


def test_zero_upstream_blocked():
    params, grid = random_scene(np.random.default_rng(21), max_gauss=10, max_dim=8)
    g = splat_backward_blocked(params, grid, SplatConfig(), np.zeros((grid.num_voxels, params.num_classes + 1)))
    for name in PARAM_NAMES:
        assert not np.any(getattr(g, name))


def test_work_conservation():
    params, grid = random_scene(np.random.default_rng(22), max_gauss=30, max_dim=12)
    cfg = SplatConfig()
    nbr = neighbor_pairs(params, grid, cfg.cutoff_sigma)
    stats = {}
    splat_forward_blocked(params, grid, cfg, stats=stats)
    splat_backward_blocked(params, grid, cfg, np.ones((grid.num_voxels, params.num_classes + 1)), stats=stats)
    assert stats["forward_pair_visits"] == nbr.num_pairs
    assert stats["backward_pair_visits"] == nbr.num_pairs


@pytest.mark.parametrize("mode", ["transpose", "fused"])
def test_blocked_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(23)
    grid = VoxelGrid(np.zeros(3), 0.5, (6, 6, 3), 2)
    p = random_params(rng, 5, 2, ([0.3, 0.3, 0.2], [2.7, 2.7, 1.3]), scale=(0.3, 0.8))
    cfg = SplatConfig(cutoff_sigma=100.0, backward_mode=mode)
    up = rng.normal(size=(grid.num_voxels, 3))
    g = splat_backward_blocked(p, grid, cfg, up)
    for name in PARAM_NAMES:
        num = central_diff(lambda v: float(np.sum(up * splat_forward_blocked(with_param(p, name, v), grid, cfg).probs)), getattr(p, name))
        assert rel_close(getattr(g, name), num), name


def test_fast_mode_matches_deterministic_mode():
    params, grid = random_scene(np.random.default_rng(24), max_gauss=40, max_dim=16)
    det = SplatConfig(deterministic=True)
    fast = dataclasses.replace(det, deterministic=False)
    a = splat_forward_blocked(params, grid, det).probs
    b = splat_forward_blocked(params, grid, fast).probs
    assert np.max(np.abs(a - b)) <= 1e-6
    up = np.random.default_rng(0).normal(size=a.shape)
    ga = splat_backward_blocked(params, grid, det, up)
    gb = splat_backward_blocked(params, grid, fast, up)
    for name in PARAM_NAMES:
        assert rel_close(getattr(gb, name), getattr(ga, name), rtol=1e-6, atol=1e-9)


def test_deterministic_repeat_is_bit_identical():
    params, grid = random_scene(np.random.default_rng(25), max_gauss=40, max_dim=16)
    cfg = SplatConfig()
    ctx = prepare_blocked(params, grid, cfg)
    a = splat_forward_blocked(params, grid, cfg, ctx).probs
    b = splat_forward_blocked(params, grid, cfg).probs
    assert a.tobytes() == b.tobytes()


def test_bench_rejects_too_few_repetitions():
    with pytest.raises(ValueError):
        bench({"gaussians": 10, "grid": (8, 8, 4)}, repetitions=1)


def test_bench_report_fields_are_consistent():
    rep = bench({"gaussians": 60, "grid": (16, 16, 8), "num_classes": 3}, repetitions=3)
    for key in ("naive_fwd_ms", "blocked_fwd_ms", "naive_bwd_ms", "blocked_bwd_ms", "threads", "gaussians", "grid"):
        assert key in rep
    assert rep["gaussians"] == 60 and rep["grid"] == [16, 16, 8]
    assert rep["speedups"]["forward"] == pytest.approx(rep["naive_fwd_ms"] / rep["blocked_fwd_ms"])
    assert rep["speedups"]["backward"] == pytest.approx(rep["naive_bwd_ms"] / rep["blocked_bwd_ms"])
