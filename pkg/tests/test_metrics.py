import math

import numpy as np
import pytest

from gaussocc.core import RaySet, ShapeMismatch, VoxelGrid
from gaussocc.metrics import (
    EmptyRaySet,
    cast_ray,
    cast_rays,
    confusion,
    evaluate,
    iou_miou,
    lidar_rays,
    ray_counts,
    rayiou,
    rayiou_counts,
    rayiou_from_counts,
)

from oracles import iou_miou as iou_oracle
from oracles import march, rayiou_oracle


def _grid(labels, C, vs=1.0, origin=(0.0, 0.0, 0.0)):
    labels = np.asarray(labels)
    return VoxelGrid(np.asarray(origin, float), vs, labels.shape, C, labels)


def _random_grid(rng, dims, C, p_empty=0.6):
    lab = rng.integers(0, C, dims)
    lab[rng.uniform(size=dims) < p_empty] = C
    return lab


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# voxel metrics


def test_identical_grids():
    lab = _random_grid(np.random.default_rng(0), (4, 4, 4), 3)
    r = iou_miou(_grid(lab, 3), _grid(lab, 3))
    assert r["iou"] == 1.0 and r["miou"] == 1.0


def test_all_empty_prediction():
    lab = _random_grid(np.random.default_rng(1), (4, 4, 4), 3, 0.3)
    r = iou_miou(_grid(np.full((4, 4, 4), 3), 3), _grid(lab, 3))
    assert r["iou"] == 0.0


def test_hand_tallied_3x3x1():
    # classes 0,1; 2 = empty
    gt = np.array([[0, 0, 2], [1, 1, 2], [2, 2, 2]])[:, :, None]
    pred = np.array([[0, 1, 2], [1, 2, 0], [2, 2, 2]])[:, :, None]
    c = confusion(_grid(pred, 2), _grid(gt, 2))
    # class 0: tp 1 (0,0), fp 1 (1,2), fn 1 (0,1)
    # class 1: tp 1 (1,0), fp 1 (0,1), fn 1 (1,1)
    assert c.tp.tolist() == [1, 1] and c.fp.tolist() == [1, 1] and c.fn.tolist() == [1, 1]
    # nonempty: tp 3, fp 1, fn 1
    assert (c.occ_tp, c.occ_fp, c.occ_fn) == (3, 1, 1)
    r = iou_miou(_grid(pred, 2), _grid(gt, 2))
    assert r["iou"] == pytest.approx(3 / 5)
    assert r["miou"] == pytest.approx(1 / 3)


def test_voxel_metrics_match_brute_force_on_exhaustive_grids():
    rng = np.random.default_rng(2)
    for _ in range(200):
        dims = tuple(int(x) for x in rng.integers(1, 5, 3))
        C = int(rng.integers(1, 5))
        p, g = _random_grid(rng, dims, C, rng.uniform()), _random_grid(rng, dims, C, rng.uniform())
        r = iou_miou(_grid(p, C), _grid(g, C))
        iou, miou = iou_oracle(p, g, C)
        assert r["iou"] == pytest.approx(iou) and r["miou"] == pytest.approx(miou)


def test_absent_classes_are_excluded():
    gt = np.array([0, 0, 3, 3])[:, None, None]
    pred = np.array([0, 0, 3, 3])[:, None, None]
    r = iou_miou(_grid(pred, 3), _grid(gt, 3))
    assert r["per_class"] == [1.0, None, None] and r["miou"] == 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        iou_miou(_grid(np.zeros((2, 2, 2), int), 1), _grid(np.zeros((2, 2, 3), int), 1))


def test_relabeling_permutation_invariance():
    rng = np.random.default_rng(3)
    C = 4
    p, g = _random_grid(rng, (6, 6, 4), C), _random_grid(rng, (6, 6, 4), C)
    perm = np.append(rng.permutation(C), C)
    a = iou_miou(_grid(p, C), _grid(g, C))
    b = iou_miou(_grid(perm[p], C), _grid(perm[g], C))
    assert a["iou"] == b["iou"] and a["miou"] == pytest.approx(b["miou"])


def test_counts_accumulate_over_frames():
    rng = np.random.default_rng(4)
    C = 3
    frames = [(_random_grid(rng, (3, 4, 2), C), _random_grid(rng, (3, 4, 2), C)) for _ in range(3)]
    total = None
    for p, g in frames:
        c = confusion(_grid(p, C), _grid(g, C))
        total = c if total is None else total + c
    cat = confusion(_grid(np.concatenate([p for p, _ in frames], 2), C), _grid(np.concatenate([g for _, g in frames], 2), C))
    assert total.tp.tolist() == cat.tp.tolist() and total.fp.tolist() == cat.fp.tolist()
    assert total.fn.tolist() == cat.fn.tolist() and total.iou() == cat.iou()


# ---------------------------------------------------------------------------
# ray casting


def test_axis_ray_into_wall():
    lab = np.full((16, 4, 4), 2)
    lab[7, :, :] = 1  # wall occupying x in [3.5, 4.0)
    g = _grid(lab, 2, vs=0.5)
    hit = cast_ray(g, [0.25, 1.0, 1.0], [1.0, 0, 0])
    assert hit.hit and hit.label == 1
    assert hit.depth == pytest.approx(3.25, abs=1e-12)
    ref_lab, ref_t = march(lab, 2, g.origin, g.voxel_size, g.dims, [0.25, 1.0, 1.0], [1.0, 0, 0])
    assert ref_lab == 1 and abs(ref_t - hit.depth) <= 1.5e-3


def test_all_empty_grid_misses():
    assert not cast_ray(_grid(np.full((4, 4, 4), 1), 1), [0.5, 0.5, 0.5], [1, 1, 1]).hit


def test_ray_starting_inside_nonempty_voxel():
    lab = np.full((4, 4, 4), 3)
    lab[1, 1, 1] = 2
    hit = cast_ray(_grid(lab, 3), [1.5, 1.5, 1.5], _unit([1, 2, 3]))
    assert hit.hit and hit.label == 2 and hit.depth == 0.0


def test_ray_from_outside_that_misses_the_grid():
    lab = np.zeros((2, 2, 2), int)
    assert not cast_ray(_grid(lab, 1), [-5, -5, -5], [-1, 0, 0]).hit


def test_cast_matches_dense_marching():
    rng = np.random.default_rng(5)
    for _ in range(60):
        dims = tuple(int(x) for x in rng.integers(1, 5, 3))
        C = 2
        lab = _random_grid(rng, dims, C, 0.8)
        g = _grid(lab, C, vs=0.5, origin=(0.0, 0.0, 0.0))
        ext = np.array(dims) * 0.5
        o = rng.uniform(-1, 1, 3) * ext + ext / 2 * rng.integers(0, 2)
        d = _unit(rng.normal(size=3))
        hit = cast_ray(g, o, d)
        ref_lab, ref_t = march(lab, C, g.origin, g.voxel_size, g.dims, o, d)
        if ref_lab is None:
            assert not hit.hit
        else:
            assert hit.hit and hit.label == ref_lab
            assert abs(hit.depth - ref_t) <= 1.5e-3


# ---------------------------------------------------------------------------
# RayIoU


def _hits(grid, rays):
    lab = grid.labels
    out = []
    for o, d in zip(rays.origins, rays.directions):
        out.append(march(lab, grid.class_count, grid.origin, grid.voxel_size, grid.dims, o, d, step=1e-3))
    return out


def test_identical_grids_rayiou_one():
    lab = _random_grid(np.random.default_rng(6), (8, 8, 4), 3, 0.7)
    g = _grid(lab, 3)
    r = rayiou(g, g, lidar_rays([4, 4, 2], rings=8, azimuths=36))
    assert r["rayiou"] == 1.0
    assert all(v == 1.0 for v in r["rayiou_per_threshold"].values())


def test_displaced_hits_count_only_at_large_threshold():
    gt = np.full((12, 3, 3), 1)
    gt[4, :, :] = 0
    pred = np.full((12, 3, 3), 1)
    pred[7, :, :] = 0  # same class, 3 m further
    rays = RaySet(np.array([[0.5, 1.5, 1.5]]), np.array([[1.0, 0, 0]]))
    r = rayiou(_grid(pred, 1), _grid(gt, 1), rays)
    assert r["rayiou_per_threshold"] == {"1.0": 0.0, "2.0": 0.0, "4.0": 1.0}


def test_rayiou_matches_exhaustive_oracle_on_small_grids():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(8):
        C = 2
        p = _grid(_random_grid(rng, (4, 4, 4), C, 0.75), C)
        g = _grid(_random_grid(rng, (4, 4, 4), C, 0.75), C)
        o = rng.uniform(0.2, 3.8, (16, 3))
        d = rng.normal(size=(16, 3))
        rays = RaySet(o, d / np.linalg.norm(d, axis=1, keepdims=True))
        ph, gh = _hits(p, rays), _hits(g, rays)
        # the marcher's depth is quantized to its step; keep clear of thresholds
        if any(a[0] is not None and b[0] is not None and min(abs(abs(a[1] - b[1]) - t) for t in (1, 2, 4)) < 5e-3 for a, b in zip(ph, gh)):
            continue
        r = rayiou(p, g, rays)
        for tau in (1.0, 2.0, 4.0):
            assert r["rayiou_per_threshold"][str(tau)] == pytest.approx(rayiou_oracle(ph, gh, C, tau))
        checked += 1
    assert checked >= 5


def test_rayiou_monotone_in_threshold():
    rng = np.random.default_rng(8)
    for _ in range(100):
        C = int(rng.integers(1, 4))
        dims = tuple(int(x) for x in rng.integers(2, 7, 3))
        p = _grid(_random_grid(rng, dims, C, 0.7), C)
        g = _grid(_random_grid(rng, dims, C, 0.7), C)
        rays = lidar_rays(np.array(dims) / 2, rings=4, azimuths=12)
        counts = rayiou_counts(p, g, rays, thresholds=(0.5, 1.0, 2.0, 4.0))
        vals = [counts[t].miou() for t in sorted(counts)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_empty_ray_set():
    g = _grid(np.zeros((2, 2, 2), int), 1)
    with pytest.raises(EmptyRaySet):
        rayiou(g, g, RaySet(np.zeros((0, 3)), np.zeros((0, 3))))


def test_ray_counts_accumulate():
    rng = np.random.default_rng(9)
    C = 2
    p = _grid(_random_grid(rng, (6, 6, 3), C), C)
    g = _grid(_random_grid(rng, (6, 6, 3), C), C)
    r1, r2 = lidar_rays([1, 1, 1], rings=4, azimuths=10), lidar_rays([4, 4, 2], rings=4, azimuths=10)
    both = RaySet.concat([r1, r2])
    c1, c2, c = (rayiou_counts(p, g, r) for r in (r1, r2, both))
    for t in c:
        s = c1[t] + c2[t]
        assert s.tp.tolist() == c[t].tp.tolist() and s.fp.tolist() == c[t].fp.tolist() and s.fn.tolist() == c[t].fn.tolist()
    assert rayiou_from_counts(c)["rayiou"] == pytest.approx(rayiou(p, g, both)["rayiou"])


def test_lidar_pattern():
    rays = lidar_rays([0, 0, 1.8])
    assert len(rays) == 32 * 360
    el = np.degrees(np.arcsin(rays.directions[:, 2]))
    assert el.min() == pytest.approx(-30) and el.max() == pytest.approx(10)


def test_evaluate_report_keys():
    lab = _random_grid(np.random.default_rng(10), (8, 8, 4), 2)
    r = evaluate(_grid(lab, 2), _grid(lab, 2))
    assert set(r) == {"iou", "miou", "per_class", "rayiou", "rayiou_per_threshold"}
    assert math.isclose(r["rayiou"], 1.0)


def test_cast_rays_vectorized_matches_single():
    rng = np.random.default_rng(11)
    g = _grid(_random_grid(rng, (5, 5, 5), 2, 0.85), 2)
    rays = lidar_rays([2.5, 2.5, 2.5], rings=5, azimuths=20)
    labels, depths = cast_rays(g, rays)
    for i in range(len(rays)):
        h = cast_ray(g, rays.origins[i], rays.directions[i])
        assert labels[i] == (h.label if h.hit else -1)
        assert depths[i] == h.depth


def test_ray_counts_rule():
    # ray 0: same class within tau; ray 1: class mismatch; ray 2: pred miss; ray 3: gt miss
    pc, pd = np.array([0, 1, -1, 1]), np.array([1.0, 2.0, np.inf, 3.0])
    gc, gd = np.array([0, 0, 1, -1]), np.array([1.5, 2.0, 4.0, np.inf])
    c = ray_counts((pc, pd), (gc, gd), 2, 1.0)
    assert c.tp.tolist() == [1, 0] and c.fp.tolist() == [0, 2] and c.fn.tolist() == [1, 1]
