"""Voxel IoU/mIoU and ray-based RayIoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .core import GaussOccError, RaySet, ShapeMismatch, VoxelGrid

DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0)


class EmptyRaySet(GaussOccError):
    pass


@dataclass
class ConfusionCounts:
    tp: np.ndarray  # (C,) uint64
    fp: np.ndarray
    fn: np.ndarray
    occ_tp: int = 0  # nonempty vs empty
    occ_fp: int = 0
    occ_fn: int = 0

    @classmethod
    def zeros(cls, C):
        z = lambda: np.zeros(C, dtype=np.uint64)  # noqa: E731
        return cls(z(), z(), z())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.occ_tp + other.occ_tp,
            self.occ_fp + other.occ_fp,
            self.occ_fn + other.occ_fn,
        )

    def per_class_iou(self):
        """IoU per class, None for classes absent from the ground truth."""
        out = []
        for tp, fp, fn in zip(self.tp.tolist(), self.fp.tolist(), self.fn.tolist()):
            out.append(tp / (tp + fp + fn) if tp + fn > 0 else None)
        return out

    def miou(self):
        vals = [v for v in self.per_class_iou() if v is not None]
        if vals:
            return float(np.mean(vals))
        # nothing to find: perfect only if nothing was predicted either
        return 1.0 if int(self.fp.sum()) == 0 else 0.0

    def iou(self):
        den = self.occ_tp + self.occ_fp + self.occ_fn
        return 1.0 if den == 0 else self.occ_tp / den


def _check_aligned(pred: VoxelGrid, gt: VoxelGrid):
    if pred.dims != gt.dims or pred.class_count != gt.class_count:
        raise ShapeMismatch(f"pred {pred.dims}/C={pred.class_count} vs gt {gt.dims}/C={gt.class_count}")


def confusion(pred: VoxelGrid, gt: VoxelGrid) -> ConfusionCounts:
    _check_aligned(pred, gt)
    C = gt.class_count
    p = pred.labels.ravel().astype(np.int64)
    g = gt.labels.ravel().astype(np.int64)
    hit = p == g
    tp = np.bincount(g[hit], minlength=C + 1)[:C]
    fp = np.bincount(p[~hit], minlength=C + 1)[:C]
    fn = np.bincount(g[~hit], minlength=C + 1)[:C]
    po, go = p != C, g != C
    return ConfusionCounts(
        tp.astype(np.uint64),
        fp.astype(np.uint64),
        fn.astype(np.uint64),
        int(np.sum(po & go)),
        int(np.sum(po & ~go)),
        int(np.sum(~po & go)),
    )


def report(counts: ConfusionCounts) -> dict:
    return {"iou": counts.iou(), "miou": counts.miou(), "per_class": counts.per_class_iou()}


def iou_miou(pred: VoxelGrid, gt: VoxelGrid) -> dict:
    return report(confusion(pred, gt))


# ---------------------------------------------------------------------------
# ray casting


@njit(cache=True)
def _cast(labels, dims, origin, vsize, empty, o, d):
    """Amanatides-Woo walk. Returns (label, entry distance, flat voxel) or (-1, inf, -1)."""
    t0 = 0.0
    t1 = np.inf
    for a in range(3):
        lo = origin[a]
        hi = origin[a] + dims[a] * vsize[a]
        if d[a] == 0.0:
            if o[a] < lo or o[a] >= hi:
                return -1, np.inf, -1
        else:
            ta = (lo - o[a]) / d[a]
            tb = (hi - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    if t0 >= t1:
        return -1, np.inf, -1
    idx = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for a in range(3):
        p = (o[a] + t0 * d[a] - origin[a]) / vsize[a]
        i = int(math.floor(p))
        if d[a] < 0.0 and p == i and t0 > 0.0:
            i -= 1  # entering through this cell's upper face
        idx[a] = min(max(i, 0), dims[a] - 1)
        if d[a] > 0.0:
            step[a] = 1
            tmax[a] = (origin[a] + (idx[a] + 1) * vsize[a] - o[a]) / d[a]
            tdelta[a] = vsize[a] / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            tmax[a] = (origin[a] + idx[a] * vsize[a] - o[a]) / d[a]
            tdelta[a] = -vsize[a] / d[a]
        else:
            step[a] = 0
            tmax[a] = np.inf
            tdelta[a] = np.inf
    t = t0
    nx, ny = dims[0], dims[1]
    while True:
        flat = idx[0] + nx * (idx[1] + ny * idx[2])
        lab = labels[flat]
        if lab != empty:
            return lab, t, flat
        a = 0
        if tmax[1] < tmax[a]:
            a = 1
        if tmax[2] < tmax[a]:
            a = 2
        t = tmax[a]
        idx[a] += step[a]
        if idx[a] < 0 or idx[a] >= dims[a]:
            return -1, np.inf, -1
        tmax[a] += tdelta[a]


@njit(parallel=True, cache=True)
def _cast_many(labels, dims, origin, vsize, empty, origins, dirs, cls, depth):
    for r in prange(origins.shape[0]):
        lab, t, _ = _cast(labels, dims, origin, vsize, empty, origins[r], dirs[r])
        cls[r] = lab
        depth[r] = t


def _grid_arrays(grid: VoxelGrid):
    return (
        np.ascontiguousarray(grid.flat_labels(), dtype=np.int64),
        np.array(grid.dims, dtype=np.int64),
        np.asarray(grid.origin, dtype=np.float64),
        np.asarray(grid.voxel_size, dtype=np.float64),
    )


@dataclass(frozen=True)
class RayHit:
    hit: bool
    label: int = -1
    depth: float = math.inf
    voxel: int = -1


def cast_ray(grid: VoxelGrid, origin, direction) -> RayHit:
    """First nonempty voxel along the ray; depth is the distance to its entry face."""
    labels, dims, org, vs = _grid_arrays(grid)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    lab, t, flat = _cast(labels, dims, org, vs, grid.empty_label, np.asarray(origin, dtype=np.float64), d)
    if lab < 0:
        return RayHit(False)
    return RayHit(True, int(lab), float(t), int(flat))


def cast_rays(grid: VoxelGrid, rays: RaySet):
    """(labels, depths) for every ray; label -1 and depth inf on a miss."""
    labels, dims, org, vs = _grid_arrays(grid)
    cls = np.empty(len(rays), dtype=np.int64)
    depth = np.empty(len(rays))
    _cast_many(labels, dims, org, vs, grid.empty_label, rays.origins, rays.directions, cls, depth)
    return cls, depth


def lidar_rays(origin, rings: int = 32, azimuths: int = 360, elevation_deg=(-30.0, 10.0)) -> RaySet:
    """Spinning-LiDAR pattern: `rings` elevations × `azimuths` headings, ring-major."""
    el = np.radians(np.linspace(elevation_deg[0], elevation_deg[1], rings))
    az = np.radians(np.arange(azimuths) * (360.0 / azimuths))
    E, A = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RaySet(np.broadcast_to(np.asarray(origin, dtype=np.float64), d.shape), d, source="lidar")


# ---------------------------------------------------------------------------
# RayIoU


def ray_counts(pred_hits, gt_hits, C: int, tau: float) -> ConfusionCounts:
    """Per-class ray confusion at threshold `tau` from cast results.

    A ray is a true positive only when both grids hit the same class within
    `tau` metres. A both-hit ray that fails counts as a false positive for
    the predicted class and a false negative for the true class.
    """
    pc, pd = pred_hits
    gc, gd = gt_hits
    ph, gh = pc >= 0, gc >= 0
    both = ph & gh
    gap = np.where(both, np.abs(np.where(both, pd, 0.0) - np.where(both, gd, 0.0)), np.inf)
    ok = both & (pc == gc) & (gap <= tau)
    bad = both & ~ok
    tp = np.bincount(gc[ok], minlength=C)[:C]
    fp = np.bincount(pc[(ph & ~gh) | bad], minlength=C)[:C]
    fn = np.bincount(gc[(gh & ~ph) | bad], minlength=C)[:C]
    return ConfusionCounts(tp.astype(np.uint64), fp.astype(np.uint64), fn.astype(np.uint64))


def rayiou_from_counts(per_tau: dict) -> dict:
    vals = {tau: c.miou() for tau, c in per_tau.items()}
    return {
        "rayiou": float(np.mean(list(vals.values()))),
        "rayiou_per_threshold": {str(k): v for k, v in vals.items()},
    }


def rayiou_counts(pred: VoxelGrid, gt: VoxelGrid, rays: RaySet, thresholds=DEFAULT_THRESHOLDS) -> dict:
    _check_aligned(pred, gt)
    if len(rays) == 0:
        raise EmptyRaySet("no rays to evaluate")
    ph = cast_rays(pred, rays)
    gh = cast_rays(gt, rays)
    return {float(t): ray_counts(ph, gh, gt.class_count, float(t)) for t in thresholds}


def rayiou(pred: VoxelGrid, gt: VoxelGrid, rays: RaySet, thresholds=DEFAULT_THRESHOLDS) -> dict:
    return rayiou_from_counts(rayiou_counts(pred, gt, rays, thresholds))


def evaluate(pred: VoxelGrid, gt: VoxelGrid, rays: RaySet | None = None, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """The `eval` JSON: {iou, miou, per_class, rayiou, rayiou_per_threshold}."""
    out = iou_miou(pred, gt)
    if rays is None:
        center = gt.origin + np.asarray(gt.dims) * gt.voxel_size / 2
        rays = lidar_rays(center)
    out.update(rayiou(pred, gt, rays, thresholds))
    return out
