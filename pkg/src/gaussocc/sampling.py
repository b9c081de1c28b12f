"""Pretraining targets: furthest point sampling, noised inits, denoise loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GaussOccError


class InvalidSampleCount(GaussOccError):
    pass


class InvalidLoss(GaussOccError):
    pass


@dataclass
class DenoiseBatch:
    clean_targets: np.ndarray  # (K,3)
    noised_init: np.ndarray  # (K,3)
    noise_bound: float

    def __post_init__(self):
        self.clean_targets = np.asarray(self.clean_targets, dtype=np.float64)
        self.noised_init = np.asarray(self.noised_init, dtype=np.float64)
        if self.clean_targets.shape != self.noised_init.shape:
            raise ValueError("targets and inits must have the same shape")
        dev = np.abs(self.noised_init - self.clean_targets)
        if dev.size and dev.max() > self.noise_bound + 1e-9:
            raise ValueError("noised init exceeds the stated noise bound")


@dataclass(frozen=True)
class LossWeights:
    denoise: float = 1.0
    depth: float = 1.0
    rgb: float = 1.0

    def __post_init__(self):
        vals = (self.denoise, self.depth, self.rgb)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")


def fps(points, k: int, start: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Greedy max-min subset of `points`; returns the selected indices.

    The first pick is `start` (or a random index when `rng` is given). Later
    picks maximize distance to the chosen set, lowest index on ties.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0 or k < 1 or k > n:
        raise InvalidSampleCount(f"cannot pick {k} of {n} points")
    if rng is not None:
        start = int(rng.integers(n))
    sel = np.empty(k, dtype=np.int64)
    sel[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))  # first maximum -> lowest index
        sel[i] = nxt
        np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1), out=dist)
    return sel


def fps_points(points, k: int, **kw) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts[fps(pts, k, **kw)]


def noise_init(targets, e: float, seed: int) -> np.ndarray:
    if e < 0:
        raise ValueError("noise bound must be >= 0")
    targets = np.asarray(targets, dtype=np.float64)
    if e == 0:
        return targets.copy()
    rng = np.random.default_rng(seed)
    return targets + rng.uniform(-e, e, size=targets.shape)


def make_batch(points, k: int, e: float, seed: int) -> DenoiseBatch:
    targets = fps_points(points, k)
    return DenoiseBatch(targets, noise_init(targets, e, seed), e)


def denoise_loss(batch: DenoiseBatch, offsets):
    """Sum of per-point Euclidean residuals and its gradient w.r.t. offsets."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != batch.clean_targets.shape:
        raise ValueError(f"offsets shape {offsets.shape} != {batch.clean_targets.shape}")
    r = batch.noised_init + offsets - batch.clean_targets
    norm = np.linalg.norm(r, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm[:, None] > 0, r / safe[:, None], 0.0)
    return float(norm.sum()), grad


def pretrain_loss(weights: LossWeights, denoise: float, depth: float, rgb: float) -> float:
    for name, v in (("denoise", denoise), ("depth", depth), ("rgb", rgb)):
        if not math.isfinite(v):
            raise InvalidLoss(f"{name} loss is not finite: {v}")
    return weights.denoise * denoise + weights.depth * depth + weights.rgb * rgb
