import numpy as np

from gaussocc.core import GaussianParams, VoxelGrid

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "class_logits")


def random_params(rng, n, C, extent, scale=(0.3, 1.2), colors=False):
    lo = np.asarray(extent[0], dtype=float)
    hi = np.asarray(extent[1], dtype=float)
    return GaussianParams(
        means=lo + rng.uniform(size=(n, 3)) * (hi - lo),
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale, size=(n, 3))),
        opacity_logits=rng.normal(size=n),
        class_logits=rng.normal(size=(n, C)),
        velocities=rng.normal(size=(n, 3)),
        colors=rng.uniform(size=(n, 3)) if colors else None,
    )


def random_scene(rng, max_gauss=50, max_dim=16, C=None):
    dims = tuple(int(x) for x in rng.integers(2, max_dim + 1, 3))
    vs = float(rng.choice([0.25, 0.5, 1.0]))
    C = C or int(rng.integers(1, 5))
    grid = VoxelGrid(rng.uniform(-2, 2, 3), vs, dims, C)
    n = int(rng.integers(0, max_gauss + 1))
    ext = (grid.origin - 1.0, grid.origin + np.array(dims) * vs + 1.0)
    return random_params(rng, n, C, ext, scale=(0.2 * vs * 2, 1.5 * vs * 2)), grid


def with_param(params, name, value):
    p = params.copy()
    setattr(p, name, value)
    return p


def rel_close(analytic, numeric, rtol=1e-3, atol=1e-5):
    """Elementwise relative check with an absolute floor near zero."""
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    err = np.abs(a - b)
    return bool(np.all((err <= atol) | (err <= rtol * np.maximum(np.abs(a), np.abs(b)))))


def worst_rel(analytic, numeric, atol=1e-5):
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    err = np.abs(a - b)
    rel = np.where(err <= atol, 0.0, err / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300))
    return float(rel.max()) if rel.size else 0.0
