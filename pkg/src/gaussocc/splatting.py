"""Reference Gaussian-to-voxel splatting with analytic gradients.

Everything here is vectorized numpy over (voxel, Gaussian) pairs. It is the
oracle the blocked kernels are checked against, so clarity wins over speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateRotation,
    GaussianParams,
    GaussOccError,
    OccupancyField,
    SemanticGaussian,
    VoxelGrid,
    quat_to_rotmat,
    rotmat_vjp,
    softmax_vjp,
)

LOG_NORM_CONST = 1.5 * math.log(2.0 * math.pi)


class InvalidGradient(GaussOccError):
    pass


@dataclass
class SplatConfig:
    cutoff_sigma: float = 3.0
    opacity_weighted: bool = True
    weight_floor: float = 1e-12
    deterministic: bool = True
    threads: int | None = None
    # blocked backward: "transpose" walks each Gaussian's voxels (one owner per
    # Gaussian); "fused" accumulates per-block partials, then reduces per Gaussian
    backward_mode: str = "transpose"
    # naive path: max pairs held in memory at once
    chunk_pairs: int = 1 << 20


@dataclass
class Covariance:
    matrix: np.ndarray
    inverse: np.ndarray
    det: float


def covariance_from(rotation, scale) -> Covariance:
    rotation = np.asarray(rotation, dtype=np.float64)
    if np.linalg.norm(rotation) <= 1e-8:
        raise DegenerateRotation("rotation quaternion has (near) zero norm")
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scale must be strictly positive")
    R = quat_to_rotmat(rotation)
    M = R * scale  # R @ diag(s)
    sigma = M @ M.T
    inv = (R / scale**2) @ R.T
    return Covariance(sigma, inv, float(np.prod(scale) ** 2))


def _mahalanobis_sq(x, g: SemanticGaussian):
    cov = covariance_from(g.rotation, g.scale)
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.position, dtype=np.float64)
    return float(d @ cov.inverse @ d), cov


def gaussian_response(x, g: SemanticGaussian, opacity_weighted: bool = False) -> float:
    q, _ = _mahalanobis_sq(x, g)
    r = math.exp(-0.5 * q)
    return g.opacity * r if opacity_weighted else r


def occupancy_prob(x, neighbors, opacity_weighted: bool = False) -> float:
    keep = 1.0
    for g in neighbors:
        keep *= 1.0 - gaussian_response(x, g, opacity_weighted)
    return 1.0 - keep


def class_mixture(x, neighbors, weight_floor: float = 1e-12, num_classes: int | None = None):
    """Opacity-weighted Gaussian mixture of class distributions at x.

    Returns (e, floored). When the total weight is below `weight_floor`
    the uniform distribution is returned and `floored` is True.
    """
    if num_classes is None:
        if not neighbors:
            raise ValueError("num_classes required when there are no neighbors")
        num_classes = len(neighbors[0].classes)
    num = np.zeros(num_classes)
    den = 0.0
    for g in neighbors:
        q, cov = _mahalanobis_sq(x, g)
        density = math.exp(-0.5 * q) / ((2 * math.pi) ** 1.5 * math.sqrt(cov.det))
        num += density * g.opacity * np.asarray(g.classes, dtype=np.float64)
        den += density * g.opacity
    if den < weight_floor:
        return np.full(num_classes, 1.0 / num_classes), True
    return num / den, False


# ---------------------------------------------------------------------------
# neighbor search


@dataclass
class NeighborIndex:
    """Interacting (voxel, Gaussian) pairs, stored CSR in both directions."""

    num_voxels: int
    lo: np.ndarray  # (N,3) inclusive voxel index range per Gaussian
    hi: np.ndarray  # (N,3)
    gauss_ptr: np.ndarray  # (N+1,)
    gauss_voxels: np.ndarray  # (P,) voxel ids, Gaussian-major, ascending
    voxel_ptr: np.ndarray  # (V+1,)
    voxel_gauss: np.ndarray  # (P,) Gaussian ids, voxel-major, ascending

    @property
    def num_pairs(self):
        return int(self.gauss_voxels.shape[0])

    def voxel_neighbors(self, v):
        return self.voxel_gauss[self.voxel_ptr[v] : self.voxel_ptr[v + 1]]

    def gaussian_voxels(self, g):
        return self.gauss_voxels[self.gauss_ptr[g] : self.gauss_ptr[g + 1]]


def gaussian_ranges(means, scales, grid: VoxelGrid, cutoff_sigma: float):
    """Inclusive voxel index boxes whose centers lie within cutoff·max(scale) per axis."""
    radius = cutoff_sigma * scales.max(axis=1, keepdims=True)
    dims = np.array(grid.dims)
    lo = np.ceil((means - radius - grid.origin) / grid.voxel_size - 0.5)
    hi = np.floor((means + radius - grid.origin) / grid.voxel_size - 0.5)
    lo = np.clip(lo, 0, dims).astype(np.int64)
    hi = np.clip(hi, -1, dims - 1).astype(np.int64)
    return lo, hi


def neighbor_pairs(params: GaussianParams, grid: VoxelGrid, cutoff_sigma: float) -> NeighborIndex:
    if cutoff_sigma <= 0:
        raise ValueError("cutoff_sigma must be positive")
    n = len(params)
    V = grid.num_voxels
    nx, ny, _ = grid.dims
    if n == 0:
        lo = hi = np.zeros((0, 3), dtype=np.int64)
        empty = np.zeros(0, dtype=np.int64)
        return NeighborIndex(V, lo, hi, np.zeros(1, dtype=np.int64), empty, np.zeros(V + 1, dtype=np.int64), empty)
    lo, hi = gaussian_ranges(params.means, params.scales, grid, cutoff_sigma)
    ext = np.maximum(hi - lo + 1, 0)
    counts = ext.prod(axis=1)
    gauss_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=gauss_ptr[1:])
    P = int(gauss_ptr[-1])
    gid = np.repeat(np.arange(n), counts)
    local = np.arange(P) - np.repeat(gauss_ptr[:-1], counts)
    bx = ext[gid, 0]
    by = ext[gid, 1]
    di = local % bx
    dj = (local // bx) % by
    dk = local // (bx * by)
    vox = (lo[gid, 0] + di) + nx * ((lo[gid, 1] + dj) + ny * (lo[gid, 2] + dk))
    order = np.argsort(vox, kind="stable")
    voxel_gauss = gid[order]
    voxel_ptr = np.zeros(V + 1, dtype=np.int64)
    np.cumsum(np.bincount(vox, minlength=V), out=voxel_ptr[1:])
    return NeighborIndex(V, lo, hi, gauss_ptr, vox.astype(np.int64), voxel_ptr, voxel_gauss.astype(np.int64))


# ---------------------------------------------------------------------------
# naive forward / backward


@dataclass
class SplatGradients:
    """Gradients w.r.t. the raw parameters, plus two convenience views.

    `opacities` is w.r.t. the constrained opacity value and `classes` w.r.t.
    the class probabilities; the query decoder chains through those.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    class_logits: np.ndarray
    opacities: np.ndarray
    classes: np.ndarray

    @classmethod
    def zeros(cls, n, C):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, C)), np.zeros(n), np.zeros((n, C)))

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class _Prepared:
    R: np.ndarray
    inv_s: np.ndarray
    opac: np.ndarray
    classes: np.ndarray
    inv_norm: np.ndarray  # 1 / ((2π)^{3/2} Π s)


def _prepare(params: GaussianParams) -> _Prepared:
    if len(params) and np.any(np.linalg.norm(params.quats, axis=1) <= 1e-8):
        raise DegenerateRotation("rotation quaternion has (near) zero norm")
    inv_s = np.exp(-params.log_scales)
    return _Prepared(
        R=params.rotmats(),
        inv_s=inv_s,
        opac=params.opacities,
        classes=params.classes,
        inv_norm=np.exp(-LOG_NORM_CONST - params.log_scales.sum(axis=1)),
    )


def _voxel_chunks(nbr: NeighborIndex, chunk_pairs):
    ptr = nbr.voxel_ptr
    V = nbr.num_voxels
    v0 = 0
    while v0 < V:
        target = ptr[v0] + chunk_pairs
        v1 = int(np.searchsorted(ptr, target, side="right")) - 1
        v1 = min(max(v1, v0 + 1), V)
        yield v0, v1
        v0 = v1


def _chunk_pairs(nbr, centers, params, prep, v0, v1, weighted):
    """Per-pair quantities for voxels [v0, v1)."""
    ptr = nbr.voxel_ptr
    counts = np.diff(ptr[v0 : v1 + 1])
    vox = np.repeat(np.arange(v0, v1), counts)
    g = nbr.voxel_gauss[ptr[v0] : ptr[v1]]
    d = centers[vox] - params.means[g]
    u = np.einsum("pij,pi->pj", prep.R[g], d)
    w = u * prep.inv_s[g]
    G = np.exp(-0.5 * (w * w).sum(axis=1))
    a = prep.opac[g]
    resp = a * G if weighted else G
    beta = a * G * prep.inv_norm[g]
    nonempty = np.flatnonzero(counts)
    starts = (ptr[v0:v1] - ptr[v0])[nonempty]
    seg = np.repeat(np.arange(nonempty.size), counts[nonempty])
    return dict(vox=vox, g=g, d=d, w=w, G=G, a=a, resp=resp, beta=beta, nonempty=nonempty + v0, starts=starts, seg=seg)


def _voxel_stats(pc, prep, weight_floor, C):
    starts = pc["starts"]
    T = np.multiply.reduceat(1.0 - pc["resp"], starts) if starts.size else np.zeros(0)
    D = np.add.reduceat(pc["beta"], starts) if starts.size else np.zeros(0)
    if starts.size:
        Nm = np.add.reduceat(pc["beta"][:, None] * prep.classes[pc["g"]], starts, axis=0)
    else:
        Nm = np.zeros((0, C))
    floored = D < weight_floor
    e = np.where(floored[:, None], 1.0 / C, Nm / np.where(floored, 1.0, D)[:, None])
    return T, D, e, floored


def splat_forward(params: GaussianParams, grid: VoxelGrid, cfg: SplatConfig, nbr: NeighborIndex | None = None) -> OccupancyField:
    C = params.num_classes
    V = grid.num_voxels
    out = np.zeros((V, C + 1))
    out[:, C] = 1.0
    floored_all = np.zeros(V, dtype=bool)
    if len(params) == 0:
        return OccupancyField(out, grid.dims, floored_all)
    if nbr is None:
        nbr = neighbor_pairs(params, grid, cfg.cutoff_sigma)
    prep = _prepare(params)
    centers = grid.centers()
    for v0, v1 in _voxel_chunks(nbr, cfg.chunk_pairs):
        pc = _chunk_pairs(nbr, centers, params, prep, v0, v1, cfg.opacity_weighted)
        if pc["starts"].size == 0:
            continue
        T, _, e, floored = _voxel_stats(pc, prep, cfg.weight_floor, C)
        rows = pc["nonempty"]
        out[rows, :C] = (1.0 - T)[:, None] * e
        out[rows, C] = T
        floored_all[rows] = floored
    return OccupancyField(out, grid.dims, floored_all)


def splat_backward(params: GaussianParams, grid: VoxelGrid, cfg: SplatConfig, upstream, nbr: NeighborIndex | None = None) -> SplatGradients:
    """Gradients of sum(upstream * field) w.r.t. every raw parameter."""
    C = params.num_classes
    n = len(params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (grid.num_voxels, C + 1):
        raise ValueError(f"upstream shape {upstream.shape} != {(grid.num_voxels, C + 1)}")
    if not np.all(np.isfinite(upstream)):
        raise InvalidGradient("non-finite upstream gradient")
    grads = SplatGradients.zeros(n, C)
    if n == 0:
        return grads
    if nbr is None:
        nbr = neighbor_pairs(params, grid, cfg.cutoff_sigma)
    prep = _prepare(params)
    centers = grid.centers()
    weighted = cfg.opacity_weighted
    g_mean = np.zeros((n, 3))
    g_R = np.zeros((n, 3, 3))
    g_ls = np.zeros((n, 3))
    g_a = np.zeros(n)
    g_c = np.zeros((n, C))

    for v0, v1 in _voxel_chunks(nbr, cfg.chunk_pairs):
        pc = _chunk_pairs(nbr, centers, params, prep, v0, v1, weighted)
        if pc["starts"].size == 0:
            continue
        T, D, e, floored = _voxel_stats(pc, prep, cfg.weight_floor, C)
        alpha = 1.0 - T
        up = upstream[pc["nonempty"]]
        A_alpha = (up[:, :C] * e).sum(axis=1) - up[:, C]
        A_e = alpha[:, None] * up[:, :C]
        A_e_dot_e = (A_e * e).sum(axis=1)
        D_safe = np.where(floored, 1.0, D)

        seg, gidx = pc["seg"], pc["g"]
        starts = pc["starts"]
        fac = 1.0 - pc["resp"]
        zero = fac == 0.0
        prod_nz = np.multiply.reduceat(np.where(zero, 1.0, fac), starts)
        n_zero = np.add.reduceat(zero.astype(np.int64), starts)
        pz, nzs = prod_nz[seg], n_zero[seg]
        t_excl = np.where(zero, np.where(nzs == 1, pz, 0.0), np.where(nzs > 0, 0.0, pz / np.where(zero, 1.0, fac)))

        d_resp = A_alpha[seg] * t_excl
        cls = prep.classes[gidx]
        d_beta = np.where(
            floored[seg],
            0.0,
            ((A_e[seg] * cls).sum(axis=1) - A_e_dot_e[seg]) / D_safe[seg],
        )
        d_cls = np.where(floored[seg][:, None], 0.0, A_e[seg] * (pc["beta"] / D_safe[seg])[:, None])

        G, a, w = pc["G"], pc["a"], pc["w"]
        inv_norm = prep.inv_norm[gidx]
        if weighted:
            dG = d_resp * a + d_beta * a * inv_norm
            da = d_resp * G + d_beta * G * inv_norm
        else:
            dG = d_resp + d_beta * a * inv_norm
            da = d_beta * G * inv_norm
        dls = -(d_beta * pc["beta"])[:, None] * np.ones(3)
        dq = -0.5 * G * dG
        inv_s = prep.inv_s[gidx]
        du = (2.0 * dq)[:, None] * w * inv_s
        dls += (-2.0 * dq)[:, None] * w * w
        Rg = prep.R[gidx]
        dm = -np.einsum("pij,pj->pi", Rg, du)
        dR = pc["d"][:, :, None] * du[:, None, :]

        np.add.at(g_mean, gidx, dm)
        np.add.at(g_R, gidx, dR)
        np.add.at(g_ls, gidx, dls)
        np.add.at(g_a, gidx, da)
        np.add.at(g_c, gidx, d_cls)

    return finalize_gradients(params, prep.opac, prep.classes, g_mean, g_R, g_ls, g_a, g_c)


def precision_vjp(quats, log_scales, g6):
    """Map dL/dP (P = R diag(s^-2) R^T, symmetric, upper 6 entries 00,01,02,11,12,22)
    to dL/dR and dL/dlog_scale."""
    n = g6.shape[0]
    GP = np.empty((n, 3, 3))
    GP[:, 0, 0], GP[:, 0, 1], GP[:, 0, 2] = g6[:, 0], g6[:, 1], g6[:, 2]
    GP[:, 1, 0], GP[:, 1, 1], GP[:, 1, 2] = g6[:, 1], g6[:, 3], g6[:, 4]
    GP[:, 2, 0], GP[:, 2, 1], GP[:, 2, 2] = g6[:, 2], g6[:, 4], g6[:, 5]
    R = quat_to_rotmat(quats) if n else np.zeros((0, 3, 3))
    inv_s2 = np.exp(-2.0 * log_scales)
    g_R = 2.0 * np.einsum("nij,njk->nik", GP, R) * inv_s2[:, None, :]
    g_ls = -2.0 * inv_s2 * np.einsum("nji,njk,nki->ni", R, GP, R)
    return g_R, g_ls


def finalize_gradients(params, opac, classes, g_mean, g_R, g_ls, g_a, g_c) -> SplatGradients:
    """Chain per-Gaussian intermediate gradients through the parameterization."""
    return SplatGradients(
        means=g_mean,
        quats=rotmat_vjp(params.quats, g_R),
        log_scales=g_ls,
        opacity_logits=g_a * opac * (1.0 - opac),
        class_logits=softmax_vjp(classes, g_c),
        opacities=g_a,
        classes=g_c,
    )
