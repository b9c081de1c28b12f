"""Per-ray depth/colour rendering of Gaussians and velocity/ego warping.

Each Gaussian meets a ray at a single point, the peak of its response along
that ray, which has a closed form. Contributions are sorted by that peak and
alpha-composited front to back. Gradients use the envelope theorem for the
peak response, so no per-sample quadrature is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .core import (
    GaussianParams,
    GaussOccError,
    Pose,
    RaySet,
    quat_left_matrix,
    quat_multiply,
    rotmat_vjp,
)
from .blocked import _reduce_slots_kernel
from .splatting import precision_vjp


class EmptyMask(GaussOccError):
    pass


class MissingAttribute(GaussOccError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. Camera frame is x right, y down, z forward; pose maps it to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def look_at(cls, eye, target, width, height, fov_deg=60.0, up=(0.0, 0.0, 1.0), timestamp=0.0):
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            # looking along `up`: any perpendicular will do
            x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height, Pose(_rotmat_to_quat(R), eye, timestamp))

    def with_pose(self, pose: Pose) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")} | {"pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]), Pose.from_dict(d["pose"]))


def _rotmat_to_quat(R):
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = [0.0, 0.0, 0.0, 0.0]
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.array(q)
    return q / np.linalg.norm(q)


def generate_rays(camera: CameraModel) -> RaySet:
    """Row-major rays (v outer, u inner) through integer pixel coordinates."""
    u, v = np.meshgrid(np.arange(camera.width, dtype=np.float64), np.arange(camera.height, dtype=np.float64))
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RaySet(np.broadcast_to(camera.pose.translation, d.shape), camera.pose.rotate(d), source="camera")


def project(camera: CameraModel, points):
    """World points to (u, v) pixel coordinates and camera-frame depth z."""
    pc = camera.pose.inverse().apply(points)
    z = pc[..., 2]
    return np.stack([camera.fx * pc[..., 0] / z + camera.cx, camera.fy * pc[..., 1] / z + camera.cy], axis=-1), z


@dataclass
class RenderConfig:
    near_clip: float = 0.1
    response_floor: float = 1e-3
    alpha_floor: float = 1e-6
    valid_alpha: float = 0.05
    # "fast": numba kernels parallel over rays; "reference": dense numpy
    backend: str = "fast"
    chunk_pairs: int = 1 << 20


@dataclass
class RenderOutput:
    depth: np.ndarray  # (H,W)
    alpha: np.ndarray  # (H,W)
    valid: np.ndarray  # (H,W) bool, alpha >= valid_alpha
    rgb: np.ndarray | None  # (H,W,3)
    contributions: int = 0
    cache: tuple | None = field(default=None, repr=False)  # reused by render_backward


@dataclass
class RenderGradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    opacities: np.ndarray  # w.r.t. the opacity value
    colors: np.ndarray | None  # w.r.t. the colour value


def _precisions(params: GaussianParams):
    R = params.rotmats()
    inv_s2 = np.exp(-2.0 * params.log_scales)
    return np.einsum("nij,nj,nkj->nik", R, inv_s2, R), R, inv_s2


def _composite(params, rays: RaySet, cfg: RenderConfig, colors, upstream=None, cache=None):
    """Shared forward (and, given upstream, backward) pass over ray chunks."""
    n = len(params)
    nr = len(rays)
    depth = np.zeros(nr)
    alpha = np.zeros(nr)
    rgb = np.zeros((nr, 3)) if colors is not None else None
    grads = None
    if upstream is not None:
        grads = dict(m=np.zeros((n, 3)), P=np.zeros((n, 3, 3)), a=np.zeros(n), col=np.zeros((n, 3)))
    if n == 0 or nr == 0:
        return depth, alpha, rgb, grads, 0, None
    P, _, _ = _precisions(params)
    a = params.opacities
    m = params.means
    step = max(1, cfg.chunk_pairs // n)
    total = 0
    for r0 in range(0, nr, step):
        sl = slice(r0, min(nr, r0 + step))
        o, d = rays.origins[sl], rays.directions[sl]
        delta = o[:, None, :] - m[None, :, :]  # (r,n,3)
        Pd = np.einsum("nij,rj->rni", P, d)
        c = np.einsum("rj,rnj->rn", d, Pd)
        b = np.einsum("rnj,rnj->rn", delta, Pd)
        t = -b / c
        e = delta + t[..., None] * d[:, None, :]  # peak point minus mean
        q = np.einsum("rni,nij,rnj->rn", e, P, e)
        G = np.exp(-0.5 * q)
        w = a[None, :] * G
        mask = (w >= cfg.response_floor) & (t > cfg.near_clip)
        cnt = mask.sum(axis=1)
        M = int(cnt.max())
        total += int(cnt.sum())
        if M == 0:
            continue
        key = np.where(mask, t, np.inf)
        order = np.argsort(key, axis=1, kind="stable")[:, :M]  # ties keep id order
        ws = np.where(np.take_along_axis(mask, order, 1), np.take_along_axis(w, order, 1), 0.0)
        ts = np.take_along_axis(t, order, 1)
        one_m = 1.0 - ws
        T = np.ones_like(ws)
        np.cumprod(one_m[:, :-1], axis=1, out=T[:, 1:])
        contrib = T * ws
        A = contrib.sum(axis=1)
        S = (contrib * ts).sum(axis=1)
        Ac = np.maximum(A, cfg.alpha_floor)
        depth[sl] = S / Ac
        alpha[sl] = A
        cs = None
        if colors is not None:
            cs = colors[order]  # (r,M,3)
            rgb[sl] = np.einsum("rm,rmk->rk", contrib, cs)
        if upstream is None:
            continue

        dD, dA, dC = upstream[0][sl], upstream[1][sl], upstream[2]
        gS = dD / Ac
        gA = dA - np.where(A > cfg.alpha_floor, dD * S / Ac**2, 0.0)
        y = gS[:, None] * ts + gA[:, None]
        if cs is not None and dC is not None:
            y = y + np.einsum("rmk,rk->rm", cs, dC[sl])
        # R_j: what the rays behind j contribute per unit transmittance
        Rb = np.zeros_like(ws)
        for j in range(M - 2, -1, -1):
            Rb[:, j] = ws[:, j + 1] * y[:, j + 1] + one_m[:, j + 1] * Rb[:, j + 1]
        dws = T * (y - Rb)
        dts = contrib * gS[:, None]
        if cs is not None and dC is not None:
            np.add.at(grads["col"], order, contrib[..., None] * dC[sl][:, None, :])
        valid = np.take_along_axis(mask, order, 1)
        dw = np.zeros_like(w)
        dt = np.zeros_like(t)
        np.put_along_axis(dw, order, np.where(valid, dws, 0.0), 1)
        np.put_along_axis(dt, order, np.where(valid, dts, 0.0), 1)
        grads["a"] += (dw * G).sum(axis=0)
        dq = -0.5 * dw * w
        Pe = np.einsum("nij,rnj->rni", P, e)
        dtc = dt / c
        grads["m"] += np.einsum("rn,rni->ni", -2.0 * dq, Pe) + np.einsum("rn,rni->ni", dtc, Pd)
        grads["P"] += np.einsum("rn,rni,rnj->nij", dq, e, e) - np.einsum("rn,ri,rnj->nij", dtc, d, e)
    return depth, alpha, rgb, grads, total, None


# ---------------------------------------------------------------------------
# fast path: sparse per-ray contribution lists


def _pack_render(params: GaussianParams):
    P, _, _ = _precisions(params)
    pk = np.empty((len(params), 10))
    pk[:, 0:3] = params.means
    pk[:, 3], pk[:, 4], pk[:, 5] = P[:, 0, 0], P[:, 0, 1], P[:, 0, 2]
    pk[:, 6], pk[:, 7], pk[:, 8] = P[:, 1, 1], P[:, 1, 2], P[:, 2, 2]
    pk[:, 9] = params.opacities
    return pk


@njit(inline="always")
def _peak(o, d, pk, g):
    """(t*, q*, c) for ray (o, d) against Gaussian row g of pk."""
    dx, dy, dz = o[0] - pk[g, 0], o[1] - pk[g, 1], o[2] - pk[g, 2]
    p00, p01, p02, p11, p12, p22 = pk[g, 3], pk[g, 4], pk[g, 5], pk[g, 6], pk[g, 7], pk[g, 8]
    pd0 = p00 * d[0] + p01 * d[1] + p02 * d[2]
    pd1 = p01 * d[0] + p11 * d[1] + p12 * d[2]
    pd2 = p02 * d[0] + p12 * d[1] + p22 * d[2]
    c = d[0] * pd0 + d[1] * pd1 + d[2] * pd2
    t = -(dx * pd0 + dy * pd1 + dz * pd2) / c
    ex, ey, ez = dx + t * d[0], dy + t * d[1], dz + t * d[2]
    q = p00 * ex * ex + p11 * ey * ey + p22 * ez * ez + 2.0 * (p01 * ex * ey + p02 * ex * ez + p12 * ey * ez)
    return t, q, c


@njit(parallel=True, cache=True)
def _count_kernel(origins, dirs, pk, qmax, near, cnt):
    for r in prange(origins.shape[0]):
        k = 0
        for g in range(pk.shape[0]):
            t, q, _ = _peak(origins[r], dirs[r], pk, g)
            if q <= qmax[g] and t > near:
                k += 1
        cnt[r] = k


@njit(parallel=True, cache=True)
def _fill_kernel(origins, dirs, pk, qmax, near, ptr, gid, tt, ww):
    for r in prange(origins.shape[0]):
        k = ptr[r]
        for g in range(pk.shape[0]):
            t, q, _ = _peak(origins[r], dirs[r], pk, g)
            if q <= qmax[g] and t > near:
                w = pk[g, 9] * np.exp(-0.5 * q)
                # insertion keeps (t, id) order since ids arrive ascending
                j = k
                while j > ptr[r] and tt[j - 1] > t:
                    gid[j], tt[j], ww[j] = gid[j - 1], tt[j - 1], ww[j - 1]
                    j -= 1
                gid[j], tt[j], ww[j] = g, t, w
                k += 1


@njit(parallel=True, cache=True)
def _shade_kernel(ptr, gid, tt, ww, colors, has_col, alpha_floor, depth, alpha, rgb):
    for r in prange(ptr.shape[0] - 1):
        T = 1.0
        A = 0.0
        S = 0.0
        c0 = c1 = c2 = 0.0
        for k in range(ptr[r], ptr[r + 1]):
            cw = T * ww[k]
            A += cw
            S += cw * tt[k]
            if has_col:
                g = gid[k]
                c0 += cw * colors[g, 0]
                c1 += cw * colors[g, 1]
                c2 += cw * colors[g, 2]
            T *= 1.0 - ww[k]
        alpha[r] = A
        depth[r] = S / max(A, alpha_floor)
        rgb[r, 0], rgb[r, 1], rgb[r, 2] = c0, c1, c2


@njit(parallel=True, cache=True)
def _ray_backward_kernel(origins, dirs, pk, ptr, gid, tt, ww, colors, has_col, alpha_floor, dD, dA, dC, Rb, partial):
    """Per-contribution gradient rows: mean 3, P upper 6, opacity 1, colour 3."""
    for r in prange(ptr.shape[0] - 1):
        lo, hi = ptr[r], ptr[r + 1]
        if hi == lo:
            continue
        T = 1.0
        A = 0.0
        S = 0.0
        for k in range(lo, hi):
            cw = T * ww[k]
            A += cw
            S += cw * tt[k]
            T *= 1.0 - ww[k]
        Ac = max(A, alpha_floor)
        gS = dD[r] / Ac
        gA = dA[r]
        if A > alpha_floor:
            gA -= dD[r] * S / (Ac * Ac)
        # y_k linearizes the loss per unit weight; Rb_k is what lies behind k
        Rb[hi - 1] = 0.0
        for k in range(hi - 1, lo, -1):
            yk = gS * tt[k] + gA
            if has_col:
                g = gid[k]
                yk += colors[g, 0] * dC[r, 0] + colors[g, 1] * dC[r, 1] + colors[g, 2] * dC[r, 2]
            Rb[k - 1] = ww[k] * yk + (1.0 - ww[k]) * Rb[k]
        o = origins[r]
        d = dirs[r]
        T = 1.0
        for k in range(lo, hi):
            g = gid[k]
            w = ww[k]
            yk = gS * tt[k] + gA
            if has_col:
                yk += colors[g, 0] * dC[r, 0] + colors[g, 1] * dC[r, 1] + colors[g, 2] * dC[r, 2]
            dw = T * (yk - Rb[k])
            cw = T * w
            dt = cw * gS
            t, q, c = _peak(o, d, pk, g)
            G = np.exp(-0.5 * q)
            ex, ey, ez = o[0] - pk[g, 0] + t * d[0], o[1] - pk[g, 1] + t * d[1], o[2] - pk[g, 2] + t * d[2]
            p00, p01, p02, p11, p12, p22 = pk[g, 3], pk[g, 4], pk[g, 5], pk[g, 6], pk[g, 7], pk[g, 8]
            pe0 = p00 * ex + p01 * ey + p02 * ez
            pe1 = p01 * ex + p11 * ey + p12 * ez
            pe2 = p02 * ex + p12 * ey + p22 * ez
            pd0 = p00 * d[0] + p01 * d[1] + p02 * d[2]
            pd1 = p01 * d[0] + p11 * d[1] + p12 * d[2]
            pd2 = p02 * d[0] + p12 * d[1] + p22 * d[2]
            dq = -0.5 * dw * w
            dtc = dt / c
            row = partial[k]
            row[0] = -2.0 * dq * pe0 + dtc * pd0
            row[1] = -2.0 * dq * pe1 + dtc * pd1
            row[2] = -2.0 * dq * pe2 + dtc * pd2
            # symmetric part of dq·e eᵀ − dtc·d eᵀ
            row[3] = dq * ex * ex - dtc * d[0] * ex
            row[4] = dq * ex * ey - 0.5 * dtc * (d[0] * ey + d[1] * ex)
            row[5] = dq * ex * ez - 0.5 * dtc * (d[0] * ez + d[2] * ex)
            row[6] = dq * ey * ey - dtc * d[1] * ey
            row[7] = dq * ey * ez - 0.5 * dtc * (d[1] * ez + d[2] * ey)
            row[8] = dq * ez * ez - dtc * d[2] * ez
            row[9] = dw * G
            row[10] = cw * dC[r, 0]
            row[11] = cw * dC[r, 1]
            row[12] = cw * dC[r, 2]
            T *= 1.0 - w


def _contributions(params, rays: RaySet, cfg: RenderConfig):
    pk = _pack_render(params)
    nr = len(rays)
    # a·exp(-q/2) >= floor  <=>  q <= 2 log(a / floor), so exp runs only on hits
    with np.errstate(divide="ignore"):
        qmax = 2.0 * np.log(pk[:, 9] / cfg.response_floor)
    cnt = np.empty(nr, dtype=np.int64)
    _count_kernel(rays.origins, rays.directions, pk, qmax, cfg.near_clip, cnt)
    ptr = np.zeros(nr + 1, dtype=np.int64)
    np.cumsum(cnt, out=ptr[1:])
    tot = int(ptr[-1])
    gid = np.empty(tot, dtype=np.int64)
    tt = np.empty(tot)
    ww = np.empty(tot)
    _fill_kernel(rays.origins, rays.directions, pk, qmax, cfg.near_clip, ptr, gid, tt, ww)
    return pk, ptr, gid, tt, ww


def _composite_fast(params, rays: RaySet, cfg: RenderConfig, colors, upstream=None, cache=None):
    n = len(params)
    nr = len(rays)
    depth = np.zeros(nr)
    alpha = np.zeros(nr)
    rgb = np.zeros((nr, 3))
    if n == 0 or nr == 0:
        grads = None
        if upstream is not None:
            grads = dict(m=np.zeros((n, 3)), P6=np.zeros((n, 6)), a=np.zeros(n), col=np.zeros((n, 3)))
        return depth, alpha, (rgb if colors is not None else None), grads, 0, None
    if cache is None:
        cache = _contributions(params, rays, cfg)
    pk, ptr, gid, tt, ww = cache
    has_col = colors is not None
    col = np.ascontiguousarray(colors, dtype=np.float64) if has_col else np.zeros((1, 3))
    _shade_kernel(ptr, gid, tt, ww, col, has_col, cfg.alpha_floor, depth, alpha, rgb)
    grads = None
    if upstream is not None:
        dD, dA, dC = upstream
        use_col = has_col and dC is not None
        dCa = np.ascontiguousarray(dC, dtype=np.float64) if use_col else np.zeros((nr, 3))
        partial = np.empty((gid.size, 13))
        _ray_backward_kernel(
            rays.origins, rays.directions, pk, ptr, gid, tt, ww, col, use_col, cfg.alpha_floor,
            np.ascontiguousarray(dD, dtype=np.float64), np.ascontiguousarray(dA, dtype=np.float64), dCa,
            np.empty(gid.size), partial,
        )
        slot = np.argsort(gid, kind="stable").astype(np.int64)
        sptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(gid, minlength=n), out=sptr[1:])
        red = np.empty((n, 13))
        _reduce_slots_kernel(np.arange(n, dtype=np.int64), sptr, slot, partial, red)
        grads = dict(m=red[:, 0:3], P6=red[:, 3:9], a=red[:, 9].copy(), col=red[:, 10:13])
    return depth, alpha, (rgb if has_col else None), grads, int(gid.size), cache


def _backend(cfg: RenderConfig):
    if cfg.backend == "fast":
        return _composite_fast
    if cfg.backend == "reference":
        return _composite
    raise ValueError(f"unknown render backend {cfg.backend!r}")


def render(params: GaussianParams, camera: CameraModel, cfg: RenderConfig | None = None, with_rgb: bool = False) -> RenderOutput:
    cfg = cfg or RenderConfig()
    colors = None
    if with_rgb:
        if params.colors is None:
            raise MissingAttribute("Gaussian colours are required for RGB rendering")
        colors = np.asarray(params.colors, dtype=np.float64)
    depth, alpha, rgb, _, total, cache = _backend(cfg)(params, generate_rays(camera), cfg, colors)
    shape = (camera.height, camera.width)
    return RenderOutput(
        depth.reshape(shape),
        alpha.reshape(shape),
        (alpha >= cfg.valid_alpha).reshape(shape),
        None if rgb is None else rgb.reshape(shape + (3,)),
        total,
        cache,
    )


def render_depth(params: GaussianParams, camera: CameraModel, cfg: RenderConfig | None = None) -> RenderOutput:
    return render(params, camera, cfg, with_rgb=False)


def render_rgb(params: GaussianParams, camera: CameraModel, cfg: RenderConfig | None = None) -> np.ndarray:
    return render(params, camera, cfg, with_rgb=True).rgb


def render_backward(params: GaussianParams, camera: CameraModel, cfg: RenderConfig | None = None, d_depth=None, d_alpha=None, d_rgb=None, out: RenderOutput | None = None) -> RenderGradients:
    """Gradient of ⟨d_depth, depth⟩ + ⟨d_alpha, alpha⟩ + ⟨d_rgb, rgb⟩ w.r.t. raw parameters.

    Passing the forward's RenderOutput as `out` skips rebuilding the
    per-ray contribution lists; the parameters must be unchanged since.
    """
    cfg = cfg or RenderConfig()
    n = len(params)
    nr = camera.width * camera.height
    dD = np.zeros(nr) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(nr)
    dA = np.zeros(nr) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64).reshape(nr)
    colors = None
    dC = None
    if d_rgb is not None:
        if params.colors is None:
            raise MissingAttribute("Gaussian colours are required for RGB rendering")
        colors = np.asarray(params.colors, dtype=np.float64)
        dC = np.asarray(d_rgb, dtype=np.float64).reshape(nr, 3)
    cache = out.cache if out is not None else None
    _, _, _, g, _, _ = _backend(cfg)(params, generate_rays(camera), cfg, colors, (dD, dA, dC), cache)
    if n == 0:
        z = np.zeros((0, 3))
        return RenderGradients(z, np.zeros((0, 4)), z, np.zeros(0), np.zeros(0), None if colors is None else z)
    if "P6" in g:
        g6 = g["P6"]
    else:
        GP = 0.5 * (g["P"] + np.transpose(g["P"], (0, 2, 1)))
        g6 = GP[:, [0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2]]
    g_R, g_ls = precision_vjp(params.quats, params.log_scales, g6)
    a = params.opacities
    return RenderGradients(
        means=g["m"],
        quats=rotmat_vjp(params.quats, g_R),
        log_scales=g_ls,
        opacity_logits=g["a"] * a * (1 - a),
        opacities=g["a"],
        colors=g["col"] if colors is not None else None,
    )


# ---------------------------------------------------------------------------
# losses


def _masked_l1(pred, target, mask, per_pixel):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    nvalid = int(mask.sum())
    if nvalid == 0:
        raise EmptyMask("no valid pixels to supervise")
    full = mask if mask.shape == pred.shape else np.broadcast_to(mask[..., None], pred.shape)
    diff = np.where(full, pred - target, 0.0)
    denom = nvalid * per_pixel
    return float(np.abs(diff).sum() / denom), np.sign(diff) / denom


def depth_loss(pred, target, valid_mask):
    """Masked mean absolute depth error and its gradient w.r.t. pred."""
    return _masked_l1(pred, target, valid_mask, 1)


def rgb_loss(pred, target, valid_mask):
    """Masked mean absolute colour error over valid pixels and channels."""
    return _masked_l1(pred, target, valid_mask, 3)


# ---------------------------------------------------------------------------
# warping


def warp_gaussians(params: GaussianParams, dt: float, ego: Pose | None = None, window: float = 0.5) -> GaussianParams:
    """Advance Gaussians by their velocities, then apply the ego transform."""
    if abs(dt) > window + 1e-12:
        raise ValueError(f"|dt|={abs(dt)} exceeds the warp window {window}")
    ego = ego or Pose()
    out = params.copy()
    out.means = ego.apply(params.means + params.velocities * dt)
    out.velocities = ego.rotate(params.velocities)
    if len(params):
        out.quats = quat_multiply(np.broadcast_to(ego.rotation, params.quats.shape), params.quats)
    return out


def warp_vjp(params: GaussianParams, dt: float, ego: Pose | None, d_means, d_quats, d_velocities=None):
    """Pull gradients on warped means/quats/velocities back to the originals."""
    ego = ego or Pose()
    Rt = ego.matrix.T
    dm = np.asarray(d_means) @ Rt.T  # R^T g per row
    dv = dt * dm
    if d_velocities is not None:
        dv = dv + np.asarray(d_velocities) @ Rt.T
    dq = np.asarray(d_quats) @ quat_left_matrix(ego.rotation)
    return dm, dq, dv
