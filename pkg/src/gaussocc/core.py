"""Domain types, parameterizations and binary file formats."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OPACITY_EPS = 1e-6
LOGIT_MAX = math.log((1.0 - OPACITY_EPS) / OPACITY_EPS)


class GaussOccError(Exception):
    """Base class for all library errors."""


class FormatError(GaussOccError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class DegenerateRotation(GaussOccError):
    pass


class ShapeMismatch(GaussOccError):
    pass


# ---------------------------------------------------------------------------
# small math helpers


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), OPACITY_EPS, 1.0 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def softmax_vjp(probs, grad_probs):
    """Gradient w.r.t. logits given gradient w.r.t. softmax output."""
    inner = (probs * grad_probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-8):
        raise DegenerateRotation("quaternion norm below 1e-8")
    return q / n


def quat_to_rotmat(q):
    """(…,4) quaternions (w,x,y,z), any norm > 0 -> (…,3,3) rotation matrices."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_vjp(q_raw, grad_R):
    """Pull a gradient on R = q2r(q/|q|) back to the raw quaternion."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = grad_R
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    gq = np.stack([dw, dx, dy, dz], axis=-1)
    gq = gq - q * (gq * q).sum(axis=-1, keepdims=True)
    return gq / norm


def quat_multiply(a, b):
    """Hamilton product a ⊗ b for (…,4) arrays in (w,x,y,z) order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_matrix(a):
    """4x4 matrix L(a) with a ⊗ b = L(a) @ b."""
    w, x, y, z = np.asarray(a, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


# ---------------------------------------------------------------------------
# rigid poses


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t with a timestamp in seconds."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_yaw(cls, yaw, translation, timestamp=0.0):
        return cls(quat_from_axis_angle([0, 0, 1], yaw), np.asarray(translation, dtype=np.float64), timestamp)

    @property
    def matrix(self):
        return quat_to_rotmat(self.rotation)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.matrix.T

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first."""
        return Pose(
            quat_multiply(self.rotation, other.rotation),
            self.apply(other.translation),
            other.timestamp,
        )

    def inverse(self) -> "Pose":
        inv_rot = quat_conjugate(self.rotation)
        return Pose(inv_rot, -(quat_to_rotmat(inv_rot) @ self.translation), self.timestamp)

    def relative_to(self, other: "Pose") -> "Pose":
        """Transform taking coordinates of this frame into `other`'s frame."""
        return other.inverse().compose(self)

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]), float(d.get("timestamp", 0.0)))


# ---------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True)
class SemanticGaussian:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    classes: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class GaussianSet:
    """Constrained values of N Gaussians, exactly what the .sgau file stores."""

    positions: np.ndarray  # (N,3)
    rotations: np.ndarray  # (N,4) unit, (w,x,y,z)
    scales: np.ndarray  # (N,3) > 0
    opacities: np.ndarray  # (N,)
    classes: np.ndarray  # (N,C)
    velocities: np.ndarray  # (N,3)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def num_classes(self):
        return self.classes.shape[1]

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, num_classes)), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, gaussians, num_classes=None):
        if not gaussians:
            return cls.empty(num_classes or 1)
        return cls(
            np.array([g.position for g in gaussians], dtype=np.float64),
            np.array([g.rotation for g in gaussians], dtype=np.float64),
            np.array([g.scale for g in gaussians], dtype=np.float64),
            np.array([g.opacity for g in gaussians], dtype=np.float64),
            np.array([g.classes for g in gaussians], dtype=np.float64),
            np.array([g.velocity for g in gaussians], dtype=np.float64),
        )

    def to_list(self):
        return [
            SemanticGaussian(self.positions[i], self.rotations[i], self.scales[i], float(self.opacities[i]), self.classes[i], self.velocities[i])
            for i in range(len(self))
        ]

    def to_params(self, class_floor=1e-9) -> "GaussianParams":
        return GaussianParams(
            means=self.positions.astype(np.float64).copy(),
            quats=quat_normalize(self.rotations) if len(self) else np.zeros((0, 4)),
            log_scales=np.log(self.scales.astype(np.float64)),
            opacity_logits=logit(self.opacities),
            class_logits=np.log(np.maximum(self.classes.astype(np.float64), class_floor)),
            velocities=self.velocities.astype(np.float64).copy(),
        )


@dataclass
class GaussianParams:
    """Unconstrained (raw) parameters of N Gaussians.

    rotation is a raw 4-vector normalized on use, scale is exp(log_scales),
    opacity is sigmoid(opacity_logits), classes are softmax(class_logits).
    `colors` is the optional pretraining attribute, already in [0, 1].
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    class_logits: np.ndarray
    velocities: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        if self.velocities is None:
            self.velocities = np.zeros_like(self.means)

    def __len__(self):
        return self.means.shape[0]

    @property
    def num_classes(self):
        return self.class_logits.shape[1]

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def classes(self):
        if len(self) == 0:
            return np.zeros((0, self.num_classes))
        return softmax(self.class_logits)

    def rotmats(self):
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return quat_to_rotmat(self.quats)

    def copy(self):
        return GaussianParams(
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.class_logits.copy(),
            self.velocities.copy(),
            None if self.colors is None else self.colors.copy(),
        )

    def to_set(self) -> GaussianSet:
        return GaussianSet(
            self.means.copy(),
            quat_normalize(self.quats) if len(self) else np.zeros((0, 4)),
            self.scales,
            np.clip(self.opacities, OPACITY_EPS, 1 - OPACITY_EPS),
            self.classes,
            self.velocities.copy(),
        )

    @classmethod
    def empty(cls, num_classes):
        return GaussianSet.empty(num_classes).to_params()


# ---------------------------------------------------------------------------
# Queries


@dataclass(frozen=True)
class ChildGaussian:
    offset: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float


@dataclass(frozen=True)
class SceneQuery:
    position: np.ndarray
    offset: np.ndarray
    opacity: float
    velocity: np.ndarray
    children: tuple
    classes: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("query opacity outside [0, 1]")
        for child in self.children:
            if not 0.0 <= child.opacity <= 1.0:
                raise ValueError("child opacity outside [0, 1]")

    @property
    def anchor(self):
        return np.asarray(self.position) + np.asarray(self.offset)


def decode_query(q: SceneQuery) -> list[SemanticGaussian]:
    base = np.asarray(q.position, dtype=np.float64) + np.asarray(q.offset, dtype=np.float64)
    return [
        SemanticGaussian(
            position=base + np.asarray(c.offset, dtype=np.float64),
            rotation=np.asarray(c.rotation, dtype=np.float64),
            scale=np.asarray(c.scale, dtype=np.float64),
            opacity=q.opacity * c.opacity,
            classes=np.asarray(q.classes, dtype=np.float64),
            velocity=np.asarray(q.velocity, dtype=np.float64),
        )
        for c in q.children
    ]


@dataclass
class QueryParams:
    """K queries with J children each, in raw (optimizable) form.

    `anchors` are the fixed initial positions p; everything else is learned.
    """

    anchors: np.ndarray  # (K,3)
    offsets: np.ndarray  # (K,3)
    opacity_logits: np.ndarray  # (K,)
    velocities: np.ndarray  # (K,3)
    child_offsets: np.ndarray  # (K,J,3)
    child_quats: np.ndarray  # (K,J,4)
    child_log_scales: np.ndarray  # (K,J,3)
    child_opacity_logits: np.ndarray  # (K,J)
    class_logits: np.ndarray  # (K,C)
    child_color_logits: np.ndarray | None = None  # (K,J,3)

    LEARNABLE = (
        "offsets",
        "opacity_logits",
        "velocities",
        "child_offsets",
        "child_quats",
        "child_log_scales",
        "child_opacity_logits",
        "class_logits",
        "child_color_logits",
    )

    @property
    def num_queries(self):
        return self.anchors.shape[0]

    @property
    def children_per_query(self):
        return self.child_offsets.shape[1]

    @property
    def positions(self):
        return self.anchors + self.offsets

    def copy(self):
        return QueryParams(**{k: (None if v is None else np.array(v, copy=True)) for k, v in self.__dict__.items()})

    def arrays(self):
        return {k: getattr(self, k) for k in self.LEARNABLE if getattr(self, k) is not None}

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return QueryParams(**{k: (None if v is None else np.array(v[index], copy=True)) for k, v in self.__dict__.items()})

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if p.num_queries > 0] or parts[:1]
        out = {}
        for key in parts[0].__dict__:
            vals = [getattr(p, key) for p in parts]
            out[key] = None if any(v is None for v in vals) else np.concatenate(vals, axis=0)
        return QueryParams(**out)


def decode_queries(qp: QueryParams) -> GaussianParams:
    """Vectorized decode: K queries -> K·J Gaussians (query-major order)."""
    K, J = qp.num_queries, qp.children_per_query
    a_q = sigmoid(qp.opacity_logits)[:, None]
    a_c = sigmoid(qp.child_opacity_logits)
    eff = np.clip(a_q * a_c, OPACITY_EPS, 1 - OPACITY_EPS)
    colors = None
    if qp.child_color_logits is not None:
        colors = sigmoid(qp.child_color_logits).reshape(K * J, 3)
    return GaussianParams(
        means=(qp.positions[:, None, :] + qp.child_offsets).reshape(K * J, 3),
        quats=qp.child_quats.reshape(K * J, 4).copy(),
        log_scales=qp.child_log_scales.reshape(K * J, 3).copy(),
        opacity_logits=logit(eff).reshape(K * J),
        class_logits=np.repeat(qp.class_logits, J, axis=0),
        velocities=np.repeat(qp.velocities, J, axis=0),
        colors=colors,
    )


def decode_queries_vjp(qp: QueryParams, d_means, d_quats, d_log_scales, d_opacity, d_class_logits=None, d_velocities=None, d_colors=None):
    """Pull per-Gaussian gradients back onto query parameters.

    `d_opacity` is w.r.t. the effective opacity value a·a_j (not its logit).
    """
    K, J = qp.num_queries, qp.children_per_query
    grads = {}
    dm = np.asarray(d_means).reshape(K, J, 3)
    grads["child_offsets"] = dm.copy()
    grads["offsets"] = dm.sum(axis=1)
    grads["child_quats"] = np.asarray(d_quats).reshape(K, J, 4).copy()
    grads["child_log_scales"] = np.asarray(d_log_scales).reshape(K, J, 3).copy()
    a_q = sigmoid(qp.opacity_logits)
    a_c = sigmoid(qp.child_opacity_logits)
    da = np.asarray(d_opacity).reshape(K, J)
    # the clip in decode_queries only bites at the extremes; treated as identity
    grads["child_opacity_logits"] = da * a_q[:, None] * a_c * (1 - a_c)
    grads["opacity_logits"] = (da * a_c).sum(axis=1) * a_q * (1 - a_q)
    if d_class_logits is not None:
        grads["class_logits"] = np.asarray(d_class_logits).reshape(K, J, -1).sum(axis=1)
    else:
        grads["class_logits"] = np.zeros_like(qp.class_logits)
    if d_velocities is not None:
        grads["velocities"] = np.asarray(d_velocities).reshape(K, J, 3).sum(axis=1)
    else:
        grads["velocities"] = np.zeros_like(qp.velocities)
    if qp.child_color_logits is not None:
        if d_colors is None:
            grads["child_color_logits"] = np.zeros_like(qp.child_color_logits)
        else:
            c = sigmoid(qp.child_color_logits)
            grads["child_color_logits"] = np.asarray(d_colors).reshape(K, J, 3) * c * (1 - c)
    return grads


# ---------------------------------------------------------------------------
# Voxel grids


@dataclass
class VoxelGrid:
    origin: np.ndarray
    voxel_size: np.ndarray
    dims: tuple
    class_count: int
    labels: np.ndarray | None = None  # (nx,ny,nz) ints in [0, C]; C = empty

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        self.voxel_size = np.full(3, float(vs)) if vs.ndim == 0 else vs.reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if self.labels is None:
            self.labels = np.full(self.dims, self.class_count, dtype=np.int64)
        else:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.dims:
                raise ShapeMismatch(f"labels shape {self.labels.shape} != dims {self.dims}")

    @property
    def num_voxels(self):
        return int(np.prod(self.dims))

    @property
    def empty_label(self):
        return self.class_count

    def like(self, labels=None):
        return VoxelGrid(self.origin.copy(), self.voxel_size.copy(), self.dims, self.class_count, labels)

    def centers(self):
        """(V,3) voxel centers in flat order (x fastest)."""
        nx, ny, nz = self.dims
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.origin + (idx + 0.5) * self.voxel_size

    def flat_labels(self):
        return self.labels.reshape(-1, order="F")

    @staticmethod
    def unflatten(flat, dims):
        return np.asarray(flat).reshape(dims, order="F")

    def to_spec(self):
        return {
            "origin": self.origin.tolist(),
            "voxel_size": self.voxel_size.tolist(),
            "dims": list(self.dims),
            "class_count": self.class_count,
        }

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["origin"], spec["voxel_size"], tuple(spec["dims"]), int(spec["class_count"]))


@dataclass
class OccupancyField:
    """Per-voxel [α·e ; 1-α] rows, flat voxel order (x fastest)."""

    probs: np.ndarray  # (V, C+1)
    dims: tuple
    floored: np.ndarray | None = None  # (V,) bool: class mixture fell back to uniform

    def argmax_labels(self):
        return VoxelGrid.unflatten(np.argmax(self.probs, axis=1), self.dims)

    def to_grid(self, like: VoxelGrid) -> VoxelGrid:
        return like.like(self.argmax_labels().astype(np.int64))

    def as_float32(self):
        return self.probs.astype(np.float32)


@dataclass
class RaySet:
    """Ray origins and unit directions, (R,3) each, plus where they came from."""

    origins: np.ndarray
    directions: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.origins = np.broadcast_to(np.asarray(self.origins, dtype=np.float64), self.directions.shape).copy()
        n = np.linalg.norm(self.directions, axis=1)
        if n.size and np.max(np.abs(n - 1.0)) > 1e-6:
            raise ValueError("ray directions must be unit-norm")

    def __len__(self):
        return self.directions.shape[0]

    @staticmethod
    def concat(sets):
        return RaySet(np.concatenate([s.origins for s in sets]), np.concatenate([s.directions for s in sets]), sets[0].source)


# ---------------------------------------------------------------------------
# binary formats

_HDR = struct.Struct("<4sI")
VERSION = 1


def _check_header(buf, magic):
    if len(buf) < _HDR.size:
        raise TruncatedPayload("file shorter than header")
    got, version = _HDR.unpack_from(buf, 0)
    if got != magic:
        raise BadMagic(f"expected {magic!r}, got {got!r}")
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}")


def _finite_f32(arr, what):
    arr = np.asarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite value in {what}")
    return arr


def gaussians_to_bytes(gs: GaussianSet) -> bytes:
    n, C = len(gs), gs.num_classes
    rec = np.concatenate(
        [
            np.asarray(gs.positions).reshape(n, 3),
            np.asarray(gs.rotations).reshape(n, 4),
            np.asarray(gs.scales).reshape(n, 3),
            np.asarray(gs.opacities).reshape(n, 1),
            np.asarray(gs.classes).reshape(n, C),
            np.asarray(gs.velocities).reshape(n, 3),
        ],
        axis=1,
    )
    rec = _finite_f32(rec, "gaussian records")
    return _HDR.pack(b"SGAU", VERSION) + struct.pack("<II", n, C) + rec.astype("<f4").tobytes()


def gaussians_from_bytes(buf: bytes) -> GaussianSet:
    _check_header(buf, b"SGAU")
    if len(buf) < 16:
        raise TruncatedPayload("gaussian header truncated")
    n, C = struct.unpack_from("<II", buf, 8)
    width = 3 + 4 + 3 + 1 + C + 3
    expected = 16 + 4 * width * n
    if len(buf) != expected:
        raise TruncatedPayload(f"expected {expected} bytes, got {len(buf)}")
    rec = np.frombuffer(buf, dtype="<f4", offset=16).reshape(n, width)
    if not np.all(np.isfinite(rec)):
        raise NonFiniteValue("non-finite value in gaussian records")
    rec = rec.astype(np.float32)
    o = np.cumsum([0, 3, 4, 3, 1, C, 3])
    return GaussianSet(
        rec[:, o[0] : o[1]],
        rec[:, o[1] : o[2]],
        rec[:, o[2] : o[3]],
        rec[:, o[3]],
        rec[:, o[4] : o[5]],
        rec[:, o[5] : o[6]],
    )


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    if grid.class_count > 255:
        raise ValueError("class_count must fit in u8")
    labels = grid.flat_labels()
    if labels.size and (labels.min() < 0 or labels.max() > grid.class_count):
        raise ValueError("labels outside [0, C]")
    head = _HDR.pack(b"SVOX", VERSION) + struct.pack("<3I", *grid.dims)
    head += _finite_f32(grid.origin, "origin").astype("<f4").tobytes()
    head += _finite_f32(grid.voxel_size, "voxel_size").astype("<f4").tobytes()
    head += struct.pack("<I", grid.class_count)
    return head + labels.astype(np.uint8).tobytes()


def grid_from_bytes(buf: bytes) -> VoxelGrid:
    _check_header(buf, b"SVOX")
    if len(buf) < 48:
        raise TruncatedPayload("grid header truncated")
    dims = struct.unpack_from("<3I", buf, 8)
    floats = np.frombuffer(buf, dtype="<f4", count=6, offset=20)
    if not np.all(np.isfinite(floats)):
        raise NonFiniteValue("non-finite origin/voxel_size")
    (C,) = struct.unpack_from("<I", buf, 44)
    n = int(np.prod(dims))
    if len(buf) != 48 + n:
        raise TruncatedPayload(f"expected {48 + n} bytes, got {len(buf)}")
    labels = np.frombuffer(buf, dtype=np.uint8, offset=48).astype(np.int64)
    if n and labels.max() > C:
        raise FormatError("label outside [0, C]")
    return VoxelGrid(floats[:3].astype(np.float64), floats[3:].astype(np.float64), dims, C, VoxelGrid.unflatten(labels, dims))


def points_to_bytes(points) -> bytes:
    pts = _finite_f32(np.asarray(points).reshape(-1, 3), "points")
    return _HDR.pack(b"SPTS", VERSION) + struct.pack("<I", pts.shape[0]) + pts.astype("<f4").tobytes()


def points_from_bytes(buf: bytes) -> np.ndarray:
    _check_header(buf, b"SPTS")
    if len(buf) < 12:
        raise TruncatedPayload("point header truncated")
    (n,) = struct.unpack_from("<I", buf, 8)
    if len(buf) != 12 + 12 * n:
        raise TruncatedPayload(f"expected {12 + 12 * n} bytes, got {len(buf)}")
    pts = np.frombuffer(buf, dtype="<f4", offset=12).reshape(n, 3).astype(np.float32)
    if not np.all(np.isfinite(pts)):
        raise NonFiniteValue("non-finite point")
    return pts


def image_to_bytes(image) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, ch = img.shape
    data = _finite_f32(img, "image")
    return _HDR.pack(b"SIMG", VERSION) + struct.pack("<3I", w, h, ch) + data.astype("<f4").tobytes()


def image_from_bytes(buf: bytes) -> np.ndarray:
    _check_header(buf, b"SIMG")
    if len(buf) < 20:
        raise TruncatedPayload("image header truncated")
    w, h, ch = struct.unpack_from("<3I", buf, 8)
    if len(buf) != 20 + 4 * w * h * ch:
        raise TruncatedPayload("image payload size mismatch")
    img = np.frombuffer(buf, dtype="<f4", offset=20).reshape(h, w, ch).astype(np.float32)
    if not np.all(np.isfinite(img)):
        raise NonFiniteValue("non-finite pixel")
    return img


def write_gaussians(path, gs: GaussianSet):
    Path(path).write_bytes(gaussians_to_bytes(gs))


def read_gaussians(path) -> GaussianSet:
    return gaussians_from_bytes(Path(path).read_bytes())


def write_grid(path, grid: VoxelGrid):
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


def write_points(path, points):
    Path(path).write_bytes(points_to_bytes(points))


def read_points(path) -> np.ndarray:
    return points_from_bytes(Path(path).read_bytes())


def write_image(path, image):
    Path(path).write_bytes(image_to_bytes(image))


def read_image(path) -> np.ndarray:
    return image_from_bytes(Path(path).read_bytes())
