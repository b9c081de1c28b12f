"""Streaming state: separated top-k query selection and the query queue."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussOccError, Pose, QueryParams, quat_multiply, sigmoid


class OutOfOrderFrame(GaussOccError):
    pass


def select_indices(positions, opacities, k: int, delta: float) -> np.ndarray:
    """Greedy δ-separated top-k. Returns accepted indices in acceptance order.

    Candidates are visited by opacity descending (ties by index ascending);
    one is accepted if it lies at least `delta` from every accepted one.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    pos = np.asarray(positions, dtype=np.float64)
    op = np.asarray(opacities, dtype=np.float64)
    order = np.lexsort((np.arange(op.size), -op))
    if delta == 0:
        return order[:k].astype(np.int64)
    accepted = []
    d2 = delta * delta
    for i in order:
        if accepted:
            diff = pos[accepted] - pos[i]
            if np.min(np.einsum("ij,ij->i", diff, diff)) < d2:
                continue
        accepted.append(int(i))
        if len(accepted) == k:
            break
    return np.array(accepted, dtype=np.int64)


def select_queries(queries: QueryParams, k: int, delta: float) -> QueryParams:
    idx = select_indices(queries.positions, sigmoid(queries.opacity_logits), k, delta)
    return queries.subset(idx)


def transform_queries(queries: QueryParams, pose: Pose) -> QueryParams:
    """Express queries in another frame; `pose` maps old coordinates to new.

    Anchors move rigidly and offsets, child offsets, child rotations and
    velocities rotate with the frame so that the decoded geometry is unchanged.
    """
    out = queries.copy()
    out.anchors = pose.apply(queries.anchors)
    out.offsets = pose.rotate(queries.offsets)
    out.velocities = pose.rotate(queries.velocities)
    out.child_offsets = pose.rotate(queries.child_offsets)
    if queries.num_queries:
        out.child_quats = quat_multiply(np.broadcast_to(pose.rotation, queries.child_quats.shape), queries.child_quats)
    return out


def advance_queries(queries: QueryParams, dt: float) -> QueryParams:
    """Move queries along their velocities by dt seconds."""
    out = queries.copy()
    out.anchors = queries.anchors + queries.velocities * dt
    return out


@dataclass(frozen=True)
class QueueEntry:
    frame_id: int
    queries: QueryParams
    pose: Pose


@dataclass(frozen=True)
class QueryQueue:
    capacity: int = 4
    entries: tuple = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    @property
    def frame_ids(self):
        return [e.frame_id for e in self.entries]

    @property
    def latest(self) -> QueueEntry | None:
        return self.entries[-1] if self.entries else None


def push_frame(queue: QueryQueue, frame_id: int, queries: QueryParams, pose: Pose, k: int | None = None) -> QueryQueue:
    """Append a frame's selected queries, evicting the oldest beyond capacity."""
    if queue.entries and frame_id <= queue.entries[-1].frame_id:
        raise OutOfOrderFrame(f"frame {frame_id} does not follow frame {queue.entries[-1].frame_id}")
    if k is not None and queries.num_queries > k:
        raise ValueError(f"pushed {queries.num_queries} queries, more than the selection size {k}")
    entries = queue.entries + (QueueEntry(frame_id, queries, pose),)
    return QueryQueue(queue.capacity, entries[-queue.capacity :])


def gather_history(queue: QueryQueue, current_pose: Pose) -> list[tuple[int, QueryParams]]:
    """Every stored frame's queries re-expressed in the current frame."""
    inv = current_pose.inverse()
    return [(e.frame_id, transform_queries(e.queries, inv.compose(e.pose))) for e in queue.entries]
