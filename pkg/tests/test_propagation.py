import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussocc.core import Pose, QueryParams, decode_queries, logit
from gaussocc.propagation import (
    OutOfOrderFrame,
    QueryQueue,
    advance_queries,
    gather_history,
    push_frame,
    select_indices,
    select_queries,
    transform_queries,
)

from oracles import separated_topk


def _queries(rng, K, J=2, C=3):
    return QueryParams(
        anchors=rng.normal(size=(K, 3)) * 3,
        offsets=rng.normal(size=(K, 3)) * 0.3,
        opacity_logits=rng.normal(size=K),
        velocities=rng.normal(size=(K, 3)),
        child_offsets=rng.normal(size=(K, J, 3)),
        child_quats=rng.normal(size=(K, J, 4)),
        child_log_scales=rng.normal(size=(K, J, 3)) * 0.2,
        child_opacity_logits=rng.normal(size=(K, J)),
        class_logits=rng.normal(size=(K, C)),
    )


def test_zero_delta_is_plain_topk():
    op = np.array([0.2, 0.9, 0.5, 0.9, 0.1])
    pos = np.zeros((5, 3))
    assert select_indices(pos, op, 3, 0.0).tolist() == [1, 3, 2]


def test_coincident_queries_keep_the_more_opaque():
    pos = np.zeros((2, 3))
    assert select_indices(pos, np.array([0.8, 0.9]), 2, 1.0).tolist() == [1]


def test_invalid_arguments():
    with pytest.raises(ValueError):
        select_indices(np.zeros((2, 3)), np.ones(2), 0, 1.0)
    with pytest.raises(ValueError):
        select_indices(np.zeros((2, 3)), np.ones(2), 1, -1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_selection_matches_greedy_oracle(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 5, (n, 3))
    # coarse opacities force ties
    op = rng.integers(0, 4, n) / 4.0
    k = int(rng.integers(1, n + 1))
    delta = float(rng.choice([0.0, 0.5, 1.0, 2.5]))
    assert select_indices(pos, op, k, delta).tolist() == separated_topk(pos, op, k, delta)


def test_select_queries_uses_refined_positions():
    rng = np.random.default_rng(0)
    qp = _queries(rng, 2)
    qp.anchors[:] = [[0.0, 0, 0], [5.0, 0, 0]]
    qp.offsets[:] = [[0.0, 0, 0], [-5.0, 0, 0]]  # both sit at the origin
    qp.opacity_logits[:] = [1.0, 2.0]
    sel = select_queries(qp, 2, 1.0)
    assert sel.num_queries == 1
    np.testing.assert_array_equal(sel.anchors[0], [5.0, 0, 0])


def test_selection_properties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        pos = rng.uniform(0, 4, (n, 3))
        op = rng.uniform(size=n)
        k = int(rng.integers(1, n + 1))
        sel = select_indices(pos, op, k, 1.0)
        assert np.all(np.diff(op[sel]) <= 0)
        perm = rng.permutation(n)
        sel_p = select_indices(pos[perm], op[perm], k, 1.0)
        assert sorted(perm[sel_p].tolist()) == sorted(sel.tolist())
        assert len(select_indices(pos, op, k, 1.7)) <= len(sel)


def test_separation_invariant_on_1000_cases():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        pos = rng.uniform(0, 3, (n, 3))
        delta = float(rng.uniform(0, 2))
        sel = select_indices(pos, rng.uniform(size=n), int(rng.integers(1, n + 1)), delta)
        p = pos[sel]
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        assert np.all(d[~np.eye(len(sel), dtype=bool)] >= delta)


# ---------------------------------------------------------------------------
# queue


def test_queue_evicts_oldest():
    rng = np.random.default_rng(3)
    q = QueryQueue(4)
    for f in range(1, 6):
        q = push_frame(q, f, _queries(rng, 2), Pose())
    assert q.frame_ids == [2, 3, 4, 5]
    assert len(q) == 4 and q.latest.frame_id == 5


def test_queue_rejects_out_of_order_frames():
    q = push_frame(QueryQueue(4), 3, _queries(np.random.default_rng(4), 1), Pose())
    with pytest.raises(OutOfOrderFrame):
        push_frame(q, 3, _queries(np.random.default_rng(4), 1), Pose())
    with pytest.raises(OutOfOrderFrame):
        push_frame(q, 2, _queries(np.random.default_rng(4), 1), Pose())


def test_queue_asserts_selection_size():
    with pytest.raises(ValueError):
        push_frame(QueryQueue(), 0, _queries(np.random.default_rng(5), 3), Pose(), k=2)


def test_gather_history_identity_and_translation():
    rng = np.random.default_rng(6)
    qp = _queries(rng, 3)
    q = push_frame(QueryQueue(), 0, qp, Pose([1, 0, 0, 0], [2.0, 1.0, 0.0]))
    (fid, same), = gather_history(q, Pose([1, 0, 0, 0], [2.0, 1.0, 0.0]))
    assert fid == 0
    np.testing.assert_allclose(same.positions, qp.positions, atol=1e-12)
    (_, shifted), = gather_history(q, Pose([1, 0, 0, 0], [5.0, 1.0, 0.0]))
    np.testing.assert_allclose(shifted.positions, qp.positions - [3.0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(shifted.velocities, qp.velocities)


def test_transform_round_trip_preserves_decoded_geometry():
    rng = np.random.default_rng(7)
    qp = _queries(rng, 4)
    a, b = Pose(rng.normal(size=4), rng.normal(size=3)), Pose(rng.normal(size=4), rng.normal(size=3))
    back = transform_queries(transform_queries(transform_queries(qp, a), b), a.inverse().compose(b.inverse()))
    np.testing.assert_allclose(back.positions, qp.positions, atol=1e-6)
    np.testing.assert_allclose(back.velocities, qp.velocities, atol=1e-6)
    moved = decode_queries(transform_queries(qp, a))
    ref = decode_queries(qp)
    np.testing.assert_allclose(moved.means, a.apply(ref.means), atol=1e-9)
    np.testing.assert_allclose(moved.rotmats(), np.einsum("ij,njk->nik", a.matrix, ref.rotmats()), atol=1e-9)


def test_advance_moves_along_velocity():
    qp = _queries(np.random.default_rng(8), 3)
    np.testing.assert_allclose(advance_queries(qp, 0.5).positions, qp.positions + 0.5 * qp.velocities)


def test_selected_subset_keeps_all_fields():
    qp = _queries(np.random.default_rng(9), 6)
    qp.opacity_logits[:] = logit(np.linspace(0.9, 0.1, 6))
    sel = select_queries(qp, 3, 0.0)
    np.testing.assert_array_equal(sel.child_offsets, qp.child_offsets[:3])
