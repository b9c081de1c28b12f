import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussocc.core import (
    BadMagic,
    ChildGaussian,
    GaussianSet,
    NonFiniteValue,
    Pose,
    QueryParams,
    SceneQuery,
    TruncatedPayload,
    VersionMismatch,
    VoxelGrid,
    decode_queries,
    decode_query,
    gaussians_from_bytes,
    gaussians_to_bytes,
    grid_from_bytes,
    grid_to_bytes,
    image_from_bytes,
    image_to_bytes,
    points_from_bytes,
    points_to_bytes,
    quat_to_rotmat,
    read_gaussians,
    write_gaussians,
)

from oracles import rotmat


def _query(J=3, a=0.8, offset=(0.0, 0.0, 0.0), child_offset=(0.0, 0.0, 0.0)):
    kids = tuple(ChildGaussian(np.array(child_offset), np.array([1.0, 0, 0, 0]), np.ones(3) * (j + 1), 0.5) for j in range(J))
    return SceneQuery(np.array([1.0, 2.0, 3.0]), np.array(offset), a, np.array([0.5, 0, 0]), kids, np.array([0.25, 0.75]))


def random_set(rng, n, C):
    return GaussianSet(
        rng.normal(size=(n, 3)),
        (lambda q: q / np.linalg.norm(q, axis=1, keepdims=True))(rng.normal(size=(n, 4))),
        rng.uniform(0.1, 2.0, (n, 3)),
        rng.uniform(0, 1, n),
        rng.dirichlet(np.ones(C), n),
        rng.normal(size=(n, 3)),
    )


# ---------------------------------------------------------------------------
# decoding


def test_zero_offsets_put_children_at_anchor():
    gs = decode_query(_query())
    assert len(gs) == 3
    for g in gs:
        np.testing.assert_array_equal(g.position, [1.0, 2.0, 3.0])


def test_zero_query_opacity_silences_children():
    assert all(g.opacity == 0.0 for g in decode_query(_query(a=0.0)))


def test_children_inherit_query_attributes():
    gs = decode_query(_query(offset=(1, 0, 0), child_offset=(0, 1, 0)))
    for j, g in enumerate(gs):
        np.testing.assert_allclose(g.position, [2.0, 3.0, 3.0])
        np.testing.assert_allclose(g.scale, np.ones(3) * (j + 1))
        assert g.opacity == pytest.approx(0.4)
        np.testing.assert_array_equal(g.classes, [0.25, 0.75])
        np.testing.assert_array_equal(g.velocity, [0.5, 0, 0])


def test_900_queries_of_10_children_decode_to_9000():
    K, J, C = 900, 10, 4
    rng = np.random.default_rng(0)
    qp = QueryParams(
        anchors=rng.normal(size=(K, 3)),
        offsets=np.zeros((K, 3)),
        opacity_logits=np.zeros(K),
        velocities=np.zeros((K, 3)),
        child_offsets=np.zeros((K, J, 3)),
        child_quats=np.tile([1.0, 0, 0, 0], (K, J, 1)),
        child_log_scales=np.zeros((K, J, 3)),
        child_opacity_logits=np.zeros((K, J)),
        class_logits=np.zeros((K, C)),
    )
    assert len(decode_queries(qp)) == 9000


def test_vectorized_decode_matches_record_decode():
    rng = np.random.default_rng(1)
    K, J, C = 4, 3, 2
    qp = QueryParams(
        anchors=rng.normal(size=(K, 3)),
        offsets=rng.normal(size=(K, 3)),
        opacity_logits=rng.normal(size=K),
        velocities=rng.normal(size=(K, 3)),
        child_offsets=rng.normal(size=(K, J, 3)),
        child_quats=rng.normal(size=(K, J, 4)),
        child_log_scales=rng.normal(size=(K, J, 3)) * 0.2,
        child_opacity_logits=rng.normal(size=(K, J)),
        class_logits=rng.normal(size=(K, C)),
    )
    gp = decode_queries(qp)
    for k in range(K):
        a = 1 / (1 + np.exp(-qp.opacity_logits[k]))
        kids = tuple(
            ChildGaussian(qp.child_offsets[k, j], qp.child_quats[k, j], np.exp(qp.child_log_scales[k, j]), 1 / (1 + np.exp(-qp.child_opacity_logits[k, j])))
            for j in range(J)
        )
        cls = np.exp(qp.class_logits[k]) / np.exp(qp.class_logits[k]).sum()
        ref = decode_query(SceneQuery(qp.anchors[k], qp.offsets[k], a, qp.velocities[k], kids, cls))
        for j, g in enumerate(ref):
            i = k * J + j
            np.testing.assert_allclose(gp.means[i], g.position, atol=1e-12)
            np.testing.assert_allclose(gp.opacities[i], g.opacity, atol=1e-12)
            np.testing.assert_allclose(gp.classes[i], g.classes, atol=1e-12)
            np.testing.assert_allclose(gp.scales[i], g.scale, atol=1e-12)


# ---------------------------------------------------------------------------
# rotations and poses


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_rotation_matrix_is_orthonormal(q):
    R = quat_to_rotmat(np.array(q))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-5)
    np.testing.assert_allclose(R, rotmat(q), atol=1e-12)


def test_pose_compose_inverse_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = Pose(rng.normal(size=4), rng.normal(size=3))
        ident = p.compose(p.inverse())
        np.testing.assert_allclose(ident.matrix, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(ident.translation, 0, atol=1e-6)
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(p.inverse().apply(p.apply(x)), x, atol=1e-9)


def test_pose_dict_round_trip():
    p = Pose.from_yaw(0.3, [1, 2, 3], timestamp=1.5)
    q = Pose.from_dict(p.to_dict())
    np.testing.assert_allclose(q.matrix, p.matrix)
    assert q.timestamp == 1.5


# ---------------------------------------------------------------------------
# file formats


def test_empty_gaussian_file_is_header_only():
    buf = gaussians_to_bytes(GaussianSet.empty(3))
    assert len(buf) == 16
    assert len(gaussians_from_bytes(buf)) == 0
    assert gaussians_from_bytes(buf).num_classes == 3


def test_single_gaussian_record_length():
    gs = random_set(np.random.default_rng(0), 1, 2)
    assert len(gaussians_to_bytes(gs)) == 16 + 64


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_set_of_1000_round_trips_byte_identically(seed):
    gs = random_set(np.random.default_rng(seed), 1000, 5)
    buf = gaussians_to_bytes(gs)
    assert gaussians_to_bytes(gaussians_from_bytes(buf)) == buf


def test_gaussian_file_on_disk(tmp_path):
    gs = random_set(np.random.default_rng(3), 7, 3)
    write_gaussians(tmp_path / "g.sgau", gs)
    back = read_gaussians(tmp_path / "g.sgau")
    np.testing.assert_allclose(back.positions, gs.positions.astype(np.float32))


def test_gaussian_file_errors():
    buf = gaussians_to_bytes(random_set(np.random.default_rng(4), 2, 2))
    with pytest.raises(BadMagic):
        gaussians_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(VersionMismatch):
        gaussians_from_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(TruncatedPayload):
        gaussians_from_bytes(buf[:-1])
    with pytest.raises(TruncatedPayload):
        gaussians_from_bytes(buf[:6])
    bad = bytearray(buf)
    bad[16:20] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteValue):
        gaussians_from_bytes(bytes(bad))


def test_grid_round_trip_and_layout():
    labels = np.arange(2 * 3 * 4).reshape(2, 3, 4) % 5
    g = VoxelGrid([0.5, -1, 2], [0.5, 0.25, 1.0], (2, 3, 4), 4, labels)
    buf = grid_to_bytes(g)
    assert buf[:4] == b"SVOX"
    # x fastest: the second stored byte is voxel (1,0,0)
    payload = buf[-24:]
    assert payload[1] == labels[1, 0, 0]
    assert payload[2] == labels[0, 1, 0]
    back = grid_from_bytes(buf)
    np.testing.assert_array_equal(back.labels, labels)
    assert back.dims == (2, 3, 4) and back.class_count == 4
    assert grid_to_bytes(back) == buf
    with pytest.raises(TruncatedPayload):
        grid_from_bytes(buf[:-3])


def test_points_and_images_round_trip():
    pts = np.random.default_rng(5).normal(size=(11, 3)).astype(np.float32)
    buf = points_to_bytes(pts)
    assert buf[:4] == b"SPTS" and len(buf) == 12 + 11 * 12
    assert points_to_bytes(points_from_bytes(buf)) == buf
    img = np.random.default_rng(6).uniform(size=(4, 5, 3)).astype(np.float32)
    ibuf = image_to_bytes(img)
    assert ibuf[:4] == b"SIMG"
    np.testing.assert_array_equal(image_from_bytes(ibuf), img)
    with pytest.raises(BadMagic):
        points_from_bytes(b"SVOX" + buf[4:])


def test_voxel_centers_follow_index_convention():
    g = VoxelGrid([1.0, 2.0, 3.0], 0.5, (3, 2, 2), 1)
    c = g.centers()
    np.testing.assert_allclose(c[0], [1.25, 2.25, 3.25])
    np.testing.assert_allclose(c[1], [1.75, 2.25, 3.25])
    np.testing.assert_allclose(c[3], [1.25, 2.75, 3.25])
    np.testing.assert_allclose(c[6], [1.25, 2.25, 3.75])
