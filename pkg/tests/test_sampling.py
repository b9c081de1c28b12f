import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussocc.sampling import (
    DenoiseBatch,
    InvalidLoss,
    InvalidSampleCount,
    LossWeights,
    denoise_loss,
    fps,
    make_batch,
    noise_init,
    pretrain_loss,
)

from oracles import central_diff, fps_greedy


def test_fps_full_set_keeps_selection_order():
    pts = np.random.default_rng(0).normal(size=(9, 3))
    sel = fps(pts, 9)
    assert sorted(sel.tolist()) == list(range(9))
    assert sel.tolist() == fps_greedy(pts, 9)


def test_fps_square_corners():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fps(pts, 2).tolist() == [0, 3]


def test_fps_invalid_counts():
    pts = np.zeros((3, 3))
    with pytest.raises(InvalidSampleCount):
        fps(pts, 0)
    with pytest.raises(InvalidSampleCount):
        fps(pts, 4)
    with pytest.raises(InvalidSampleCount):
        fps(np.zeros((0, 3)), 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31 - 1), st.booleans())
def test_fps_matches_greedy_oracle(n, seed, lattice):
    rng = np.random.default_rng(seed)
    # lattice points produce many distance ties
    pts = rng.integers(0, 3, (n, 3)).astype(float) if lattice else rng.normal(size=(n, 3))
    k = int(rng.integers(1, n + 1))
    assert fps(pts, k).tolist() == fps_greedy(pts, k)


def test_fps_min_distance_is_greedy_optimal_for_small_sets():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(8, 3))
    k = 3
    sel = fps(pts, k)

    def min_pair(idx):
        return min(np.linalg.norm(pts[a] - pts[b]) for a, b in itertools.combinations(idx, 2))

    # any subset built by max-min greedy steps from point 0 is no better
    assert min_pair(sel) >= min_pair(fps_greedy(pts, k)) - 1e-12


def test_noise_init_bounds_and_determinism():
    t = np.random.default_rng(2).normal(size=(50, 3))
    np.testing.assert_array_equal(noise_init(t, 0.0, 3), t)
    a = noise_init(t, 1.0, 3)
    assert np.all(np.abs(a - t) <= 1.0)
    np.testing.assert_array_equal(a, noise_init(t, 1.0, 3))
    small = noise_init(t, 0.3, 4)
    DenoiseBatch(t, small, 1.0)  # tighter noise is valid for the looser bound
    with pytest.raises(ValueError):
        DenoiseBatch(t, a + 2.0, 1.0)


def test_denoise_loss_values():
    b = DenoiseBatch(np.array([[1.0, 0, 0]]), np.array([[0.0, 0, 0]]), 1.0)
    loss, g = denoise_loss(b, np.zeros((1, 3)))
    assert loss == 1.0
    np.testing.assert_allclose(g, [[-1.0, 0, 0]])
    loss, g = denoise_loss(b, np.array([[1.0, 0, 0]]))
    assert loss == 0.0 and not np.any(g)


def test_denoise_loss_gradient_and_translation_invariance():
    rng = np.random.default_rng(3)
    b = make_batch(rng.normal(size=(40, 3)), 10, 1.0, 5)
    off = rng.normal(size=(10, 3)) * 0.3
    loss, g = denoise_loss(b, off)
    num = central_diff(lambda o: denoise_loss(b, o)[0], off)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-8)
    shift = np.array([3.0, -2.0, 7.0])
    moved = DenoiseBatch(b.clean_targets + shift, b.noised_init + shift, 1.0)
    assert denoise_loss(moved, off)[0] == pytest.approx(loss, rel=1e-12)


def test_pretrain_loss():
    assert pretrain_loss(LossWeights(1, 0, 0), 3.0, 4.0, 5.0) == 3.0
    assert pretrain_loss(LossWeights(), 0.0, 0.0, 0.0) == 0.0
    assert pretrain_loss(LossWeights(2, 1, 1), 3.0, 4.0, 5.0) == 15.0
    with pytest.raises(InvalidLoss):
        pretrain_loss(LossWeights(), float("nan"), 0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)
