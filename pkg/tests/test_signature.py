import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sigdde import autodiff as ad
from sigdde.signature import (chen_concat, factorial_bound, level_norms, sig_dimension, signature,
                              time_augment)


def iterated_integrals(points):
    """Levels 1-3 of a polyline from explicit sums over ordered segment tuples."""
    dx = np.diff(points, axis=0)
    # strictly-before prefix sums
    c1 = np.cumsum(dx, axis=0) - dx
    lvl1 = dx.sum(0)
    same2 = np.einsum("ai,aj->aij", dx, dx)
    lvl2 = np.einsum("ai,aj->ij", c1, dx) + 0.5 * same2.sum(0)
    # S2 accumulated strictly before each segment
    inc2 = np.einsum("ai,aj->aij", c1, dx) + 0.5 * same2
    c2 = np.cumsum(inc2, axis=0) - inc2
    lvl3 = (np.einsum("aij,ak->ijk", c2, dx)
            + 0.5 * np.einsum("ai,aj,ak->ijk", c1, dx, dx)
            + np.einsum("aijk->ijk", np.einsum("ai,aj,ak->aijk", dx, dx, dx)) / 6.0)
    return lvl1, lvl2, lvl3


finite = st.floats(-2, 2, allow_nan=False)


def paths(n_min=2, n_max=7, e_max=3):
    return st.integers(1, e_max).flatmap(
        lambda e: st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, (n, e), elements=finite)))


@pytest.mark.parametrize("e", [1, 2, 3, 5, 7])
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_dimension_formula(e, n):
    sig = signature(np.random.default_rng(e * 10 + n).normal(size=(4, e)), n)
    expected = n + 1 if e == 1 else (e ** (n + 1) - 1) // (e - 1)
    assert sig_dimension(e, n) == expected == sig.to_numpy().shape[-1] == len(sig)


def test_staircase_example():
    sig = signature(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]), 2)
    assert np.allclose(sig.to_numpy(), [1, 1, 1, 0.5, 1, 0, 0.5], atol=1e-15)


def test_one_dimensional_path_is_exponential():
    sig = signature(np.array([[0.0], [0.25], [1.0]]), 3)
    assert np.allclose(sig.to_numpy(), [1, 1, 0.5, 1 / 6], atol=1e-15)


def test_matches_brute_force_iterated_integrals_on_dense_path():
    t = np.linspace(0, 1, 10_000)
    pts = np.stack([np.sin(3 * t), t ** 2, np.cos(2 * t) * t], axis=1)
    sig = signature(pts, 3)
    for k, ref in enumerate(iterated_integrals(pts), start=1):
        assert np.max(np.abs(sig.level(k) - ref)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(paths(n_min=3, n_max=8), st.integers(1, 4), st.data())
def test_chen_identity(path, depth, data):
    cut = data.draw(st.integers(1, len(path) - 2))
    whole = signature(path, depth).to_numpy()
    parts = chen_concat(signature(path[:cut + 1], depth), signature(path[cut:], depth)).to_numpy()
    assert np.max(np.abs(whole - parts)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(paths(), st.integers(1, 3), st.data())
def test_collinear_refinement_invariance(path, depth, data):
    # inserting points on existing segments leaves the polyline and its signature unchanged
    seg = data.draw(st.integers(0, len(path) - 2))
    fracs = sorted(data.draw(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4)))
    extra = [path[seg] + f * (path[seg + 1] - path[seg]) for f in fracs]
    refined = np.concatenate([path[:seg + 1], np.array(extra), path[seg + 1:]])
    assert np.max(np.abs(signature(path, depth).to_numpy() - signature(refined, depth).to_numpy())) < 1e-10


@settings(max_examples=40, deadline=None)
@given(paths(), st.integers(1, 4))
def test_factorial_decay_bound(path, depth):
    norms = level_norms(signature(path, depth))
    bound = factorial_bound(path, depth)
    assert np.all(norms <= bound * (1 + 1e-12) + 1e-14)


@settings(max_examples=40, deadline=None)
@given(paths(n_min=2, n_max=9))
def test_shuffle_relation(path):
    sig = signature(path, 2)
    s1, s2 = sig.level(1), sig.level(2)
    assert np.max(np.abs(s2 + s2.T - np.outer(s1, s1))) < 1e-10


def test_translation_invariance():
    p = np.random.default_rng(0).normal(size=(6, 3))
    assert np.allclose(signature(p, 3).to_numpy(), signature(p + 4.2, 3).to_numpy(), atol=1e-12)


def test_reparameterization_invariance_without_time():
    # resampling the same polyline at new interior points never changes the signature,
    # so a shifted sampling schedule over the same route gives the same features
    route = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
    a = np.concatenate([np.linspace(route[0], route[1], 5), np.linspace(route[1], route[2], 3)[1:]])
    b = np.concatenate([np.linspace(route[0], route[1], 2), np.linspace(route[1], route[2], 9)[1:]])
    assert np.allclose(signature(a, 3).to_numpy(), signature(b, 3).to_numpy(), atol=1e-12)


def test_time_augmentation_separates_speeds():
    route = np.array([[0.0], [1.0], [1.0]])
    fast = time_augment(route, [0.0, 1.0, 2.0])
    slow = time_augment(route, [0.0, 1.5, 2.0])
    assert fast.shape == (3, 2)
    assert not np.allclose(signature(fast, 2).to_numpy(), signature(slow, 2).to_numpy())


def test_time_augment_rejects_non_increasing():
    with pytest.raises(ValueError, match="increasing"):
        time_augment(np.zeros((3, 1)), [0.0, 1.0, 1.0])


def test_single_point_path_rejected():
    with pytest.raises(ValueError, match="n >= 2"):
        signature(np.zeros((1, 2)), 2)


def test_chen_rejects_mismatched_depth():
    p = np.random.default_rng(1).normal(size=(3, 2))
    with pytest.raises(ValueError, match="depth"):
        chen_concat(signature(p, 2), signature(p, 3))


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    batch = rng.normal(size=(5, 7, 3))
    stacked = signature(batch, 3).to_numpy()
    for i in range(5):
        assert np.array_equal(stacked[i], signature(batch[i], 3).to_numpy())


def test_gradient_through_signature():
    rng = np.random.default_rng(4)
    w = ad.Tensor(rng.normal(size=sig_dimension(2, 3)))
    f = lambda x: ad.tsum(ad.mul(signature(x, 3).flat(), w))
    assert ad.gradient_check(f, rng.normal(size=(5, 2))) < 1e-6


def test_level_two_antisymmetric_part_is_levy_area():
    # unit square traversed counter-clockwise encloses signed area 1
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    s2 = signature(square, 2).level(2)
    assert math.isclose(0.5 * (s2[0, 1] - s2[1, 0]), 1.0, abs_tol=1e-14)
