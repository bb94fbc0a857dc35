import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from cliplite.concept import (
    ConvergenceError,
    RepresentationSets,
    SubspaceBasis,
    bucket_gaps,
    embed_pairs,
    equalization_csv,
    equalization_report,
    estimate_subspace,
    power_eigh,
    remove_subspace,
)


def test_planted_single_direction():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(20, 6))
    e1 = np.eye(6)[0]
    basis = estimate_subspace(RepresentationSets(mu + 0.3 * e1, mu - 0.3 * e1), k=1)
    np.testing.assert_allclose(np.abs(basis.vectors[0]), e1, atol=1e-9)
    assert basis.explained[0] == pytest.approx(1.0)


def test_identical_sides_are_rank_zero():
    x = np.random.default_rng(0).normal(size=(5, 4))
    with pytest.raises(ValueError, match="rank 0"):
        estimate_subspace(RepresentationSets(x, x.copy()))


def test_k_beyond_rank_is_an_error():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(10, 5))
    with pytest.raises(ValueError, match="rank"):
        estimate_subspace(RepresentationSets(mu + np.eye(5)[0], mu - np.eye(5)[0]), k=2)


def test_planted_2d_concept_matches_dense_eigh():
    rng = np.random.default_rng(3)
    planted = np.linalg.qr(rng.normal(size=(8, 2)))[0].T
    mu = rng.normal(size=(40, 8))
    delta = rng.normal(size=(40, 2)) @ planted
    sets = RepresentationSets(
        mu + delta + 0.01 * rng.normal(size=(40, 8)), mu - delta + 0.01 * rng.normal(size=(40, 8))
    )
    basis = estimate_subspace(sets, k=2)
    X = np.concatenate([sets.side_a - (sets.side_a + sets.side_b) / 2, sets.side_b - (sets.side_a + sets.side_b) / 2])
    w, U = np.linalg.eigh(X.T @ X / len(X))
    dense = U[:, np.argsort(w)[::-1][:2]]
    assert np.degrees(subspace_angles(basis.vectors.T, dense)).max() < 1e-3
    assert np.degrees(subspace_angles(basis.vectors.T, planted.T)).max() < 5


def test_power_eigh_matches_numpy():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 6))
    C = A @ A.T
    vals, vecs = power_eigh(C, 3)
    ref = np.sort(np.linalg.eigvalsh(C))[::-1][:3]
    np.testing.assert_allclose(vals, ref, rtol=1e-8)
    np.testing.assert_allclose(vecs @ vecs.T, np.eye(3), atol=1e-8)
    with pytest.raises(ConvergenceError):
        power_eigh(np.diag([1.0, 0.999999, 0.5]), 1, tol=1e-15, max_iter=5)


def test_swapping_pair_order_gives_same_subspace():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    v1 = estimate_subspace(RepresentationSets(a, b)).vectors
    v2 = estimate_subspace(RepresentationSets(b[::-1], a[::-1])).vectors
    np.testing.assert_allclose(np.abs(v1 @ v2.T), 1.0, atol=1e-9)


def test_remove_subspace_hand_example():
    V = SubspaceBasis(np.array([[1.0, 0.0]]), np.array([1.0]))
    np.testing.assert_array_equal(remove_subspace([3.0, 4.0], V), [0.0, 4.0])
    h = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(remove_subspace(h, SubspaceBasis.empty(2)), h)
    with pytest.raises(ValueError):
        remove_subspace(np.ones(3), V)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_removal_is_orthogonal_and_idempotent(seed, k):
    rng = np.random.default_rng(seed)
    V = SubspaceBasis(np.linalg.qr(rng.normal(size=(8, k)))[0].T, np.ones(k))
    h = rng.normal(scale=10, size=(5, 8))
    hh = remove_subspace(h, V)
    assert np.abs(hh @ V.vectors.T).max() < 1e-9
    np.testing.assert_allclose(remove_subspace(hh, V), hh, atol=1e-12)


class _TextOnly:
    def __init__(self, seed):
        self.W = np.random.default_rng(seed).normal(size=(16, 4))

    def embed_text(self, tokens):
        from cliplite.autodiff import Tensor

        return Tensor(np.eye(40)[np.asarray(tokens)].sum(1)[:, :16] @ self.W + 0.1)


def test_embed_pairs_contracts():
    from cliplite.data import VOCAB

    model = _TextOnly(0)
    same = [(VOCAB.tokenize("a red square"), VOCAB.tokenize("a red square"))] * 3
    sets = embed_pairs(same, model)
    assert len(sets.side_a) == 3
    np.testing.assert_array_equal(sets.side_a, sets.side_b)


def _planted_buckets(rng, v, n=30, d=6):
    base = rng.normal(size=(2 * n, d))
    base -= np.outer(base @ v, v)
    a = base[:n] + 1.5 * v
    b = base[n:] - 1.5 * v
    return {"striped": a, "dotted": b}


def test_equalization_zero_rank_is_noop():
    rng = np.random.default_rng(0)
    v = np.eye(6)[0]
    buckets = _planted_buckets(rng, v)
    prompts = {"striped": [("p", rng.normal(size=6))]}
    rows = equalization_report(buckets, prompts, SubspaceBasis.empty(6), top_n=5)
    assert all(r.before == r.after for r in rows)


def test_equalization_on_planted_attribute():
    rng = np.random.default_rng(1)
    v = np.eye(6)[0]
    buckets = _planted_buckets(rng, v)
    neutral = rng.normal(size=6)
    neutral[0] = 0.0
    prompts = {
        "striped": [("a striped shape", v + 0.3 * rng.normal(size=6))],
        "dotted": [("a dotted shape", -v + 0.3 * rng.normal(size=6))],
        "none": [("a red square", neutral)],
    }
    V = SubspaceBasis(v[None], np.ones(1))
    rows = equalization_report(buckets, prompts, V, top_n=5)
    before, after = bucket_gaps(rows, "before"), bucket_gaps(rows, "after")
    for p in ("a striped shape", "a dotted shape"):
        assert after[p] < before[p]
    assert all(abs(r.delta) < 0.01 for r in rows if r.prompt == "a red square")
    csv_text = equalization_csv(rows)
    assert csv_text.splitlines()[0] == "prompt_side,prompt,bucket,before,after,delta,after_renormalized"
    with pytest.raises(ValueError):
        equalization_report(buckets, prompts, V, top_n=100)
