import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptgcd.errors import DataError, ParameterError
from conceptgcd.evaluation import (
    clustering_accuracy,
    kl_neuron_analysis,
    kmeans_fit,
    norm_ratio_diagnostic,
    optimal_assignment,
)
from conceptgcd.numerics import RngState


def brute_assignment(benefit):
    k = benefit.shape[0]
    best, arg = -np.inf, None
    for perm in itertools.permutations(range(k)):  # lexicographic order, so first max wins ties
        v = benefit[np.arange(k), perm].sum()
        if v > best + 1e-9:
            best, arg = v, perm
    return np.array(arg), best


def test_assignment_matches_brute_force():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        k = int(gen.integers(1, 8))
        benefit = gen.integers(0, 4, size=(k, k)).astype(float)  # small ints to force ties
        perm = optimal_assignment(benefit)
        want, value = brute_assignment(benefit)
        assert benefit[np.arange(k), perm].sum() == value
        assert perm.tolist() == want.tolist()


def test_assignment_rejects_non_square():
    with pytest.raises(ParameterError):
        optimal_assignment(np.zeros((2, 3)))


def test_accuracy_small_example():
    rep = clustering_accuracy([1, 1, 1, 0], [0, 0, 1, 1], n_known=1)
    assert rep.acc_all == 0.75
    assert rep.acc_known == 1.0
    assert rep.acc_novel == 0.5
    assert rep.matching == {1: 0, 0: 1}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_accuracy_invariant_to_relabeling(gts, rnd):
    gts = np.array(gts)
    perm = list(range(5))
    rnd.shuffle(perm)
    preds = np.array(perm)[gts]
    assert clustering_accuracy(preds, gts, n_known=2).acc_all == 1.0
    noisy = gts.copy()
    noisy[::3] = (noisy[::3] + 1) % 5
    a = clustering_accuracy(noisy, gts, 2)
    b = clustering_accuracy(np.array(perm)[noisy], gts, 2)
    assert a.acc_all == b.acc_all


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60))
def test_accuracy_is_weighted_average(seed, size):
    gen = np.random.default_rng(seed)
    gts = gen.integers(0, 6, size)
    preds = gen.integers(0, 7, size)
    rep = clustering_accuracy(preds, gts, n_known=3)
    parts = [(rep.acc_known, rep.n_known_samples), (rep.acc_novel, rep.n_novel_samples)]
    total = sum(acc * n for acc, n in parts if acc is not None)
    assert total / size == pytest.approx(rep.acc_all, abs=1e-12)
    cells = np.zeros((7, 7))
    np.add.at(cells, (preds, gts), 1)
    assert rep.acc_all >= cells.max() / size - 1e-12  # at least the single best cell


def test_accuracy_input_errors():
    with pytest.raises(DataError):
        clustering_accuracy([0, 1], [0], 1)
    with pytest.raises(DataError):
        clustering_accuracy([], [], 1)
    with pytest.raises(DataError):
        clustering_accuracy([-1], [0], 1)


def test_kmeans_separates_blobs():
    gen = np.random.default_rng(3)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.repeat(centers, 30, axis=0) + 0.1 * gen.standard_normal((90, 2))
    res = kmeans_fit(x, 3, RngState(0))
    assert clustering_accuracy(res.labels, np.repeat(np.arange(3), 30), 3).acc_all == 1.0
    hist = res.objective_history
    assert all(a >= b - 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_k_equals_n():
    x = np.random.default_rng(1).standard_normal((6, 3))
    res = kmeans_fit(x, 6, RngState(2))
    assert sorted(res.labels.tolist()) == list(range(6))
    assert res.objective_history[-1] == pytest.approx(0.0, abs=1e-12)


def test_kmeans_deterministic_and_validates():
    x = np.random.default_rng(1).standard_normal((40, 3))
    a, b = kmeans_fit(x, 4, RngState(5)), kmeans_fit(x, 4, RngState(5))
    assert np.array_equal(a.labels, b.labels)
    with pytest.raises(ParameterError):
        kmeans_fit(x, 41, RngState(0))


def test_kl_self_comparison_all_first_bin():
    a = np.random.default_rng(0).standard_normal((100, 12))
    hist = kl_neuron_analysis(a, a)
    assert hist.counts[0] == 12
    assert sum(hist.counts) == 12


def test_kl_two_sample_value():
    a = np.array([[np.log(3.0)], [0.0]])  # softmax -> (0.75, 0.25)
    b = np.zeros((2, 1))  # uniform
    hist = kl_neuron_analysis(a, b)
    want = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
    assert hist.min_kl[0] == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.1308, abs=1e-4)
    assert hist.counts == [0, 0, 1, 0, 0, 0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_nonnegative_and_min(seed):
    gen = np.random.default_rng(seed)
    a, b = gen.standard_normal((5, 3)), gen.standard_normal((5, 4))
    hist = kl_neuron_analysis(a, b)
    assert np.all(hist.min_kl >= 0)
    pa = np.exp(a) / np.exp(a).sum(0)
    pb = np.exp(b) / np.exp(b).sum(0)
    brute = np.array([[np.sum(pa[:, i] * np.log(pa[:, i] / pb[:, j])) for j in range(4)] for i in range(3)])
    np.testing.assert_allclose(hist.min_kl, np.maximum(brute.min(1), 0), atol=1e-12)


def test_kl_needs_matching_probes():
    with pytest.raises(DataError):
        kl_neuron_analysis(np.zeros((3, 2)), np.zeros((4, 2)))


def test_norm_ratio():
    u = np.zeros((3, 4))
    u[0] = [1, 0, 0, 0]
    u[1] = [0, 0, 3, 4]
    rep = norm_ratio_diagnostic(u, 2)
    assert rep.mean_ratio == 0.5 and rep.n_excluded == 1 and rep.n_rows == 3
    assert norm_ratio_diagnostic(np.zeros((2, 4)), 2).mean_ratio is None


def test_norm_ratio_after_rescaling():
    from conceptgcd.heads import csn

    m, n = 5, 12
    u = np.abs(np.random.default_rng(0).standard_normal((20, n))) + 0.1
    rep = norm_ratio_diagnostic(csn(u, m), m)
    assert rep.mean_ratio == pytest.approx(np.sqrt((n - m) / n), abs=1e-12)
