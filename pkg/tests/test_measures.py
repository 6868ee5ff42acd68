import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orthoreg import measures
from orthoreg.gradcheck import finite_difference, relative_error
from orthoreg.measures import (DegenerateFilterError, NearOrthReport, PairMask, RegularizerSpec,
                               Variant)

from conftest import random_kernel


def gram_oracle(K):
    o = K.shape[0]
    return np.array([[sum(K[r, t] * K[c, t] for t in range(K.shape[1])) for c in range(o)]
                     for r in range(o)])


# --- gram / correlations ----------------------------------------------------

def test_gram_identity():
    assert np.array_equal(measures.gram(np.eye(2)), np.eye(2))


def test_gram_hand_case():
    assert measures.gram([[3.0, 4.0], [0.0, 5.0]]).tolist() == [[25.0, 20.0], [20.0, 25.0]]


def test_gram_zero_row():
    G = measures.gram([[1.0, 2.0], [0.0, 0.0], [3.0, -1.0]])
    assert not G[1].any() and not G[:, 1].any()


def test_gram_matches_loop_and_is_symmetric(rng):
    K = rng.standard_normal((7, 5))
    G = measures.gram(K)
    np.testing.assert_allclose(G, gram_oracle(K), rtol=1e-12, atol=1e-12)
    assert np.array_equal(G, G.T)
    assert (np.diag(G) >= 0).all()


def test_correlation_examples():
    np.testing.assert_allclose(measures.correlation_tril([[3.0, 4.0], [0.0, 5.0]]), [0.8])
    assert measures.correlation_tril([[1.0, 0.0], [0.0, 2.0]]).tolist() == [0.0]
    np.testing.assert_allclose(measures.correlation_tril([[1.0, 0.0], [2.0, 0.0]]), [1.0])


def test_correlation_order_and_range(rng):
    K = rng.standard_normal((5, 3))
    corr = measures.correlation_tril(K)
    n = K / np.linalg.norm(K, axis=1, keepdims=True)
    expected = [n[r] @ n[c] for r in range(5) for c in range(r)]
    np.testing.assert_allclose(corr, expected, rtol=1e-12)
    assert np.all(np.abs(corr) <= 1 + 1e-12)


def test_correlation_degenerate_names_row():
    with pytest.raises(DegenerateFilterError, match="row 1"):
        measures.correlation_tril([[1.0, 0.0], [0.0, 0.0]])


def test_pair_index_bijection():
    o = 9
    seen = []
    for r in range(o):
        for c in range(r):
            p = measures.pair_index(r, c)
            assert measures.pair_from_index(p) == (r, c)
            seen.append(p)
    assert seen == list(range(measures.pair_count(o)))
    rows, cols = measures.tril_indices(o)
    assert [measures.pair_index(r, c) for r, c in zip(rows, cols)] == seen


# --- regularizer values -------------------------------------------------------

def test_frobenius_examples():
    assert measures.frobenius_loss(np.eye(3)).total == 0.0
    assert measures.frobenius_loss(np.diag([2.0, 1.0])).total == pytest.approx(3.0, rel=1e-15)
    assert measures.frobenius_loss([[1.0], [0.0], [0.0]]).total == pytest.approx(math.sqrt(2), rel=1e-15)
    r = measures.frobenius_loss(np.diag([2.0, 1.0]))
    assert r.corr_component == 0.0 and r.diag_component == 0.0


def test_scaled_frobenius_examples():
    assert measures.scaled_frobenius_loss(np.diag([2.0, 1.0])).total == pytest.approx(3 / math.sqrt(2))
    assert measures.scaled_frobenius_loss(np.eye(4)).total == 0.0
    assert measures.scaled_frobenius_loss([[1.0]]).total == 0.0


def test_srip_diag_case_exact():
    # A = diag(3, 0): u = (3a, 0), v = (9a, 0)
    for seed in range(5):
        r = measures.srip_loss(np.diag([2.0, 1.0]), RegularizerSpec(Variant.SRIP, seed=seed))
        assert r.total == pytest.approx(3.0, rel=1e-15)


def test_srip_orthonormal_takes_degenerate_path(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    r = measures.srip_loss(Q[:4], RegularizerSpec(Variant.SRIP))
    assert r.total == 0.0 and r.degenerate


def test_srip_is_seed_deterministic(rng):
    K = random_kernel(rng, 8, 16)
    a = measures.srip_loss(K, RegularizerSpec(Variant.SRIP, seed=3)).total
    b = measures.srip_loss(K, RegularizerSpec(Variant.SRIP, seed=3)).total
    assert a == b


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31), st.integers(1, 6))
def test_srip_never_exceeds_sigma_max(o, d, seed, rounds):
    K = np.random.default_rng(seed).standard_normal((o, d)) / math.sqrt(d)
    sigma = np.max(np.abs(np.linalg.eigvalsh(K @ K.T - np.eye(o))))
    est = measures.srip_loss(K, RegularizerSpec(Variant.SRIP, power_iterations=rounds, seed=seed)).total
    assert est <= sigma * (1 + 1e-9) + 1e-12


def test_srip_converges_with_many_rounds(rng):
    # dense eigensolve oracle; long power iteration must land on sigma_max
    for _ in range(10):
        K = random_kernel(rng, 8, 16)
        ev = np.sort(np.abs(np.linalg.eigvalsh(K @ K.T - np.eye(8))))
        if (ev[-1] - ev[-2]) / ev[-1] < 0.1:
            continue
        est = measures.srip_loss(K, RegularizerSpec(Variant.SRIP, power_iterations=300)).total
        assert est == pytest.approx(ev[-1], rel=1e-6)


def test_disentangled_examples():
    spec = RegularizerSpec(Variant.DISENTANGLED, lambda_diag=0.1)
    r = measures.disentangled_loss(np.diag([1.0, 2.0]), spec)
    assert (r.corr_component, r.diag_component) == (0.0, 3.0)
    assert r.total == pytest.approx(0.3, rel=1e-15)
    for lam in (0.0, 0.1, 5.0):
        r = measures.disentangled_loss([[1.0, 0.0], [1.0, 0.0]], RegularizerSpec(lambda_diag=lam))
        assert r.total == pytest.approx(1.0) and r.diag_component == 0.0
    assert measures.disentangled_loss(np.eye(3), spec).total == 0.0


def test_disentangled_total_is_sum_of_components(rng):
    K = random_kernel(rng, 6, 4)
    r = measures.disentangled_loss(K, RegularizerSpec(lambda_diag=0.37))
    assert r.total == pytest.approx(r.corr_component + 0.37 * r.diag_component, rel=1e-12)


def test_masked_drops_pairs(rng):
    K = random_kernel(rng, 5, 3)
    corr = measures.correlation_tril(K)
    mask = PairMask(5, frozenset({0, 4}))
    r = measures.evaluate(K, RegularizerSpec(lambda_diag=0.1).with_mask(mask))
    keep = np.ones(10, bool)
    keep[[0, 4]] = False
    assert r.corr_component == pytest.approx(np.sqrt(np.sum(corr[keep] ** 2)), rel=1e-12)


def test_spec_mask_invariant():
    with pytest.raises(ValueError):
        RegularizerSpec(Variant.RELAXED_DISENTANGLED)
    with pytest.raises(ValueError):
        RegularizerSpec(Variant.DISENTANGLED, exemption_mask=PairMask(3))
    with pytest.raises(ValueError):
        PairMask(3, frozenset({3}))


# --- properties ---------------------------------------------------------------

shapes = st.tuples(st.integers(1, 12), st.integers(1, 12))


@settings(max_examples=100, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_decomposition_identity(shape, seed):
    K = np.random.default_rng(seed).standard_normal(shape)
    direct = measures.frobenius_loss(K).total
    assert measures.decomposed_frobenius(K) == pytest.approx(direct, rel=1e-10)


def test_decomposition_examples():
    assert measures.decomposed_frobenius(np.diag([2.0, 1.0])) == 3.0
    assert measures.decomposed_frobenius(np.eye(5)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31), st.floats(0.01, 10))
def test_overdetermined_frobenius_floor(o, seed, scale):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, o))
    K = rng.standard_normal((o, d)) * scale
    assert measures.frobenius_loss(K).total >= math.sqrt(o - d) - 1e-9


def correlation_floor(o, d):
    return math.sqrt(o * (o - d) / (2 * d))


def test_correlation_floor_value():
    assert correlation_floor(128, 64) == 8.0


@pytest.mark.parametrize("o, d", [(128, 64), (16, 8), (10, 3), (5, 1)])
def test_overdetermined_correlation_floor(rng, o, d):
    for _ in range(5):
        K = rng.standard_normal((o, d))
        r = measures.disentangled_loss(K, RegularizerSpec(lambda_diag=0.0))
        assert r.corr_component >= correlation_floor(o, d) - 1e-9
    # eigenvalue oracle: ||C - I||_F^2 >= (sum lambda)^2 / rank - o
    N = K / np.linalg.norm(K, axis=1, keepdims=True)
    ev = np.linalg.eigvalsh(N @ N.T)
    bound = math.sqrt(max(0.0, (o * o / d - o) / 2))
    assert np.sum(ev ** 2) >= o * o / d - 1e-9
    assert bound == pytest.approx(correlation_floor(o, d))


def test_scale_behaviour(rng):
    for _ in range(10):
        K = random_kernel(rng, 6, 9)
        D = np.diag(rng.uniform(0.2, 5.0, size=6))
        a = measures.disentangled_loss(K).corr_component
        b = measures.disentangled_loss(D @ K).corr_component
        assert b == pytest.approx(a, rel=1e-10)
    K = random_kernel(rng, 6, 9)
    D = np.diag(rng.uniform(0.2, 5.0, size=6))
    assert measures.frobenius_loss(D @ K).total != pytest.approx(measures.frobenius_loss(K).total)
    assert measures.srip_loss(D @ K).total != pytest.approx(measures.srip_loss(K).total)


# --- gradients ------------------------------------------------------------------

def test_frobenius_gradient_at_minimum():
    g = measures.regularizer_gradient(np.eye(3), RegularizerSpec(Variant.FROBENIUS)).gradient
    assert not g.any()


def test_frobenius_gradient_hand_case():
    g = measures.regularizer_gradient(np.diag([2.0, 1.0]), RegularizerSpec(Variant.FROBENIUS)).gradient
    np.testing.assert_allclose(g, np.diag([4.0, 0.0]), atol=1e-15)
    fd = finite_difference(lambda X: measures.frobenius_loss(X).total, np.diag([2.0, 1.0]))
    np.testing.assert_allclose(fd, np.diag([4.0, 0.0]), atol=1e-8)


@pytest.mark.parametrize("variant", [Variant.FROBENIUS, Variant.SCALED_FROBENIUS, Variant.SRIP,
                                     Variant.DISENTANGLED, Variant.RELAXED_DISENTANGLED])
def test_gradient_matches_finite_differences(rng, variant):
    for trial in range(5):
        o, d = rng.integers(2, 9, size=2)
        K = random_kernel(rng, o, d)
        mask = None
        if variant is Variant.RELAXED_DISENTANGLED:
            mask = PairMask(o, frozenset(rng.choice(measures.pair_count(o), size=1, replace=False)))
        spec = RegularizerSpec(variant, 0.1, 2, trial, mask)
        res = measures.regularizer_gradient(K, spec)
        fd = finite_difference(lambda X: measures.evaluate(X, spec).total, K, 1e-5)
        assert relative_error(res.gradient, fd) <= 1e-4


def test_disentangled_gradient_4x8(rng):
    K = random_kernel(rng, 4, 8)
    spec = RegularizerSpec(lambda_diag=0.1)
    fd = finite_difference(lambda X: measures.evaluate(X, spec).total, K)
    assert relative_error(measures.regularizer_gradient(K, spec).gradient, fd) <= 1e-4


def test_degenerate_gradients_are_zero_and_flagged():
    r = measures.regularizer_gradient([[1.0, 0.0], [0.0, 0.0]], RegularizerSpec())
    assert r.degenerate and not r.gradient.any()
    r = measures.regularizer_gradient(np.eye(3), RegularizerSpec(Variant.SRIP))
    assert r.degenerate and not r.gradient.any()


# --- reports ------------------------------------------------------------------

def test_report_identity():
    r = measures.near_orth_report(np.eye(3), "eye")
    assert (r.tril_mean, r.tril_std, r.diag_mean) == (0.0, 0.0, 1.0)
    assert r.format() == "0.00 ± 0.00/1.00"


def test_report_parallel_rows():
    r = measures.near_orth_report([[1.0, 0.0], [1.0, 0.0]])
    assert r.tril_mean == pytest.approx(1.0) and r.tril_std == pytest.approx(0.0, abs=1e-15)
    assert r.diag_mean == 1.0


def test_report_population_std():
    K = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    corr = measures.correlation_tril(K)
    r = measures.near_orth_report(K)
    assert r.tril_std == pytest.approx(math.sqrt(np.mean((corr - corr.mean()) ** 2)))


def test_report_single_filter_flagged():
    r = measures.near_orth_report([[2.0, 0.0]])
    assert r.undefined_tril and (r.tril_mean, r.tril_std, r.diag_mean) == (0.0, 0.0, 4.0)


def test_report_format_matches_table_style():
    assert NearOrthReport(0.001, 0.012, 0.26).format() == "0.00 ± 0.01/0.26"
    assert NearOrthReport(-0.001, 0.26, 1.0).format() == "0.00 ± 0.26/1.00"
    assert NearOrthReport(-0.02, 0.3, 1.5).format() == "-0.02 ± 0.30/1.50"


def test_aggregate():
    single = {(16, 144): [NearOrthReport(0.02, 0.1, 1.0, "a")]}
    (agg,) = measures.aggregate_reports(single).values()
    assert (agg.tril_mean, agg.tril_std, agg.diag_mean) == (0.02, 0.1, 1.0)
    pair = {(32, 288): [NearOrthReport(0.02, 0.1, 1.0), NearOrthReport(0.04, 0.3, 2.0)]}
    (agg,) = measures.aggregate_reports(pair).values()
    assert agg.tril_mean == pytest.approx(0.03) and agg.diag_mean == pytest.approx(1.5)
    assert agg.layer_name == "[32,288]"


def test_group_by_shape(rng):
    named = [("a", rng.standard_normal((4, 6))), ("b", rng.standard_normal((8, 6))),
             ("c", rng.standard_normal((4, 6)))]
    groups = measures.group_by_shape(named)
    assert list(groups) == [(4, 6), (8, 6)]
    assert [r.layer_name for r in groups[(4, 6)]] == ["a", "c"]


def test_result_roundtrip():
    r = measures.regularizer_gradient(np.diag([2.0, 1.0]), RegularizerSpec())
    back = measures.RegularizerResult.from_dict(r.to_dict())
    assert back.total == r.total and np.array_equal(back.gradient, r.gradient)
    spec = RegularizerSpec(lambda_diag=0.2).with_mask(PairMask(3, frozenset({1})))
    assert RegularizerSpec.from_dict(spec.to_dict()) == spec
