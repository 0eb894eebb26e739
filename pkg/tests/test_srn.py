import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq
from scipy.stats import multivariate_normal

from suvm.dictionary import DetectionSet
from suvm.generative import sample_exemplar
from suvm.planted import Layout, chain_layout, model_from_layout
from suvm.srn import (
    Configuration,
    PairStats,
    SingularPrecisionError,
    SpringEdge,
    Srn,
    accumulate_pairs,
    assemble_precision,
    combined_variance,
    giant_components,
    is_positive_definite,
    log_likelihood,
    matched_threshold,
    precision_matrix,
    solve_convex_exact,
    sparsify,
)

from conftest import random_srn, srns


def _edge(i, j, c, mu=(0.0, 0.0, 0.0)):
    return SpringEdge(i, j, (c, c, c), mu)


# -- pair statistics ---------------------------------------------------------------


def test_z_statistics_direct_formula():
    st_ = PairStats(2)
    st_.push_image(DetectionSet([0, 1], [100, 160], [0, 0], [20, 40], [20, 40]))
    zx, zy, lzs = st_.pair_mean(0, 1)
    assert zx == pytest.approx(1.0)
    assert lzs == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(st_.pair_mean(1, 0), -st_.pair_mean(0, 1), atol=1e-12)
    assert st_.count(0, 1) == st_.count(1, 0) == 1


def test_zero_extent_skipped_and_tallied():
    st_ = PairStats(3)
    st_.push_image(DetectionSet([0, 1, 2], [0, 5, 9], [0, 0, 0], [4, 0, 4], [4, 4, 4]))
    assert st_.count(0, 2) == 1 and st_.count(0, 1) == 0
    assert st_.skipped == 2


def test_planted_pair_mean():
    lay = Layout({0: (0.0, 0.0, 1.0), 1: (1.0, 0.0, 1.0)}, [[(0,)], [(1,)]], [(0, 1, (40.0, 40.0, 40.0))])
    model = model_from_layout(lay, inclusion_prob=1.0)
    rng = np.random.default_rng(0)
    images = []
    for k in range(1000):
        ex = sample_exemplar(model, 1.0, rng, origin=tuple(rng.uniform(0, 300, 2)))
        images.append(DetectionSet(ex.words, ex.x, ex.y, ex.sx, ex.sy))
    stats = accumulate_pairs(images, 2)
    sigma = math.sqrt(1.0 / 40.0)
    assert abs(stats.pair_mean(0, 1)[0] - 0.5) <= 3 * sigma / math.sqrt(1000)


def test_combined_variance_cases():
    st_ = PairStats(3)
    z = np.zeros((3, 200))
    z += np.where(np.arange(200) % 2, 1, -1) * math.sqrt(0.02)
    st_.push_samples(np.zeros(200, int), np.ones(200, int), z)
    assert combined_variance(st_, 0, 1) == pytest.approx(0.06, abs=1e-12)
    st_.push_samples([0], [2], np.zeros((3, 1)))
    assert combined_variance(st_, 0, 2) == math.inf
    rigid = PairStats(2)
    for k in range(50):
        rigid.push_image(DetectionSet([0, 1], [k, k + 30.0], [2 * k, 2 * k + 5.0], [10, 15], [10, 15]))
    assert combined_variance(rigid, 0, 1) == pytest.approx(0.0, abs=1e-12)


def _random_image(rng, k=5, n=8):
    sx = rng.uniform(5, 40, n)
    return DetectionSet(rng.integers(0, k, n), rng.uniform(0, 500, n), rng.uniform(0, 500, n), sx,
                        sx * rng.uniform(0.8, 1.2, n))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-300, 300), st.floats(-300, 300), st.floats(0.1, 10))
def test_z_statistics_invariances(seed, dx, dy, alpha):
    dets = _random_image(np.random.default_rng(seed))
    a, b = PairStats(5), PairStats(5)
    a.push_image(dets)
    b.push_image(DetectionSet(dets.word, alpha * dets.x + dx, alpha * dets.y + dy, alpha * dets.sx,
                              alpha * dets.sy))
    np.testing.assert_array_equal(a.n, b.n)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-9)
    np.testing.assert_allclose(a.m2, b.m2, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_merge_order_independent(seed, cut):
    rng = np.random.default_rng(seed)
    images = [_random_image(rng) for _ in range(10)]
    whole = accumulate_pairs(images, 5)
    left, right = accumulate_pairs(images[:cut], 5), accumulate_pairs(images[cut:], 5)
    for merged in (left.merge(right), right.merge(left)):
        np.testing.assert_array_equal(merged.n, whole.n)
        np.testing.assert_allclose(merged.mean, whole.mean, atol=1e-9)
        np.testing.assert_allclose(merged.m2, whole.m2, atol=1e-7)
        assert merged.n_images == 10


# -- sparsification and components ---------------------------------------------------


def _stats_with_var(var, n=100):
    st_ = PairStats(2)
    sign = np.where(np.arange(n) % 2, 1.0, -1.0)
    st_.push_samples(np.zeros(n, int), np.ones(n, int), np.tile(sign * math.sqrt(var), (3, 1)))
    return st_


def test_sparsify_stiffness_bound():
    (e,) = sparsify(_stats_with_var(0.03), lam=0.01, variance_threshold=1.0)
    assert e.c[0] == pytest.approx(1.0 / (0.03 + 0.01))
    (e,) = sparsify(_stats_with_var(0.0), lam=0.01, variance_threshold=1.0)
    assert e.c == pytest.approx((100.0, 100.0, 100.0))
    st_ = PairStats(2)
    st_.push_samples(np.zeros(100, int), np.ones(100, int),
                     np.vstack([np.tile([-0.3, 0.3], 50), np.zeros((2, 100))]))
    (e,) = sparsify(st_, lam=0.01, variance_threshold=1.0)
    assert e.c[0] == pytest.approx(10.0)  # Var 0.09, lambda 0.01
    assert sparsify(_stats_with_var(0.5), 0.01, variance_threshold=1.0) == []
    with pytest.raises(ValueError):
        sparsify(_stats_with_var(0.1), 0.0, 1.0)


def test_matched_threshold_inverts_bound():
    assert 1.0 / (matched_threshold(7.0, 0.2) + 0.2) == pytest.approx(7.0)


def _exemplar_images(model, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
        ex = sample_exemplar(model, s, rng, origin=tuple(rng.uniform(0, 500, 2)))
        out.append(DetectionSet(ex.words, ex.x, ex.y, ex.sx, ex.sy))
    return out


def test_sparsify_recovers_planted_graph():
    lay = chain_layout()
    model = model_from_layout(lay)
    stats = accumulate_pairs(_exemplar_images(model, 300, 1), 20)
    got = {(e.i, e.j) for e in sparsify(stats, 1.0, 0.09)}
    truth = {(min(i, j), max(i, j)) for i, j, _ in lay.edges}
    assert len(got & truth) >= 0.9 * len(truth)
    assert len(got - truth) <= 0.1 * len(got)


def test_giant_components_empty_and_two_categories():
    assert giant_components([], nodes=range(5)) == []
    lay = chain_layout()
    a = model_from_layout(lay)
    shifted = Layout({w + 20: p for w, p in lay.positions.items()},
                     [[tuple(w + 20 for w in g) for g in part] for part in lay.parts],
                     [(i + 20, j + 20, c) for i, j, c in lay.edges])
    b = model_from_layout(shifted)
    images = _exemplar_images(a, 300, 2) + _exemplar_images(b, 300, 3)
    stats = accumulate_pairs(np.random.default_rng(0).permutation(np.array(images, dtype=object)), 40)
    comps = giant_components(sparsify(stats, 1.0, 0.09))
    assert [c.nodes for c in comps] == [tuple(range(20)), tuple(range(20, 40))]


# -- precision matrices --------------------------------------------------------------


def test_precision_examples():
    two = Srn((0, 1), [_edge(0, 1, 4.0)])
    np.testing.assert_allclose(precision_matrix(two, "x").matrix, [[1.0]])
    chain = Srn((0, 1, 2), [_edge(0, 1, 4.0), _edge(1, 2, 4.0)])
    # anchor is the last node: one free end, one interior node
    np.testing.assert_allclose(precision_matrix(chain, "x").matrix, [[1.0, -1.0], [-1.0, 2.0]])
    tri = Srn((0, 1, 2), [_edge(0, 1, 4.0), _edge(1, 2, 4.0), _edge(0, 2, 4.0)])
    np.testing.assert_allclose(precision_matrix(tri, "y").matrix, [[2.0, -1.0], [-1.0, 2.0]])
    np.testing.assert_allclose(precision_matrix(tri, "s").matrix, [[8.0, -4.0], [-4.0, 8.0]])


def test_precision_matches_symbolic_expansion():
    rng = np.random.default_rng(6)
    srn = random_srn(rng, 6)
    scales = rng.uniform(0.5, 2.0, 6)
    P = precision_matrix(srn, "x", scales).matrix
    assert is_positive_definite(P)
    v = sympy.symbols("v0:6")
    expr = 0
    for e in srn.edges:
        w = sympy.Rational(e.c[0]) / (sympy.Rational(scales[e.i]) + sympy.Rational(scales[e.j])) ** 2
        expr += w * (v[e.j] - v[e.i]) ** 2
    expr = sympy.expand(expr.subs(v[5], 0))
    poly = sympy.Poly(expr, *v[:5])
    for a in range(5):
        assert float(poly.coeff_monomial(v[a] ** 2)) == pytest.approx(P[a, a], rel=1e-12)
        for b in range(a + 1, 5):
            assert float(poly.coeff_monomial(v[a] * v[b])) / 2 == pytest.approx(P[a, b], rel=1e-12, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**32 - 1), st.booleans())
def test_precision_structure(n, seed, connected):
    rng = np.random.default_rng(seed)
    srn = random_srn(rng, n, connected, extra=int(rng.integers(0, n)))
    P = assemble_precision(srn, "x", rng.uniform(0.5, 2, n)).matrix
    np.testing.assert_array_equal(P, P.T)
    assert np.all(P[~np.eye(len(P), dtype=bool)] <= 0)
    assert is_positive_definite(P) == srn.is_connected()
    if not srn.is_connected():
        with pytest.raises(SingularPrecisionError):
            precision_matrix(srn, "x")


# -- likelihood --------------------------------------------------------------------------


def _consistent_srn(rng, n):
    """Random network whose rest values come from one layout (X, Y, S)."""
    base = random_srn(rng, n)
    X, Y = rng.normal(0, 2, n), rng.normal(0, 2, n)
    S = np.exp(rng.normal(0, 0.3, n))
    edges = [SpringEdge(e.i, e.j, e.c, ((X[e.j] - X[e.i]) / (S[e.i] + S[e.j]),
                                        (Y[e.j] - Y[e.i]) / (S[e.i] + S[e.j]), math.log(S[e.j] / S[e.i])))
             for e in base.edges]
    return Srn(base.nodes, edges), X, Y, S


def dense_gaussian_oracle(srn, X, Y, S, alpha, config):
    """Sum over axes of multivariate normal log densities, built edge by edge."""
    n = len(srn)
    total = 0.0
    for axis, pos, ext, rest in (("x", config.x, config.sx, alpha * X), ("y", config.y, config.sy, alpha * Y),
                                 ("s", np.log(config.sx), None, np.log(alpha * S))):
        a = "xys".index(axis)
        unit = 1.0 if ext is None else math.exp(float(np.mean(np.log(ext))))
        L = np.zeros((n, n))
        for e in srn.edges:
            w = e.c[a] if ext is None else e.c[a] / ((ext[e.i] + ext[e.j]) / unit) ** 2
            L[e.i, e.i] += w
            L[e.j, e.j] += w
            L[e.i, e.j] -= w
            L[e.j, e.i] -= w
        Lam = L[:-1, :-1]
        obs = (pos[:-1] - pos[-1]) / unit
        mean = (rest[:-1] - rest[-1]) / unit
        total += multivariate_normal(mean, np.linalg.inv(Lam)).logpdf(obs)
    return total


@pytest.mark.parametrize("seed", range(10))
def test_log_likelihood_matches_dense_gaussian(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    srn, X, Y, S = _consistent_srn(rng, n)
    alpha = 30.0
    cfg = Configuration(alpha * X + rng.normal(0, 3, n), alpha * Y + rng.normal(0, 3, n), alpha * S,
                        alpha * S)
    ours = log_likelihood(srn, cfg)
    assert ours == pytest.approx(dense_gaussian_oracle(srn, X, Y, S, alpha, cfg), rel=1e-9)


def test_rest_configuration_zero_stress():
    srn, X, Y, S = _consistent_srn(np.random.default_rng(3), 5)
    cfg = Configuration(20 * X, 20 * Y, 20 * S, 20 * S)
    total, parts = log_likelihood(srn, cfg, breakdown=True)
    unit = math.exp(float(np.mean(np.log(cfg.sx))))
    expect = 0.0
    for a, ext in ((0, cfg.sx / unit), (1, cfg.sy / unit), (2, None)):
        P = precision_matrix(srn, "xys"[a], ext).matrix
        expect += 0.5 * np.linalg.slogdet(P)[1] - 0.5 * 4 * math.log(2 * math.pi)
    assert total == pytest.approx(expect, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(srns(2, 6), st.floats(-500, 500), st.floats(-500, 500), st.floats(0.05, 20), st.integers(0, 10_000))
def test_likelihood_invariances(srn, dx, dy, alpha, seed):
    rng = np.random.default_rng(seed)
    n = len(srn)
    cfg = Configuration(rng.uniform(0, 200, n), rng.uniform(0, 200, n), rng.uniform(10, 40, n),
                        rng.uniform(10, 40, n))
    ref = log_likelihood(srn, cfg)
    assert log_likelihood(srn, cfg.transformed(1.0, dx, dy)) == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert log_likelihood(srn, cfg.transformed(alpha)) == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_likelihood_rejects_bad_configuration():
    srn = Srn((0, 1), [_edge(0, 1, 4.0)])
    with pytest.raises(ValueError):
        log_likelihood(srn, Configuration([0, np.nan], [0, 0], [1, 1], [1, 1]))
    with pytest.raises(ValueError):
        log_likelihood(srn, Configuration([0], [0], [1], [1]))


# -- exact convex solver -------------------------------------------------------------------


def _gmrf_stats(rng, n, samples=300):
    srn = random_srn(rng, n, extra=n // 3)
    from suvm.srn import gaussian_form, sample_gaussian_form

    ei, ej, c, _ = srn.edge_arrays()
    free, mean, P, _ = gaussian_form(n, ei, ej, c[:, 0], np.zeros(len(ei)))
    st_ = PairStats(n)
    lo, hi = np.triu_indices(n, 1)
    for _ in range(samples):
        v = np.zeros(n)
        v[free] = sample_gaussian_form(mean, P, rng)
        d = v[hi] - v[lo]
        st_.push_samples(lo, hi, np.stack([d, d, 0.3 * d]))
    return st_


def test_two_node_closed_form():
    st_ = _stats_with_var(0.04)
    sol = solve_convex_exact(st_, 0.05)
    V = float(st_.pair_var(0, 1).sum())
    root = brentq(lambda c: -0.5 / c + 0.5 * (V + 0.05), 1e-6, 1e6)
    assert sol.c[0] == pytest.approx(root, abs=1e-6)


def test_kkt_bound_and_provable_inclusion():
    rng = np.random.default_rng(0)
    for _ in range(8):
        st_ = _gmrf_stats(rng, int(rng.integers(3, 9)))
        lo, hi = st_.pairs()
        lam = 0.3 * float(np.median(st_.variances()[:, lo, hi].sum(0)))
        sol = solve_convex_exact(st_, lam)
        assert np.all(sol.c <= sol.bound + 1e-9)
        # for any target stiffness, pairs the threshold rule drops stay below it in the exact optimum
        for c_t in np.quantile(sol.bound, [0.2, 0.5, 0.8]):
            dropped = sol.variance > matched_threshold(c_t, lam)
            assert np.all(sol.c[dropped] < c_t + 1e-12)


def test_exact_solver_limits():
    with pytest.raises(ValueError):
        solve_convex_exact(PairStats(20), 0.0)
    big = PairStats(16)
    lo, hi = np.triu_indices(16, 1)
    big.push_samples(lo, hi, np.zeros((3, len(lo))))
    with pytest.raises(ValueError):
        solve_convex_exact(big, 0.1)
