import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats

from rwtree.env_model import BetaRho, Deterministic, EnvSpec, TwoPoint
from rwtree.errors import EmptyCandidates
from rwtree.estimator import (
    EXACT_LIMIT, EmpiricalCdf, _kernel_mass, bias_bound, default_candidates, estimate_cdf, estimate_moment,
    f_alpha, f_alpha_from_moments, gl_select, holder_norm, moment_oracle, phi, phi_array, psi_l,
    variance_majorant,
)
from rwtree.localtime import sample_field
from rwtree.tree_env import EnvTree


def big_comb(n, k):
    return math.comb(n, k) if 0 <= k <= n else 0


def nb_pmf(i, rho, j):
    j = np.asarray(j, dtype=float)
    return np.exp(special.gammaln(i + j) - special.gammaln(j + 1) - special.gammaln(i) + i * math.log(rho) + j * math.log1p(-rho))


# -- kernels -------------------------------------------------------------


@given(st.integers(1, 40), st.integers(0, 40))
def test_phi_zero_zero_is_one(i, j):
    assert phi(0, 0, i, j) == pytest.approx(1.0, abs=1e-12)


def test_phi_hand_value():
    assert phi(1, 0, 2, 1) == 0.5
    assert Fraction(big_comb(1, 0), big_comb(2, 1)) == Fraction(1, 2)


@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 200), st.integers(0, 200))
def test_phi_bounds(alpha, beta, i, j):
    v = phi(alpha, beta, i, j)
    assert 0.0 <= v <= 1.0 / math.comb(alpha + beta, alpha) + 1e-12


@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 80), st.integers(0, 80))
def test_phi_log_path_matches_exact(alpha, beta, i, j):
    exact = 0.0
    if i >= alpha + 1 and j >= beta:
        exact = float(Fraction(big_comb(i + j - alpha - 1 - beta, i - alpha - 1), big_comb(i + j - 1, j)))
    assert phi_array(alpha, beta, [i], [j])[0] == pytest.approx(exact, rel=1e-10, abs=1e-300)
    assert phi(alpha, beta, i, j) == pytest.approx(exact, rel=1e-10, abs=1e-300)


def test_combinatorial_equality():
    a, (alpha, beta, i) = 0.3, (1, 2, 3)
    j = np.arange(beta, 201)
    terms = [big_comb(i - alpha + jj - beta, i - alpha) * a ** (i + 1) * (1 - a) ** jj for jj in j]
    assert sum(terms) == pytest.approx(a**alpha * (1 - a) ** beta, abs=1e-12)


@pytest.mark.parametrize("rho", [0.2, 0.5, 0.9])
def test_phi_conditionally_unbiased(rho):
    j = np.arange(0, 600)
    for alpha in range(5):
        for beta in range(5):
            for i in range(alpha + 1, alpha + 7):
                pmf = nb_pmf(i, rho, j)
                vals = np.array([phi(alpha, beta, i, int(jj)) for jj in j])
                assert float(np.dot(vals, pmf)) == pytest.approx(rho**alpha * (1 - rho) ** beta, abs=1e-10)


def test_psi_l_examples():
    assert psi_l(2, 1, 3, 2) == 0.5
    for alpha in range(1, 6):
        assert psi_l(alpha, alpha, alpha, 5) == pytest.approx(1.0)
        for i in range(alpha, alpha + 4):
            for l in range(alpha + 1):
                assert psi_l(alpha, l, i, 0) == (1.0 if l == alpha else 0.0)
    assert psi_l(3, 0, 10, 4) == 0.0
    assert psi_l(3, 3, 2, 4) == 0.0


@given(st.integers(1, 12), st.integers(1, 120), st.integers(0, 120))
def test_psi_l_monotone_and_vandermonde(alpha, i, j):
    vals = [psi_l(alpha, l, i, j) for l in range(alpha + 1)]
    assert vals[0] == 0.0
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in vals)
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    if i >= alpha:
        assert vals[-1] == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("rho", [0.2, 0.5, 0.9])
@pytest.mark.parametrize("alpha", [1, 2, 4])
def test_psi_l_conditional_mean_is_binomial_cdf(rho, alpha):
    j = np.arange(0, 600)
    for i in range(alpha, alpha + 4):
        pmf = nb_pmf(i, rho, j)
        for l in range(alpha + 1):
            vals = np.array([psi_l(alpha, l, i, int(jj)) for jj in j])
            target = stats.binom.cdf(l - 1, alpha - 1, rho)
            assert float(np.dot(vals, pmf)) == pytest.approx(target, abs=1e-10)


@pytest.mark.parametrize("alpha", [1, 2, 5, 17])
def test_kernel_mass_matches_psi_l(alpha):
    rng = np.random.default_rng(alpha)
    i = rng.integers(alpha, alpha + 90, 25)
    j = rng.integers(0, 90, 25)
    mass = _kernel_mass(alpha, i, j)
    cum = np.array([sum(psi_l(alpha, l, int(a), int(b)) for a, b in zip(i, j)) for l in range(alpha + 1)])
    np.testing.assert_allclose(mass, np.diff(cum), atol=1e-10)


# -- fields --------------------------------------------------------------


def _fields(spec, n, k, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_field(EnvTree(spec, seed * 1000 + s), n, rng) for s in range(k)]


def test_cdf_invariants(boundary):
    for f in _fields(boundary, 300, 5):
        for alpha in (1, 2, 3, 8, 32):
            cdf = estimate_cdf(f, alpha, boundary.mean_nu)
            v = cdf.values
            assert v[0] == 0.0 and np.all(v >= 0) and np.all(np.diff(v) >= -1e-12)
            heavy = f.count >= alpha
            r = int(heavy.sum())
            if r:
                assert v[-1] * boundary.mean_nu * r == pytest.approx(float(f.nu[heavy].sum()), rel=1e-10)


def test_cdf_single_heavy_vertex(very_slow):
    # positive recurrent with a steep potential: for n=1 only the root reaches level 1 in most draws
    spec = very_slow
    tree = EnvTree(spec, 0)
    rng = np.random.default_rng(4)
    for _ in range(50):
        f = sample_field(tree, 3, rng)
        if np.count_nonzero(f.count >= 3) == 1:
            cdf = estimate_cdf(f, 3, spec.mean_nu)
            assert cdf.values[-1] == pytest.approx(2 / spec.mean_nu)
            return
    pytest.skip("no draw with a single heavy vertex")


def test_cdf_empty_level(boundary):
    f = _fields(boundary, 5, 1)[0]
    cdf = estimate_cdf(f, 10**6, boundary.mean_nu)
    assert cdf.support == 0 and not cdf.values.any()


def test_moment_zero_zero_identity(boundary):
    for f in _fields(boundary, 200, 3):
        est = estimate_moment(f, 0, 0, boundary.mean_nu)
        heavy = f.count >= 1
        assert est.value == pytest.approx(f.nu[heavy].sum() / (boundary.mean_nu * heavy.sum()))
        assert est.support == heavy.sum()


def test_moment_bounds(dying):
    rng = np.random.default_rng(0)
    for s in range(10):
        f = sample_field(EnvTree(dying, s), 50, rng)
        for a in range(3):
            for b in range(3):
                v = estimate_moment(f, a, b, dying.mean_nu).value
                assert 0.0 <= v <= dying.K / dying.mean_nu + 1e-12


def test_moment_mean_rho(boundary):
    vals = np.array([estimate_moment(f, 1, 0, boundary.mean_nu).value for f in _fields(boundary, 10**4, 40, seed=3)])
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - 0.75) <= 4 * se
    assert moment_oracle(boundary, 1, 0) == pytest.approx(0.75)


def test_moment_oracles():
    assert moment_oracle(EnvSpec.binary(BetaRho(3.0, 2.0)), 2, 1) == pytest.approx(
        math.exp(special.betaln(5, 3) - special.betaln(3, 2)))
    r = 1 / (1 + math.exp(-0.7))
    assert moment_oracle(EnvSpec.binary(Deterministic(0.7)), 2, 3) == pytest.approx(r**2 * (1 - r) ** 3)
    law = TwoPoint(1.0, -0.5, 0.3)
    rh, rl = 1 / (1 + math.exp(-1.0)), 1 / (1 + math.exp(0.5))
    assert moment_oracle(law, 1, 2) == pytest.approx(0.3 * rh * (1 - rh) ** 2 + 0.7 * rl * (1 - rl) ** 2)


# -- population CDFs -----------------------------------------------------


def test_f_alpha_examples(boundary):
    law = boundary.increment
    f1 = f_alpha(law, 1)
    assert f1(1.0) == pytest.approx(1.0) and f1(0.99) == 0.0
    assert f_alpha(law, 2)(0.5) == pytest.approx(law.rho_moment(0, 1))
    for alpha in (1, 2, 7, 40):
        np.testing.assert_allclose(f_alpha(law, alpha).values, f_alpha_from_moments(alpha, law.rho_moment).values, atol=1e-12)
    law2 = TwoPoint(1.0, -0.5, 0.3)
    np.testing.assert_allclose(f_alpha(law2, 9).values, f_alpha_from_moments(9, law2.rho_moment).values, atol=1e-12)


def test_bias_bound(boundary):
    law = boundary.increment
    holder = holder_norm(law.rho_cdf, 2.0, pdf=lambda u: 3 * u**2)
    assert holder == pytest.approx(9.0, rel=1e-3)
    alpha = 40
    grid = np.arange(alpha + 1) / alpha
    gap = np.abs(f_alpha(law, alpha).values - law.rho_cdf(grid)).max()
    assert gap <= bias_bound(alpha, holder, 2.0)


# -- step functions ------------------------------------------------------


def _dense_sup(f, g, m=20000):
    u = np.linspace(0, 1, m + 1)
    return np.abs(f(u) - g(u)).max()


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
def test_sup_distance_is_exact(a, b, seed):
    rng = np.random.default_rng(seed)
    fa = EmpiricalCdf(a, np.concatenate(([0.0], np.sort(rng.random(a)))))
    fb = EmpiricalCdf(b, np.concatenate(([0.0], np.sort(rng.random(b)))))
    d = fa.sup_distance(fb)
    assert d == pytest.approx(fb.sup_distance(fa))
    # the dense grid contains every breakpoint l/a, l/b for a, b <= 30 up to rounding
    u = np.unique(np.concatenate([np.arange(a + 1) / a, np.arange(b + 1) / b, np.linspace(0, 1, 5001)]))
    assert d == pytest.approx(np.abs(fa(u) - fb(u)).max(), abs=1e-12)


def test_sup_error_continuous(boundary):
    f = _fields(boundary, 400, 1)[0]
    cdf = estimate_cdf(f, 16, boundary.mean_nu)
    exact = cdf.sup_error(lambda u: np.asarray(u) ** 3)
    dense = _dense_sup(cdf, lambda u: u**3, 160000)
    assert dense <= exact + 1e-12 and exact - dense < 1e-3


def test_sup_error_step_truth():
    cdf = EmpiricalCdf(2, np.array([0.0, 0.25, 1.0]))
    truth = lambda u: (np.asarray(u) >= 0.6).astype(float)
    assert cdf.sup_error(truth) == pytest.approx(0.75)


# -- Goldenshluger-Lepski ------------------------------------------------


def test_gl_single_candidate(boundary):
    f = _fields(boundary, 200, 1)[0]
    sel = gl_select(f, 3.0, boundary.mean_nu, boundary.K, candidates=[4])
    assert sel.alpha_hat == 4 and sel.Delta[4] == pytest.approx(-sel.B[4])


def test_gl_diagnostics(boundary):
    for f in _fields(boundary, 500, 4):
        sel = gl_select(f, 3.0, boundary.mean_nu, boundary.K)
        assert sel.alpha_hat in sel.candidates
        assert sel.candidates == [a for a in default_candidates(f)]
        top = max(sel.candidates)
        assert sel.Delta[top] >= -sel.B[top]
        for a in sel.candidates:
            r = int(np.count_nonzero(f.count >= a))
            assert sel.B[a] == pytest.approx(variance_majorant(a, r, 3.0, 2.0, 2))
        score = {a: sel.Delta[a] + sel.B[a] for a in sel.candidates}
        assert score[sel.alpha_hat] == min(score.values())
        assert sel.to_dict()["alpha_hat"] == sel.alpha_hat


def test_gl_empty_candidates(boundary):
    f = _fields(boundary, 5, 1)[0]
    with pytest.raises(EmptyCandidates):
        gl_select(f, 3.0, boundary.mean_nu, boundary.K, candidates=[10**7])
    with pytest.raises(ValueError):
        gl_select(f, 0.0, boundary.mean_nu, boundary.K)


def test_default_candidates_are_powers_of_two(boundary):
    f = _fields(boundary, 100, 1)[0]
    c = default_candidates(f)
    assert c[0] == 1 and all(b == 2 * a for a, b in zip(c, c[1:]))
    assert c[-1] <= f.count.max() < 2 * c[-1]
