import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special

from rwtree.env_model import BetaRho, Deterministic, EnvSpec, TwoPoint, psi
from rwtree.experiments import (
    StudyConfig, _field_task, _heavy_range_study, accumulate_excursions, chi2_two_sample, exponent_study,
    fit_loglog, hs_tail_study, levels, many_to_one_check, median_se, replica_seeds, return_time_exponent,
    run_study, sample_tilted_walk, shallow_counts_branching, shallow_counts_step, surviving_tree, write_result,
)
from rwtree.env_model import classify
from rwtree.localtime import branching_blocks
from rwtree.tree_env import EnvTree
from rwtree.walk_sim import excursion_blocks


# -- fitting -------------------------------------------------------------


def test_fit_exact_line():
    x = np.log(2.0 ** np.arange(5, 12))
    fit = fit_loglog(np.column_stack((x, 2 * x + 0.3)))
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(0.3, abs=1e-10)
    assert fit.residual == pytest.approx(0.0, abs=1e-12)


def test_fit_constant():
    fit = fit_loglog([(1.0, 4.0), (2.0, 4.0), (5.0, 4.0)])
    assert fit.slope == pytest.approx(0.0, abs=1e-15)


@given(st.integers(0, 10**6))
def test_fit_noisy_line_within_ci(seed):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 10, 30)
    sigma = 0.5
    y = -0.7 * x + 1.0 + rng.normal(0, sigma, len(x))
    fit = fit_loglog(np.column_stack((x, y)), dispersion=np.full(len(x), sigma))
    assert abs(fit.slope + 0.7) <= 5 * fit.stderr


def test_fit_needs_two_abscissae():
    with pytest.raises(ValueError):
        fit_loglog([(1.0, 2.0), (1.0, 3.0)])


def test_median_se_scale():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 2.0, 100000)
    assert median_se(x) == pytest.approx(1.2533 * 2.0 / math.sqrt(len(x)), rel=0.02)


# -- tilted walk and H^S -------------------------------------------------


def test_tilted_walk_deterministic():
    spec = EnvSpec.binary(Deterministic(0.7))
    s = sample_tilted_walk(spec, 0.4, 6, np.random.default_rng(0))
    np.testing.assert_allclose(s, 0.7 * np.arange(7))


def test_tilted_walk_beta_mean(kappa2):
    s = sample_tilted_walk(kappa2, 1.0, 1, np.random.default_rng(1), size=400000)
    inc = s[:, 1]
    expected = special.digamma(4.0) - special.digamma(3.0)  # E[log(r/(1-r))], r ~ Beta(4, 3)
    assert abs(inc.mean() - expected) <= 4 * inc.std() / math.sqrt(len(inc))
    assert expected > 0


def test_tilted_two_point(two_point_kappa2):
    law = two_point_kappa2.increment.tilted(1.0)
    assert law.p_hi == pytest.approx(0.6, abs=1e-14)


def test_hs_at_least_one(kappa2):
    tail = hs_tail_study(kappa2, 30, 5000, np.random.default_rng(0), window=(0.1, 0.01), points=5)
    assert tail.samples.min() >= 1.0


# -- many-to-one ---------------------------------------------------------


def test_many_to_one_trivial(two_point_kappa2):
    lhs, rhs = many_to_one_check(two_point_kappa2, 1, lambda V: 1.0, 1.0)
    assert lhs == pytest.approx(2.0, abs=1e-12) and rhs == pytest.approx(2.0, abs=1e-12)
    lhs, rhs = many_to_one_check(two_point_kappa2, 1, lambda V: math.exp(-V[-1]), 1.0)
    assert lhs == pytest.approx(math.exp(psi(two_point_kappa2, 1.0)), abs=1e-12)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_many_to_one_functionals(two_point_kappa2, m):
    for t in (0.5, 1.0, 2.0):
        for f in (lambda V: float(V.max() <= 0.5), lambda V: math.exp(-0.3 * V.sum()), lambda V: V.min() ** 2):
            lhs, rhs = many_to_one_check(two_point_kappa2, m, f, t)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_many_to_one_random_offspring():
    spec = EnvSpec(__import__("rwtree.env_model", fromlist=["Offspring"]).Offspring((0.1, 0.2, 0.3, 0.4)),
                   TwoPoint(1.0, -0.4, 0.55))
    lhs, rhs = many_to_one_check(spec, 3, lambda V: float(V[-1] > 0), 0.7)
    assert abs(lhs - rhs) <= 1e-12


def test_many_to_one_deterministic(very_slow):
    lhs, rhs = many_to_one_check(very_slow, 2, lambda V: V[-1], 0.5)
    assert lhs == pytest.approx(4 * 4 * math.log(2), abs=1e-10)
    assert abs(lhs - rhs) <= 1e-10


# -- seeding, determinism, merging ---------------------------------------


def test_replica_seeds_are_stable():
    a = replica_seeds(7, 100, 3)
    b = replica_seeds(7, 100, 3)
    assert a[0] == b[0] and a[1].random() == b[1].random()
    assert replica_seeds(7, 100, 4)[0] != a[0]


def test_levels():
    assert levels(1024, [0.0, 0.5, 1.0]) == [1, 32, 1024]
    assert levels(1000, [1 / 3]) == [10]


def test_rejection_rate(dying):
    q = (math.sqrt(17) - 3) / 4
    cfg = StudyConfig("exponent", dying, n_grid=(8, 16), theta_grid=(0.0,), replicas=150, seed=2)
    res = exponent_study(cfg)
    # attempts are geometric: the rejected fraction of all trees estimates q
    assert abs(res.rejection_rate - q) < 0.08
    _, _, _, attempts = surviving_tree(dying, 2, 8, 0)
    assert attempts >= 1


def _csv_bytes(tmp_path, cfg, tag):
    paths = write_result(run_study(cfg), tmp_path / tag)
    return {k: open(v, "rb").read() for k, v in paths.items()}


@pytest.mark.parametrize("kind", ["exponent", "return_time", "deterministic_time", "rate"])
def test_rerun_is_byte_identical(tmp_path, boundary, kind):
    cfg = StudyConfig(kind, boundary, n_grid=(32, 64, 128), theta_grid=(0.0, 0.4), replicas=3, seed=5, step_limit=64)
    assert _csv_bytes(tmp_path, cfg, "a") == _csv_bytes(tmp_path, cfg, "b")


def test_worker_count_does_not_change_output(tmp_path, boundary):
    cfg = StudyConfig("exponent", boundary, n_grid=(32, 64), theta_grid=(0.0, 0.3), replicas=3, seed=1)
    one = _csv_bytes(tmp_path, cfg, "one")
    cfg.workers = 2
    assert _csv_bytes(tmp_path, cfg, "two") == one


def test_merge_is_order_independent(boundary):
    cfg = StudyConfig("exponent", boundary, n_grid=(32, 64), theta_grid=(0.0, 0.5), replicas=4, seed=3)
    tasks = [(boundary, 3, n, r, "branching", cfg.theta_grid, cfg.budget, cfg.cap, False) for n in cfg.n_grid for r in range(4)]
    results = [_field_task(t) for t in tasks]
    report = classify(boundary)
    from rwtree.env_model import xi

    a = _heavy_range_study(cfg, list(results), lambda t: xi(report, t))
    shuffled = list(results)
    random.Random(0).shuffle(shuffled)
    b = _heavy_range_study(cfg, shuffled, lambda t: xi(report, t))
    assert a.rows == b.rows and a.fits == b.fits


@pytest.mark.slow
def test_backends_agree_at_small_n(boundary):
    common = dict(n_grid=(16, 32, 64), theta_grid=(0.0, 0.5), replicas=40, seed=4)
    br = exponent_study(StudyConfig("exponent", boundary, backend="branching", **common))
    st_ = exponent_study(StudyConfig("exponent", boundary, backend="step", **common))
    for k in range(2):
        rows_b = np.array([[r["n"], math.log(max(1, r["R"]))] for r in br.rows if r["theta"] == common["theta_grid"][k]])
        rows_s = np.array([[r["n"], math.log(max(1, r["R"]))] for r in st_.rows if r["theta"] == common["theta_grid"][k]])
        for n in common["n_grid"]:
            a = rows_b[rows_b[:, 0] == n, 1]
            b = rows_s[rows_s[:, 0] == n, 1]
            se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
            assert abs(a.mean() - b.mean()) <= 4 * se + 1e-12


def test_accumulated_excursions_stay_within_clock(kappa2):
    tree = EnvTree(kappa2, 3)
    counts, steps, done = accumulate_excursions(tree, 5000, np.random.default_rng(0))
    assert steps <= 5000 and done >= 1
    assert counts[1] == done
    assert 2 * counts.sum() == steps


def test_deterministic_time_study_switches_modes(boundary):
    cfg = StudyConfig("deterministic_time", boundary, n_grid=(64, 512), theta_grid=(0.0,), replicas=3, seed=1, step_limit=100)
    res = run_study(cfg)
    assert len(res.rows) == 6 and 0 <= res.extra["max_clock_undershoot"] < 1


def test_return_time_exponents(very_slow, boundary, kappa2):
    assert return_time_exponent(classify(very_slow)) == 1.0
    assert return_time_exponent(classify(boundary)) == 1.0
    assert return_time_exponent(classify(EnvSpec.binary(BetaRho(4.0, 1.5)))) == pytest.approx(1.5)
    assert return_time_exponent(classify(EnvSpec.binary(BetaRho(7.0, 3.0)))) == 2.0


def test_return_time_censoring(kappa2):
    cfg = StudyConfig("return_time", kappa2, n_grid=(16, 32), replicas=5, seed=0, budget=10)
    from rwtree.errors import StepBudgetExceeded

    with pytest.raises(StepBudgetExceeded):
        run_study(cfg)


def test_censored_exponent_study_gives_lower_bounds(kappa2):
    common = dict(n_grid=(64, 128), theta_grid=(0.0, 0.25), replicas=12, seed=2)
    full = exponent_study(StudyConfig("exponent", kappa2, **common))
    cut = exponent_study(StudyConfig("exponent", kappa2, budget=2000, censor=True, **common))
    assert "censored_fraction" not in full.fits[0]
    assert 0 < cut.fits[0]["censored_fraction"] < 1
    for a, b in zip(full.rows, cut.rows):
        assert (a["theta"], a["n"], a["replica"]) == (b["theta"], b["n"], b["replica"])
        assert b["R"] <= a["R"]


def test_rate_study_single_n(boundary):
    res = run_study(StudyConfig("rate", boundary, n_grid=(200,), replicas=3, seed=0))
    assert res.extra["fit"] is None and math.isnan(res.fits[0]["slope"])
    assert all(r["error"] >= r["best_error"] for r in res.rows)


# -- chi-square helper ---------------------------------------------------


def _shallow_nodes(tree):
    kids = list(tree.children(1))
    return kids + [g for k in kids for g in tree.children(k)]


def test_block_samplers_match_single_runs(boundary):
    tree = EnvTree(boundary, 5)
    nodes = _shallow_nodes(tree)
    rng = np.random.default_rng(11)
    single_step = [shallow_counts_step(tree, 3, rng, nodes) for _ in range(2000)]
    single_branch = [shallow_counts_branching(tree, 3, rng, nodes) for _ in range(2000)]
    step_blocks = [tuple(r) for r in excursion_blocks(tree, 3, 2000, rng, nodes, 1)]
    branch_blocks = [tuple(r) for r in branching_blocks(tree, 3, 2000, rng, nodes, 1)]
    assert chi2_two_sample(single_step, step_blocks) > 1e-3
    assert chi2_two_sample(single_branch, branch_blocks) > 1e-3


def test_block_samplers_reject_deep_nodes(boundary):
    tree = EnvTree(boundary, 5)
    tree.realize_children(np.array(_shallow_nodes(tree)))
    deep = tree.children(tree.children(tree.children(1)[0])[0])
    for f in (excursion_blocks, branching_blocks):
        with pytest.raises(ValueError):
            f(tree, 1, 1, np.random.default_rng(0), [deep[0]], 1)


def test_chi2_two_sample():
    rng = np.random.default_rng(0)
    a = [tuple(x) for x in rng.integers(0, 4, (5000, 2))]
    b = [tuple(x) for x in rng.integers(0, 4, (5000, 2))]
    assert chi2_two_sample(a, b) > 1e-3
    c = [tuple(x) for x in rng.integers(0, 3, (5000, 2))]
    assert chi2_two_sample(a, c) < 1e-10


def test_study_config_validation(boundary):
    with pytest.raises(ValueError):
        StudyConfig("nope", boundary)
    with pytest.raises(ValueError):
        StudyConfig("exponent", boundary, backend="gpu")
