"""Replicated Monte Carlo studies and exact small-instance oracles.

Every replica derives its own environment seed and walk stream from
``SeedSequence(seed, spawn_key=(n, replica, attempt))``, so results do not
depend on the worker count or on completion order.  Replicas whose tree
dies out are redrawn with the next ``attempt`` (conditioning on survival).
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import StepBudgetExceeded
from .env_model import EnvSpec, Regime, RegimeReport, classify, is_infinite, rate, xi, xi_tilde
from .estimator import gl_select
from .localtime import BRANCHING, STEP, FieldSummary, sample_field, sample_summary
from .tree_env import DEFAULT_CAP, EnvTree
from .walk_sim import DEFAULT_BUDGET, run_excursions, run_steps

KINDS = ("exponent", "deterministic_time", "return_time", "rate", "hs_tail")
DEFAULT_N_GRID = tuple(2**p for p in range(10, 18))
DEFAULT_THETAS = (0.0, 0.15, 0.3, 0.45, 0.6)
MAX_ATTEMPTS = 1000


@dataclass
class StudyConfig:
    """Everything that determines a study's output."""

    kind: str
    spec: EnvSpec
    n_grid: tuple[int, ...] = DEFAULT_N_GRID
    theta_grid: tuple[float, ...] = DEFAULT_THETAS
    replicas: int = 50
    seed: int = 0
    backend: str = BRANCHING
    out_dir: str | None = None
    workers: int = 1
    z: float = 3.0
    gamma: float = 2.0
    budget: int = DEFAULT_BUDGET
    cap: int = DEFAULT_CAP
    ell: int = 200
    samples: int = 10**6
    step_limit: int = 1 << 14
    censor: bool = False  # exponent studies: stop a replica after budget/2 crossings

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown study kind {self.kind!r}")
        if self.backend not in (STEP, BRANCHING):
            raise ValueError(f"unknown backend {self.backend!r}")
        self.n_grid = tuple(int(n) for n in self.n_grid)
        self.theta_grid = tuple(float(t) for t in self.theta_grid)
        if not isinstance(self.censor, bool):
            raise ValueError("censor must be true or false")
        if any(n < 1 for n in self.n_grid) or self.replicas < 1:
            raise ValueError("n grid and replica count must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        d["n_grid"] = list(self.n_grid)
        d["theta_grid"] = list(self.theta_grid)
        return d


@dataclass
class SlopeFit:
    """Least-squares line through ``(log n, log statistic)`` points."""

    x: np.ndarray
    y: np.ndarray
    slope: float
    intercept: float
    residual: float  # root mean square
    stderr: float
    dispersion: np.ndarray | None = None  # per-point standard error of y


def fit_loglog(points, weights=None, dispersion=None) -> SlopeFit:
    """Weighted least squares of ``y`` on ``x`` for ``points = [(x, y), ...]``.

    ``stderr`` propagates ``dispersion`` when given (replicate noise of each
    point) and falls back to the regression residual otherwise.
    """
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("need two distinct abscissae")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    xm = np.dot(w, x) / w.sum()
    ym = np.dot(w, y) / w.sum()
    sxx = np.dot(w, (x - xm) ** 2)
    slope = float(np.dot(w, (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    res = y - (intercept + slope * x)
    rms = float(np.sqrt(np.mean(res**2)))
    if dispersion is not None:
        disp = np.asarray(dispersion, dtype=float)
        stderr = float(np.sqrt(np.sum((w * (x - xm) / sxx) ** 2 * disp**2)))
    else:
        disp = None
        dof = len(x) - 2
        stderr = float(np.sqrt(np.dot(w, res**2) / dof / sxx)) if dof > 0 else math.nan
    return SlopeFit(x, y, slope, intercept, rms, stderr, disp)


@dataclass
class StudyResult:
    kind: str
    rows: list[dict]
    fits: list[dict]
    rejection_rate: float = 0.0
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# seeding and the worker pool


def replica_seeds(seed: int, n: int, replica: int, attempt: int = 0) -> tuple[int, np.random.Generator]:
    """``(tree seed, walk generator)`` of one replica, independent of scheduling."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(n), int(replica), int(attempt)))
    env_ss, walk_ss = ss.spawn(2)
    return int(env_ss.generate_state(1, np.uint64)[0]), np.random.default_rng(walk_ss)


def surviving_tree(spec: EnvSpec, seed: int, n: int, replica: int, cap: int = DEFAULT_CAP):
    """First non-extinct environment of a replica: ``(tree, tree_seed, rng, attempts)``."""
    for attempt in range(MAX_ATTEMPTS):
        tree_seed, rng = replica_seeds(seed, n, replica, attempt)
        tree = EnvTree(spec, tree_seed, cap)
        if not tree.is_extinct():
            return tree, tree_seed, rng, attempt + 1
    raise RuntimeError(f"no surviving tree in {MAX_ATTEMPTS} attempts")


def run_pool(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    """Apply ``fn`` to every task; results come back in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def levels(n: int, thetas) -> list[int]:
    """Heavy-range levels ``ceil(n**theta)``."""
    return [max(1, math.ceil(n**t - 1e-9)) for t in thetas]


# ---------------------------------------------------------------------------
# replica tasks (module level so they pickle)


def _field_task(args) -> dict:
    spec, seed, n, r, backend, thetas, budget, cap, censor = args
    tree, tree_seed, rng, attempts = surviving_tree(spec, seed, n, r, cap)
    if backend == STEP:
        try:
            summary = FieldSummary.of(run_excursions(tree, n, rng, budget=budget).field)
        except StepBudgetExceeded:
            if not censor:
                raise
            summary = FieldSummary(n, np.zeros(2, dtype=np.int64), -1, censored=True)
    else:
        summary = sample_summary(spec, tree_seed, n, rng, max_total=budget // 2 if censor else None)
    R = summary.heavy_ranges(levels(n, thetas))
    T = math.inf if summary.censored else 2 * summary.total
    return {"n": n, "replica": r, "R": [int(v) for v in R], "T": T, "attempts": attempts}


def _clock_task(args) -> dict:
    spec, seed, n, r, thetas, step_limit, budget, cap = args
    tree, _, rng, attempts = surviving_tree(spec, seed, n, r, cap)
    if n <= step_limit:
        counts = run_steps(tree, n, rng).field.count
        steps, excursions = n, None
    else:
        counts, steps, excursions = accumulate_excursions(tree, n, rng)
    R = [int(np.count_nonzero(counts >= a)) for a in levels(n, thetas)]
    return {"n": n, "replica": r, "R": R, "steps": steps, "excursions": excursions, "attempts": attempts}


def accumulate_excursions(tree: EnvTree, n_steps: int, rng: np.random.Generator):
    """Sum independent single-excursion fields while the step total stays ``<= n_steps``.

    Returns ``(counts by node id, steps used, excursions)``; the walk stops at
    the last complete excursion, so the clock undershoots by less than one
    excursion.
    """
    acc = np.zeros(tree.size, dtype=np.int64)
    steps = 0
    done = 0
    while True:
        f = sample_field(tree, 1, rng)
        t = 2 * f.total
        if steps + t > n_steps:
            break
        if tree.size > len(acc):
            acc = np.concatenate((acc, np.zeros(tree.size - len(acc), dtype=np.int64)))
        np.add.at(acc, f.node, f.count)
        steps += t
        done += 1
    return acc, steps, done


def _rate_task(args) -> dict:
    spec, seed, n, r, z, cap = args
    tree, _, rng, attempts = surviving_tree(spec, seed, n, r, cap)
    fld = sample_field(tree, n, rng)
    sel = gl_select(fld, z, spec.mean_nu, spec.K)
    cdf = spec.increment.rho_cdf
    errors = {a: c.sup_error(cdf) for a, c in sel.cdfs.items()}
    best = min(errors, key=lambda a: (errors[a], a))
    return {
        "n": n, "replica": r, "alpha_hat": sel.alpha_hat, "error": errors[sel.alpha_hat],
        "best_alpha": best, "best_error": errors[best], "errors": errors, "B": sel.B,
        "attempts": attempts,
    }


def _rejection(results) -> float:
    tries = sum(r["attempts"] for r in results)
    return (tries - len(results)) / tries if tries else 0.0


# ---------------------------------------------------------------------------
# studies


def _heavy_range_study(config: StudyConfig, results, theory: Callable[[float], float]) -> StudyResult:
    results = sorted(results, key=lambda d: (d["n"], d["replica"]))
    rows, fits = [], []
    for k, theta in enumerate(config.theta_grid):
        pts, disp = [], []
        for n in config.n_grid:
            logs = []
            for d in results:
                if d["n"] != n:
                    continue
                R = d["R"][k]
                rows.append({"theta": theta, "n": n, "replica": d["replica"], "R": R,
                             "logR_over_logn": math.log(max(1, R)) / math.log(n) if n > 1 else 0.0})
                logs.append(math.log(max(1, R)))
            logs = np.array(logs)
            pts.append((math.log(n), float(logs.mean())))
            disp.append(float(logs.std(ddof=1) / math.sqrt(len(logs))) if len(logs) > 1 else 0.0)
        fit = fit_loglog(pts, dispersion=disp)
        th = theory(theta)
        row = {"theta": theta, "slope": fit.slope, "stderr": fit.stderr, "xi_theory": th, "abs_gap": abs(fit.slope - th)}
        if config.censor:
            # censored replicas keep the heavy range found so far, a lower bound
            row["censored_fraction"] = float(np.mean([d["T"] == math.inf for d in results]))
        fits.append(row)
    rows.sort(key=lambda d: (d["theta"], d["n"], d["replica"]))
    return StudyResult(config.kind, rows, fits, _rejection(results))


def _grid_tasks(config: StudyConfig):
    return [(n, r) for n in config.n_grid for r in range(config.replicas)]


def exponent_study(config: StudyConfig) -> StudyResult:
    """Heavy range ``R_{ceil(n^theta)}`` at the n-th return to ``e*``, slope of mean ``log+ R``."""
    report = classify(config.spec)
    tasks = [(config.spec, config.seed, n, r, config.backend, config.theta_grid, config.budget, config.cap,
              config.censor) for n, r in _grid_tasks(config)]
    results = run_pool(_field_task, tasks, config.workers)
    return _heavy_range_study(config, results, lambda t: xi(report, t))


def deterministic_time_study(config: StudyConfig) -> StudyResult:
    """Heavy range at clock time ``n``.

    For ``n <= config.step_limit`` the walk makes exactly ``n`` steps from
    ``e``; beyond that, whole excursions are accumulated up to time ``n``.
    """
    report = classify(config.spec)
    tasks = [(config.spec, config.seed, n, r, config.theta_grid, config.step_limit, config.budget, config.cap)
             for n, r in _grid_tasks(config)]
    results = run_pool(_clock_task, tasks, config.workers)
    res = _heavy_range_study(config, results, lambda t: xi_tilde(report, min(t, 1.0)))
    undershoot = [1 - d["steps"] / d["n"] for d in results if d["excursions"] is not None]
    res.extra["max_clock_undershoot"] = max(undershoot) if undershoot else 0.0
    return res


def return_time_exponent(report: RegimeReport) -> float:
    """Scaling order of ``T^(n)`` (log factors dropped)."""
    if report.regime is Regime.NULL_RECURRENT_FAST:
        return 2.0 if is_infinite(report.kappa) else min(float(report.kappa), 2.0)
    if not report.regime.recurrent:
        raise ValueError("return times are infinite for a transient walk")
    return 1.0


def median_se(values: np.ndarray) -> float:
    """Large-sample standard error of a median, from the interquartile range."""
    q1, q3 = np.quantile(values, [0.25, 0.75])
    return float(1.2533 * (q3 - q1) / 1.349 / math.sqrt(len(values)))


def return_time_study(config: StudyConfig) -> StudyResult:
    """Slope of the median of ``log T^(n)`` against ``log n``.

    Return times can have infinite mean, so replicas are stopped once
    ``T^(n)`` passes ``config.budget`` and recorded as censored (``inf``).
    The median stays exact while fewer than half the replicas are censored.
    """
    report = classify(config.spec)
    tasks = [(config.spec, config.seed, n, r, config.backend, (), config.budget, config.cap, True)
             for n, r in _grid_tasks(config)]
    results = sorted(run_pool(_field_task, tasks, config.workers), key=lambda d: (d["n"], d["replica"]))
    rows = [{"n": d["n"], "replica": d["replica"], "T": d["T"]} for d in results]
    pts, disp = [], []
    for n in config.n_grid:
        logs = np.log([d["T"] for d in results if d["n"] == n])
        if np.count_nonzero(np.isinf(logs)) * 2 >= len(logs):
            raise StepBudgetExceeded(f"half of the replicas at n={n} passed the budget of {config.budget} steps")
        pts.append((math.log(n), float(np.median(logs))))
        disp.append(median_se(logs) if np.isfinite(np.quantile(logs, 0.75)) else math.nan)
    fit = fit_loglog(pts, dispersion=disp)
    th = return_time_exponent(report)
    censored = sum(math.isinf(d["T"]) for d in results) / len(results)
    fits = [{"slope": fit.slope, "stderr": fit.stderr, "theory": th, "abs_gap": abs(fit.slope - th),
             "censored_fraction": censored}]
    return StudyResult(config.kind, rows, fits, _rejection(results), {"fit": fit})


def rate_study(config: StudyConfig) -> StudyResult:
    """Sup error of the GL-selected estimator against the true CDF of ``rho``."""
    report = classify(config.spec)
    tasks = [(config.spec, config.seed, n, r, config.z, config.cap) for n, r in _grid_tasks(config)]
    results = sorted(run_pool(_rate_task, tasks, config.workers), key=lambda d: (d["n"], d["replica"]))
    rows = [{k: d[k] for k in ("n", "replica", "alpha_hat", "error", "best_alpha", "best_error")} for d in results]
    means = []
    for n in config.n_grid:
        e = np.array([d["error"] for d in results if d["n"] == n])
        means.append((n, float(e.mean()), float(e.std(ddof=1) / math.sqrt(len(e))) if len(e) > 1 else 0.0))
    fit = None
    if len(means) > 1:
        fit = fit_loglog([(math.log(n), math.log(m)) for n, m, _ in means],
                         dispersion=[s / m for _, m, s in means])
    th = -rate(report, config.gamma)
    slope = math.nan if fit is None else fit.slope
    fits = [{"n": n, "mean_error": m, "slope": slope, "rate_theory": th} for n, m, _ in means]
    return StudyResult(config.kind, rows, fits, _rejection(results), {"fit": fit, "replicas": results})


def sample_tilted_walk(spec: EnvSpec, t: float, length: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Random walk ``S_0 = 0, ..., S_length`` with increments from the ``t``-tilted law.

    With ``size`` the result has shape ``(size, length + 1)``.
    """
    law = spec.increment.tilted(t)
    shape = (length,) if size is None else (size, length)
    steps = np.asarray(law.sample(rng, shape), dtype=float).reshape(shape)
    zero = np.zeros(shape[:-1] + (1,))
    return np.concatenate((zero, np.cumsum(steps, axis=-1)), axis=-1)


@dataclass
class TailFit:
    slope: float
    stderr: float
    thresholds: np.ndarray
    survival: np.ndarray
    samples: np.ndarray = field(repr=False)


def hs_tail_study(spec: EnvSpec, ell: int, samples: int, rng: np.random.Generator,
                  window=(1e-2, 1e-4), points: int = 15, chunk: int = 20_000) -> TailFit:
    """Log-survival slope of ``sum_{k<=ell} exp(-S_k)`` under the tilt at 1.

    The slope is fitted on ``points`` tail probabilities spaced geometrically
    across ``window``.
    """
    out = np.empty(samples)
    for lo in range(0, samples, chunk):
        m = min(chunk, samples - lo)
        S = sample_tilted_walk(spec, 1.0, ell, rng, size=m)
        out[lo:lo + m] = np.exp(-S).sum(axis=1)
    probs = np.geomspace(window[0], window[1], points)
    thresholds = np.quantile(out, 1.0 - probs)
    surv = np.array([np.count_nonzero(out >= m) / samples for m in thresholds])
    fit = fit_loglog(np.column_stack((np.log(thresholds), np.log(surv))))
    return TailFit(fit.slope, fit.stderr, thresholds, surv, out)


def many_to_one_check(spec: EnvSpec, m: int, f: Callable[[np.ndarray], float], t: float) -> tuple[float, float]:
    """Both sides of the many-to-one identity by exhaustive enumeration.

    Left: expected sum of ``f`` over generation ``m``, each mark path weighted
    by the mean number of vertices carrying it.  Right: the ``t``-tilted walk
    with the exponential compensation ``exp(t S_m + m psi(t))``.
    """
    atoms = spec.increment.atoms()
    if atoms is None or m > 5:
        raise ValueError("needs a discrete increment law and depth m <= 5")
    omegas = np.array([w for w, _ in atoms])
    probs = np.array([p for _, p in atoms])
    weights = probs * np.exp(-t * omegas)
    tilted = weights / weights.sum()
    log_psi = math.log(spec.mean_nu) + math.log(weights.sum())
    nu_law = spec.offspring.probs
    lhs = rhs = 0.0
    for path in itertools.product(range(len(atoms)), repeat=m):
        idx = list(path)
        V = np.cumsum(omegas[idx])
        fv = f(V)
        # expected number of generation-m vertices with this mark path
        branching = 1.0
        for i in idx:
            branching *= sum(k * nu_law[k] * probs[i] for k in range(len(nu_law)))
        lhs += branching * fv
        rhs += float(np.prod(tilted[idx])) * math.exp(t * V[-1] + m * log_psi) * fv
    return lhs, rhs


# ---------------------------------------------------------------------------
# backend comparison


def shallow_counts_step(tree: EnvTree, n: int, rng: np.random.Generator, nodes: Sequence[int]) -> tuple[int, ...]:
    depth = int(max(tree.depth[x] for x in nodes))
    counts = run_excursions(tree, n, rng, max_depth=depth - 1).field.as_dict()
    return tuple(counts.get(x, 0) for x in nodes)


def shallow_counts_branching(tree: EnvTree, n: int, rng: np.random.Generator, nodes: Sequence[int]) -> tuple[int, ...]:
    depth = int(max(tree.depth[x] for x in nodes))
    counts = sample_field(tree, n, rng, max_depth=depth - 1).as_dict()
    return tuple(counts.get(x, 0) for x in nodes)


def chi2_two_sample(a: Sequence, b: Sequence, min_expected: float = 5.0) -> float:
    """p-value of a two-sample chi-square test on categorical outcomes.

    Categories whose expected count is below ``min_expected`` in either
    sample are pooled into one cell.
    """
    keys = sorted(set(a) | set(b))
    ca = {k: 0 for k in keys}
    cb = dict(ca)
    for x in a:
        ca[x] += 1
    for x in b:
        cb[x] += 1
    na, nb = len(a), len(b)
    frac = min(na, nb) / (na + nb)
    big = [k for k in keys if (ca[k] + cb[k]) * frac >= min_expected]
    small = [k for k in keys if (ca[k] + cb[k]) * frac < min_expected]
    table = [[ca[k] for k in big], [cb[k] for k in big]]
    if small:
        table[0].append(sum(ca[k] for k in small))
        table[1].append(sum(cb[k] for k in small))
    if len(table[0]) < 2:
        return 1.0
    return float(stats.chi2_contingency(np.array(table))[1])


# ---------------------------------------------------------------------------
# dispatch and output

STUDIES = {
    "exponent": exponent_study,
    "deterministic_time": deterministic_time_study,
    "return_time": return_time_study,
    "rate": rate_study,
}


def run_study(config: StudyConfig) -> StudyResult:
    if config.kind == "hs_tail":
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        tail = hs_tail_study(config.spec, config.ell, config.samples, rng)
        rows = [{"tail_probability": float(p), "threshold": float(m)} for m, p in zip(tail.thresholds, tail.survival)]
        kappa = classify(config.spec).kappa
        theory = math.nan if kappa is None or is_infinite(kappa) else -(float(kappa) - 1.0)
        fits = [{"slope": tail.slope, "stderr": tail.stderr, "theory": theory, "abs_gap": abs(tail.slope - theory)}]
        return StudyResult(config.kind, rows, fits)
    return STUDIES[config.kind](config)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])


def write_result(result: StudyResult, out_dir) -> dict[str, str]:
    """Write ``<kind>.csv`` and ``<kind>_fits.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"rows": str(out / f"{result.kind}.csv"), "fits": str(out / f"{result.kind}_fits.csv")}
    write_csv(paths["rows"], result.rows)
    write_csv(paths["fits"], result.fits)
    return paths


def with_workers(config: StudyConfig, workers: int | None) -> StudyConfig:
    return replace(config, workers=default_workers() if workers is None else workers)
