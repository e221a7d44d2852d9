"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 capacity or step budget
exhausted, 4 no usable candidate level, 1 any other library error.  Errors
go to stderr as ``rwtree: error[<tag>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import load_spec, load_study
from .env_model import Clock, classify, rate, xi, xi_tilde
from .errors import CapacityExceeded, ConfigError, EmptyCandidates, RwtreeError, StepBudgetExceeded
from .estimator import gl_select
from .experiments import DEFAULT_THETAS, default_workers, replica_seeds, run_study, write_csv, write_result
from .localtime import BRANCHING, STEP, LocalTimeField, heavy_ranges, return_time, sample_field
from .tree_env import EnvTree
from .walk_sim import DEFAULT_BUDGET, run_excursions

EXIT_CODES = {
    ConfigError: 2,
    CapacityExceeded: 3,
    StepBudgetExceeded: 3,
    EmptyCandidates: 4,
}


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    tool_version: str = __version__
    versions: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
    })
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)
    rejection_rate: float | None = None

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _dumps(d) -> str:
    return json.dumps(d, indent=2, sort_keys=True, default=_json_default)


def _out_dir(args) -> Path | None:
    if args.out_dir is None:
        return None
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_classify(args) -> int:
    spec = load_spec(args.spec)
    report = classify(spec)
    out = report.to_dict()
    if report.regime.recurrent:
        thetas = list(DEFAULT_THETAS) + [1.0]
        out["xi"] = {repr(t): xi(report, t) for t in thetas}
        out["xi_tilde"] = {repr(t): xi_tilde(report, t) for t in thetas}
        out["gamma"] = args.gamma
        out["rate"] = {c.value: rate(report, args.gamma, c) for c in Clock}
    text = _dumps(out)
    print(text)
    d = _out_dir(args)
    if d is not None:
        (d / "regime.json").write_text(text + "\n")
    return 0


def _simulate_field(spec, n, backend, seed, budget):
    tree_seed, rng = replica_seeds(seed, n, 0)
    tree = EnvTree(spec, tree_seed)
    if backend == STEP:
        run = run_excursions(tree, n, rng, budget=budget)
        return run.field, run.steps
    fld = sample_field(tree, n, rng)
    return fld, return_time(fld)


def cmd_simulate(args) -> int:
    started = _now()
    spec = load_spec(args.spec)
    fld, steps = _simulate_field(spec, args.n, args.backend, args.seed, args.budget)
    top = max(1, int(fld.count.max()))
    alphas = [1 << p for p in range(int(math.log2(top)) + 1)]
    summary = {
        "n": fld.n, "backend": fld.backend, "N_root": int(fld.count[0]), "return_time": int(steps),
        "max_generation": fld.max_generation, "recorded_vertices": len(fld),
        "heavy_range": {str(a): int(r) for a, r in zip(alphas, heavy_ranges(fld, alphas))},
    }
    print(_dumps(summary))
    d = _out_dir(args)
    if d is not None:
        fld.dump(d / "field.csv")
        (d / "summary.json").write_text(_dumps(summary) + "\n")
        m = RunManifest("simulate", {"spec": spec.to_dict(), "n": args.n, "backend": args.backend, "budget": args.budget},
                        args.seed, started=started, finished=_now(),
                        outputs={"field": str(d / "field.csv"), "summary": str(d / "summary.json")})
        m.write(d)
    return 0


def cmd_estimate(args) -> int:
    started = _now()
    spec = load_spec(args.spec)
    if args.field is not None:
        fld = LocalTimeField.load(args.field)
    else:
        if args.n is None:
            raise ConfigError("estimate needs --field or --n", field="n")
        fld, _ = _simulate_field(spec, args.n, args.backend, args.seed, args.budget)
    sel = gl_select(fld, args.z, spec.mean_nu, spec.K)
    grid = sel.cdf.grid
    truth = np.asarray(spec.increment.rho_cdf(grid), dtype=float)
    rows = [{"u": float(u), "F_hat": float(v), "F_true": float(t)} for u, v, t in zip(grid, sel.cdf.values, truth)]
    diag = sel.to_dict()
    diag["sup_error"] = sel.cdf.sup_error(spec.increment.rho_cdf)
    print(_dumps({k: diag[k] for k in ("alpha_hat", "z", "candidates", "sup_error")}))
    d = _out_dir(args)
    if d is not None:
        write_csv(d / "cdf.csv", rows)
        (d / "gl.json").write_text(_dumps(diag) + "\n")
        cfg = {"spec": spec.to_dict(), "z": args.z, "field": args.field, "n": args.n, "backend": args.backend}
        RunManifest("estimate", cfg, None if args.field else args.seed, started=started, finished=_now(),
                    outputs={"cdf": str(d / "cdf.csv"), "diagnostics": str(d / "gl.json")}).write(d)
    return 0


def cmd_study(args) -> int:
    started = _now()
    config = load_study(args.study)
    overrides = {k: v for k, v in (("seed", args.seed), ("backend", args.backend), ("z", args.z),
                                   ("gamma", args.gamma), ("budget", args.budget)) if v is not None}
    config = replace(config, **overrides)
    config.workers = default_workers() if args.workers is None else args.workers
    out = args.out_dir or config.out_dir
    if out is None:
        raise ConfigError("no output directory; pass --out-dir or set study.out_dir", field="study.out_dir")
    result = run_study(config)
    paths = write_result(result, out)
    echo = config.to_dict()
    echo.pop("workers")
    RunManifest("study", echo, config.seed, started=started, finished=_now(), outputs=paths,
                rejection_rate=result.rejection_rate).write(out)
    print(_dumps({"fits": result.fits, "rejection_rate": result.rejection_rate, "outputs": paths}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwtree", description="Biased walks on Galton-Watson trees: regimes, local times, estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("classify", help="regime, t0, kappa, exponents and rates of a spec")
    c.add_argument("--spec", required=True)
    c.add_argument("--gamma", type=float, default=2.0)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_classify)

    s = sub.add_parser("simulate", help="one local-time field")
    s.add_argument("--spec", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--backend", choices=(STEP, BRANCHING), default=BRANCHING)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="GL-selected estimate of the law of rho")
    e.add_argument("--spec", required=True)
    e.add_argument("--field", help="stored field CSV; no randomness is used")
    e.add_argument("--n", type=int)
    e.add_argument("--backend", choices=(STEP, BRANCHING), default=BRANCHING)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    e.add_argument("--z", type=float, default=3.0)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("study", help="replicated study from a config file")
    t.add_argument("--study", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--backend", choices=(STEP, BRANCHING))
    t.add_argument("--z", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--budget", type=int)
    t.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RwtreeError as exc:
        code = next((v for k, v in EXIT_CODES.items() if isinstance(exc, k)), 1)
        print(f"rwtree: error[{exc.tag}]: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
