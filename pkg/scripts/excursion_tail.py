"""Tail of a single excursion's length, P(T > t), from the branching sampler.

In the fast regime with kappa > 2 the tail should decay like t^(-1/2);
for 1 < kappa < 2 like t^(-1/kappa).  Excursions longer than ``--cap``
crossings are censored (counted as exceeding every threshold).

    python scripts/excursion_tail.py --a 7 --c 3 --samples 100000
"""

import argparse

import numpy as np

from rwtree.env_model import BetaRho, EnvSpec
from rwtree.localtime import sample_summary


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--a", type=float, default=7.0)
    p.add_argument("--c", type=float, default=3.0)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--cap", type=float, default=2e6)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    spec = EnvSpec.binary(BetaRho(args.a, args.c))
    rng = np.random.default_rng(args.seed)
    lengths = np.empty(args.samples)
    for i in range(args.samples):
        s = sample_summary(spec, args.seed * args.samples + i, 1, rng, max_total=int(args.cap))
        lengths[i] = np.inf if s.censored else 2 * s.total
    thresholds = 10.0 ** np.arange(1, int(np.log10(args.cap)) + 1)
    survival = np.array([np.mean(lengths > t) for t in thresholds])
    print(f"{'t':>10} {'P(T>t)':>10} {'local slope':>12}")
    for k, (t, s) in enumerate(zip(thresholds, survival)):
        slope = "" if k == 0 else f"{np.log(s / survival[k - 1]) / np.log(t / thresholds[k - 1]):12.3f}"
        print(f"{t:10.0f} {s:10.5f} {slope}")


if __name__ == "__main__":
    main()
