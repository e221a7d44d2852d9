"""Regime, critical exponents and rates for the calibrated example environments."""

import math

from rwtree.env_model import BetaRho, Clock, Deterministic, EnvSpec, TwoPoint, classify, rate, xi, xi_tilde

SPECS = {
    "Deterministic(2 log 2)": EnvSpec.binary(Deterministic(2 * math.log(2))),
    "BetaRho(3, 1)": EnvSpec.binary(BetaRho(3.0, 1.0)),
    "BetaRho(4, 1.5)": EnvSpec.binary(BetaRho(4.0, 1.5)),
    "BetaRho(5, 2)": EnvSpec.binary(BetaRho(5.0, 2.0)),
    "BetaRho(7, 3)": EnvSpec.binary(BetaRho(7.0, 3.0)),
    "TwoPoint(log 3, -log 2, 0.9)": EnvSpec.binary(TwoPoint(math.log(3), -math.log(2), 0.9)),
}
THETAS = (0.0, 0.25, 0.5)


def main():
    head = f"{'environment':30} {'regime':28} {'t0':>6} {'kappa':>6} " + " ".join(
        f"{'xi(' + str(t) + ')':>9}" for t in THETAS) + " " + " ".join(
        f"{'xi~(' + str(t) + ')':>9}" for t in THETAS) + f" {'rate':>6} {'rate_T':>6}"
    print(head)
    for name, spec in SPECS.items():
        r = classify(spec)
        kappa = "-" if r.kappa is None else f"{float(r.kappa):.3g}"
        t0 = "-" if r.t0 is None else f"{r.t0:.3g}"
        row = f"{name:30} {r.regime.value:28} {t0:>6} {kappa:>6} "
        row += " ".join(f"{xi(r, t):9.3f}" for t in THETAS) + " "
        row += " ".join(f"{xi_tilde(r, t):9.3f}" for t in THETAS)
        row += f" {rate(r, 2.0):6.3f} {rate(r, 2.0, Clock.RETURN_TIME):6.3f}"
        print(row)


if __name__ == "__main__":
    main()
