"""Non-parametric estimation of the law of ``rho`` from one local-time field.

Moment estimators average combinatorial kernels over the edges leaving
heavily visited vertices; the CDF estimators ``F_hat^alpha`` are Bernstein
mixtures of them, and the level ``alpha`` is picked by the
Goldenshluger-Lepski rule.

Kernels are evaluated in exact integer arithmetic for small arguments and
through log-gamma otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import special, stats

from .env_model import EnvSpec, IncrementLaw
from .errors import EmptyCandidates
from .localtime import LocalTimeField, heavy_ranges

EXACT_LIMIT = 60
_CHUNK = 1 << 22


def _comb(n: int, k: int) -> int:
    # C(n, k) = 0 for 0 <= n < k
    return math.comb(n, k) if 0 <= k <= n else 0


def _lcomb(n, k):
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def phi(alpha: int, beta: int, i: int, j: int) -> float:
    """Kernel whose conditional mean given ``N_{x*} = i`` is ``rho^alpha (1-rho)^beta``."""
    if i < alpha + 1 or j < beta:
        return 0.0
    if i + j <= EXACT_LIMIT:
        return float(Fraction(_comb(i + j - alpha - 1 - beta, i - alpha - 1), _comb(i + j - 1, j)))
    return math.exp(_lcomb(i + j - alpha - 1 - beta, i - alpha - 1) - _lcomb(i + j - 1, j))


def phi_array(alpha: int, beta: int, i, j) -> np.ndarray:
    """Vectorized :func:`phi` (log-gamma path)."""
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    ok = (i >= alpha + 1) & (j >= beta)
    ii = np.where(ok, i, alpha + 1)
    jj = np.where(ok, j, beta)
    val = np.exp(_lcomb(ii + jj - alpha - 1 - beta, ii - alpha - 1) - _lcomb(ii + jj - 1, jj))
    return np.where(ok, val, 0.0)


def psi_l(alpha: int, l: int, i: int, j: int) -> float:
    """CDF kernel: ``1{i >= alpha} sum_{k<l} C(i-1,k) C(j,alpha-1-k) / C(i-1+j, alpha-1)``."""
    if not 0 <= l <= alpha:
        raise ValueError("need 0 <= l <= alpha")
    if i < alpha or l == 0:
        return 0.0
    if i + j <= EXACT_LIMIT:
        num = sum(_comb(i - 1, k) * _comb(j, alpha - 1 - k) for k in range(l))
        return float(Fraction(num, _comb(i - 1 + j, alpha - 1)))
    k = np.arange(l)
    ok = (k <= i - 1) & (alpha - 1 - k <= j)
    k = k[ok]
    if len(k) == 0:
        return 0.0
    terms = _lcomb(i - 1, k) + _lcomb(j, alpha - 1 - k) - _lcomb(i - 1 + j, alpha - 1)
    return float(np.exp(terms).sum())


def _kernel_mass(alpha: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """``sum_e C(i_e-1,k) C(j_e,alpha-1-k) / C(i_e-1+j_e, alpha-1)`` for ``k = 0..alpha-1``.

    Each row is a hypergeometric pmf in ``k``; all rows need ``i >= alpha``.
    """
    out = np.zeros(alpha)
    if len(i) == 0:
        return out
    lf = special.gammaln(np.arange(int((i + j).max()) + 2, dtype=np.float64) + 1)
    k = np.arange(alpha)
    rows = max(1, _CHUNK // alpha)
    for s in range(0, len(i), rows):
        ii = i[s:s + rows, None] - 1
        jj = j[s:s + rows, None]
        ok = (k <= ii) & (alpha - 1 - k <= jj)
        kk = np.where(ok, k, 0)
        mm = np.where(ok, alpha - 1 - k, 0)
        lt = (
            lf[ii] - lf[kk] - lf[np.where(ok, ii - kk, 0)]
            + lf[jj] - lf[mm] - lf[np.where(ok, jj - mm, 0)]
            - (lf[ii + jj] - lf[alpha - 1] - lf[ii + jj - alpha + 1])
        )
        pmf = np.exp(np.where(ok, lt, -np.inf))
        # rows sum to 1 exactly (Vandermonde); renormalize away log-space rounding
        out += (pmf / pmf.sum(axis=1, keepdims=True)).sum(axis=0)
    return out


# ---------------------------------------------------------------------------
# moments


@dataclass(frozen=True)
class MomentEstimate:
    alpha: int
    beta: int
    value: float
    support: int  # R_{alpha+1}


def estimate_moment(fld: LocalTimeField, alpha: int, beta: int, mean_nu: float) -> MomentEstimate:
    """Estimate ``E[rho^alpha (1-rho)^beta]``; 0 when no vertex has ``alpha + 1`` visits."""
    r = int(np.count_nonzero(fld.count >= alpha + 1))
    if r == 0:
        return MomentEstimate(alpha, beta, 0.0, 0)
    _, i, j = fld.edges()
    heavy = i >= alpha + 1
    total = float(phi_array(alpha, beta, i[heavy], j[heavy]).sum())
    return MomentEstimate(alpha, beta, total / (mean_nu * r), r)


def moment_oracle(spec: EnvSpec | IncrementLaw, alpha: int, beta: int) -> float:
    law = spec.increment if isinstance(spec, EnvSpec) else spec
    return law.rho_moment(alpha, beta)


# ---------------------------------------------------------------------------
# CDF estimators


@dataclass
class EmpiricalCdf:
    """Right-continuous step function on [0, 1] with ``F(u) = values[floor(alpha u)]``."""

    alpha: int
    values: np.ndarray
    support: int = 0  # R_alpha

    def __call__(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        idx = np.floor(self.alpha * u + 1e-12).astype(np.int64)
        return self.values[np.minimum(idx, self.alpha)]

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.alpha + 1) / self.alpha

    def sup_distance(self, other: EmpiricalCdf) -> float:
        """Exact sup norm of the difference of two step functions."""
        a, b = self.alpha, other.alpha
        la = np.arange(a + 1)
        lb = np.arange(b + 1)
        d1 = np.abs(self.values - other.values[(la * b) // a])
        d2 = np.abs(self.values[(lb * a) // b] - other.values)
        return float(max(d1.max(), d2.max()))

    def sup_error(self, cdf: Callable) -> float:
        """``sup_u |F_hat(u) - F(u)|`` for a non-decreasing right-continuous ``F``."""
        g = self.grid
        left = np.asarray(cdf(g), dtype=float)
        right = np.asarray(cdf(np.nextafter(g[1:], 0.0)), dtype=float)
        v = self.values
        return float(max(np.abs(v[:-1] - left[:-1]).max(), np.abs(v[:-1] - right).max(), abs(v[-1] - left[-1])))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "support": self.support, "values": self.values.tolist()}


def estimate_cdf(fld: LocalTimeField, alpha: int, mean_nu: float) -> EmpiricalCdf:
    """``F_hat^alpha`` on the grid ``l / alpha``, from edges below vertices with ``N >= alpha``."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    r = int(np.count_nonzero(fld.count >= alpha))
    if r == 0:
        return EmpiricalCdf(alpha, np.zeros(alpha + 1), 0)
    _, i, j = fld.edges()
    heavy = i >= alpha
    mass = _kernel_mass(alpha, i[heavy], j[heavy])
    values = np.concatenate(([0.0], np.cumsum(mass))) / (mean_nu * r)
    return EmpiricalCdf(alpha, values, r)


def f_alpha_from_moments(alpha: int, moments: Callable[[int, int], float]) -> EmpiricalCdf:
    """Bernstein approximation ``F^alpha(l/alpha) = sum_{k<l} C(alpha-1,k) m^{k,alpha-1-k}``."""
    terms = np.array([
        math.exp(_lcomb(alpha - 1, k) + math.log(m)) if (m := moments(k, alpha - 1 - k)) > 0 else 0.0
        for k in range(alpha)
    ])
    return EmpiricalCdf(alpha, np.concatenate(([0.0], np.cumsum(terms))))


def f_alpha(law: IncrementLaw, alpha: int) -> EmpiricalCdf:
    """Same grid values as :func:`f_alpha_from_moments`, for any ``alpha``.

    ``sum_{k<l} C(alpha-1,k) rho^k (1-rho)^(alpha-1-k)`` is a binomial CDF,
    so ``F^alpha`` is its mean over ``rho``: beta-binomial for ``BetaRho``.
    """
    ell = np.arange(alpha + 1)
    atoms = law.atoms()
    if atoms is None:
        vals = stats.betabinom.cdf(ell - 1, alpha - 1, law.a, law.c)
    else:
        vals = sum(p * stats.binom.cdf(ell - 1, alpha - 1, 1.0 / (1.0 + math.exp(-w))) for w, p in atoms)
    return EmpiricalCdf(alpha, np.asarray(vals, dtype=float))


def bias_bound(alpha: int, holder: float, gamma: float) -> float:
    """Grid bias bound ``||F||_gamma / (2^gamma (alpha+1)^(gamma/2))``."""
    return holder / (2**gamma * (alpha + 1) ** (gamma / 2))


def holder_norm(cdf: Callable, gamma: float, pdf: Callable | None = None, n_grid: int = 2001) -> float:
    """Numerical gamma-Holder norm of a CDF on [0, 1] (with ``pdf`` when ``gamma > 1``)."""
    u = np.linspace(0.0, 1.0, n_grid)
    f = np.asarray(pdf(u) if gamma > 1 else cdf(u), dtype=float)
    du = np.abs(u[:, None] - u[None, :])
    df = np.abs(f[:, None] - f[None, :])
    np.fill_diagonal(du, np.inf)
    seminorm = float((df / du ** (gamma - 1 if gamma > 1 else gamma)).max())
    return float(np.abs(f).max()) + seminorm if gamma > 1 else seminorm


# ---------------------------------------------------------------------------
# Goldenshluger-Lepski


@dataclass
class GlSelection:
    z: float
    candidates: list[int]
    B: dict[int, float]
    Delta: dict[int, float]
    alpha_hat: int
    cdf: EmpiricalCdf
    cdfs: dict[int, EmpiricalCdf] = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "z": self.z,
            "candidates": self.candidates,
            "B": {str(a): v for a, v in self.B.items()},
            "Delta": {str(a): v for a, v in self.Delta.items()},
            "alpha_hat": self.alpha_hat,
            "cdf": self.cdf.to_dict(),
        }


def default_candidates(fld: LocalTimeField) -> list[int]:
    top = int(fld.count.max())
    if top < 1:
        return []
    return [1 << p for p in range(int(math.floor(math.log2(top))) + 1)]


def variance_majorant(alpha: int, r: int, z: float, mean_nu: float, K: int) -> float:
    return K / mean_nu * math.sqrt((z + math.log(alpha) + 2 * math.log(r)) / (2 * r))


def gl_select(fld: LocalTimeField, z: float, mean_nu: float, K: int, candidates=None) -> GlSelection:
    """Pick ``alpha`` minimizing ``Delta(alpha) + B(alpha)``; ties go to the smallest."""
    if z <= 0:
        raise ValueError("z must be positive")
    cands = sorted(set(int(a) for a in (default_candidates(fld) if candidates is None else candidates)))
    rs = heavy_ranges(fld, cands) if cands else np.array([], dtype=np.int64)
    cands = [a for a, r in zip(cands, rs) if a >= 1 and r >= 1]
    if not cands:
        raise EmptyCandidates("no candidate level has a visited vertex")
    R = dict(zip(cands, (int(r) for r in heavy_ranges(fld, cands))))
    B = {a: variance_majorant(a, R[a], z, mean_nu, K) for a in cands}
    cdfs = {a: estimate_cdf(fld, a, mean_nu) for a in cands}
    Delta = {}
    for a in cands:
        terms = [
            (cdfs[b].sup_distance(cdfs[a]) if b > a else 0.0) - B[b]
            for b in cands
        ]
        Delta[a] = max(terms)
    best = min(cands, key=lambda a: (Delta[a] + B[a], a))
    return GlSelection(z, cands, B, Delta, best, cdfs[best], cdfs)
