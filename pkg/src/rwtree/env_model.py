"""Environment families, the log-Laplace transform and regime analysis.

An environment is described by an offspring law for the Galton-Watson tree
and a law for the increments ``omega`` of the branching potential.  Children
of a vertex receive i.i.d. increments.  Everything here is analytic: the
log-Laplace transform ``psi``, its zeros ``t0`` and ``kappa``, the recurrence
regime, the heavy-range exponents and the estimation rates.

New increment laws plug in by subclassing :class:`IncrementLaw`.
"""

from __future__ import annotations

import enum
import functools
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special, stats

from .errors import CalibrationError, DomainError, NoRoot

ZERO_TOL = 1e-9  # |inf psi| below this counts as inf psi = 0
SLOPE_TOL = 1e-8  # |psi'(1)| below this counts as psi'(1) = 0
ROOT_TOL = 1e-10
S_CAP = 64.0
EDGE_GAP = 1e-6
FORMULA_LIMIT_NOTE = "kappa is infinite: exponents at theta = 0 are limits of the finite-kappa formulas"


@functools.total_ordering
class _Infinite:
    """Sentinel for an infinite ``kappa``; compares above every real."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFINITE"

    def __eq__(self, other):
        return other is self

    def __lt__(self, other):
        return False

    def __hash__(self):
        return hash("INFINITE")

    def __reduce__(self):
        return (_Infinite, ())


INFINITE = _Infinite()


def is_infinite(x) -> bool:
    return x is INFINITE


# ---------------------------------------------------------------------------
# increment laws


class IncrementLaw(ABC):
    """Law of the potential increment ``omega`` of a single child.

    ``rho = 1 / (1 + exp(-omega))`` is the quantity the estimator targets.
    """

    kind: str

    @property
    def domain(self) -> tuple[float, float]:
        """Open interval of ``s`` on which ``E[exp(-s omega)]`` is finite."""
        return (-math.inf, math.inf)

    @abstractmethod
    def log_laplace(self, s: float) -> float:
        """``log E[exp(-s omega)]``."""

    @abstractmethod
    def dlog_laplace(self, s: float) -> float:
        """Derivative of :meth:`log_laplace` in ``s``."""

    @abstractmethod
    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms on (0, 1) to increments (inverse CDF)."""

    @abstractmethod
    def rho_moment(self, alpha: int, beta: int) -> float:
        """``E[rho**alpha * (1 - rho)**beta]``."""

    @abstractmethod
    def rho_cdf(self, u):
        """CDF of ``rho`` evaluated at ``u``."""

    @abstractmethod
    def tilted(self, t: float) -> IncrementLaw:
        """Law of ``omega`` reweighted by ``exp(-t omega)``."""

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.from_uniform(rng.random(size))

    def atoms(self) -> list[tuple[float, float]] | None:
        """(value, probability) pairs for discrete laws, else ``None``."""
        return None

    def params(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind
        return d


@dataclass(frozen=True)
class BetaRho(IncrementLaw):
    """``rho ~ Beta(a, c)`` and ``omega = log(rho / (1 - rho))``."""

    a: float
    c: float
    kind = "beta_rho"

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0):
            raise DomainError(f"Beta shapes must be positive, got a={self.a}, c={self.c}")

    @property
    def domain(self):
        return (-self.c, self.a)

    def _check(self, s):
        lo, hi = self.domain
        if not lo < s < hi:
            raise DomainError(f"s={s} outside ({lo}, {hi}) for {self}")

    def log_laplace(self, s):
        self._check(s)
        # E[((1-rho)/rho)**s] = B(a-s, c+s) / B(a, c), kept in log-gamma form
        a, c = self.a, self.c
        return float(
            special.gammaln(a - s) + special.gammaln(c + s)
            - special.gammaln(a) - special.gammaln(c)
        )

    def dlog_laplace(self, s):
        self._check(s)
        return float(special.digamma(self.c + s) - special.digamma(self.a - s))

    def from_uniform(self, u):
        r = special.betaincinv(self.a, self.c, u)
        # clip keeps omega finite when the quantile rounds to 0 or 1
        r = np.clip(r, 1e-300, 1.0 - 1e-16)
        return np.log(r) - np.log1p(-r)

    def sample(self, rng, size):
        r = rng.beta(self.a, self.c, size)
        r = np.clip(r, 1e-300, 1.0 - 1e-16)
        return np.log(r) - np.log1p(-r)

    def rho_moment(self, alpha, beta):
        return float(np.exp(special.betaln(self.a + alpha, self.c + beta) - special.betaln(self.a, self.c)))

    def rho_cdf(self, u):
        return stats.beta.cdf(u, self.a, self.c)

    def tilted(self, t):
        self._check(t)
        return BetaRho(self.a - t, self.c + t)


@dataclass(frozen=True)
class TwoPoint(IncrementLaw):
    """``omega = omega_hi`` with probability ``p_hi``, else ``omega_lo``."""

    omega_hi: float
    omega_lo: float
    p_hi: float
    kind = "two_point"

    def __post_init__(self):
        if not 0.0 <= self.p_hi <= 1.0:
            raise DomainError(f"p_hi must be a probability, got {self.p_hi}")

    def _weights(self, s):
        terms = []
        for p, w in ((self.p_hi, self.omega_hi), (1.0 - self.p_hi, self.omega_lo)):
            if p > 0:
                terms.append((math.log(p) - s * w, w))
        return terms

    def log_laplace(self, s):
        logs = [t for t, _ in self._weights(s)]
        return float(special.logsumexp(logs))

    def dlog_laplace(self, s):
        terms = self._weights(s)
        lse = special.logsumexp([t for t, _ in terms])
        return float(-sum(math.exp(t - lse) * w for t, w in terms))

    def from_uniform(self, u):
        u = np.asarray(u)
        return np.where(u < self.p_hi, self.omega_hi, self.omega_lo)

    def rho_moment(self, alpha, beta):
        total = 0.0
        for w, p in self.atoms():
            r = 1.0 / (1.0 + math.exp(-w))
            total += p * r**alpha * (1.0 - r) ** beta
        return total

    def rho_cdf(self, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for w, p in self.atoms():
            out = out + p * (u >= 1.0 / (1.0 + math.exp(-w)))
        return out

    def tilted(self, t):
        z = math.exp(self.log_laplace(t))
        p = self.p_hi * math.exp(-t * self.omega_hi) / z if self.p_hi > 0 else 0.0
        return TwoPoint(self.omega_hi, self.omega_lo, p)

    def atoms(self):
        out = []
        if self.p_hi > 0:
            out.append((self.omega_hi, self.p_hi))
        if self.p_hi < 1:
            out.append((self.omega_lo, 1.0 - self.p_hi))
        return out


@dataclass(frozen=True)
class Deterministic(IncrementLaw):
    omega: float
    kind = "deterministic"

    def log_laplace(self, s):
        return -s * self.omega

    def dlog_laplace(self, s):
        return -self.omega

    def from_uniform(self, u):
        return np.full(np.shape(u), float(self.omega))

    def rho_moment(self, alpha, beta):
        r = 1.0 / (1.0 + math.exp(-self.omega))
        return r**alpha * (1.0 - r) ** beta

    def rho_cdf(self, u):
        r = 1.0 / (1.0 + math.exp(-self.omega))
        return (np.asarray(u, dtype=float) >= r).astype(float)

    def tilted(self, t):
        return self

    def atoms(self):
        return [(self.omega, 1.0)]


FAMILIES = {cls.kind: cls for cls in (BetaRho, TwoPoint, Deterministic)}


# ---------------------------------------------------------------------------
# offspring law and full spec


@dataclass(frozen=True)
class Offspring:
    """Probability vector over ``{0, ..., K}``."""

    probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or len(p) == 0 or np.any(p < 0):
            raise DomainError(f"invalid offspring probabilities {self.probs}")
        if abs(p.sum() - 1.0) > 1e-12:
            raise DomainError(f"offspring probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", tuple(float(x) for x in p))

    @classmethod
    def constant(cls, k: int) -> Offspring:
        return cls(tuple(1.0 if i == k else 0.0 for i in range(k + 1)))

    @property
    def mean(self) -> float:
        return float(sum(i * p for i, p in enumerate(self.probs)))

    @property
    def max_children(self) -> int:
        """``K``: the largest count with positive probability."""
        return max(i for i, p in enumerate(self.probs) if p > 0)

    @property
    def can_die(self) -> bool:
        return self.probs[0] > 0

    @functools.cached_property
    def _cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    def from_uniform(self, u):
        return np.searchsorted(self._cdf, u, side="right").astype(np.int64)

    def sample(self, rng, size):
        return self.from_uniform(rng.random(size))


@dataclass(frozen=True)
class EnvSpec:
    offspring: Offspring
    increment: IncrementLaw
    iid_children: bool = True

    def __post_init__(self):
        if not self.offspring.mean > 1.0:
            raise DomainError(f"tree must be supercritical, E[nu]={self.offspring.mean}")
        if isinstance(self.increment, BetaRho) and not self.increment.a > 1.0:
            raise DomainError(f"BetaRho needs a > 1 for psi(1) to be finite, got a={self.increment.a}")

    @classmethod
    def binary(cls, increment: IncrementLaw) -> EnvSpec:
        """Every vertex has exactly two children."""
        return cls(Offspring.constant(2), increment)

    @property
    def mean_nu(self) -> float:
        return self.offspring.mean

    @property
    def K(self) -> int:
        return self.offspring.max_children

    @property
    def s_max(self) -> float:
        hi = self.increment.domain[1]
        return hi - EDGE_GAP if math.isfinite(hi) else S_CAP

    def to_dict(self) -> dict:
        return {
            "offspring": list(self.offspring.probs),
            "increment": self.increment.params(),
            "iid_children": self.iid_children,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EnvSpec:
        inc = dict(d["increment"])
        kind = inc.pop("kind")
        return cls(Offspring(tuple(d["offspring"])), FAMILIES[kind](**inc), d.get("iid_children", True))


def psi(spec: EnvSpec, s: float) -> float:
    """Log-Laplace transform ``log E[sum_{|z|=1} exp(-s V(z))]``."""
    return math.log(spec.mean_nu) + spec.increment.log_laplace(s)


def psi_prime(spec: EnvSpec, s: float) -> float:
    return spec.increment.dlog_laplace(s)


# ---------------------------------------------------------------------------
# roots and regimes


class Regime(str, enum.Enum):
    POSITIVE_RECURRENT_VERY_SLOW = "PositiveRecurrentVerySlow"
    POSITIVE_RECURRENT_SLOW = "PositiveRecurrentSlow"
    NULL_RECURRENT_SLOW = "NullRecurrentSlow"
    NULL_RECURRENT_FAST = "NullRecurrentFast"
    TRANSIENT = "Transient"

    @property
    def recurrent(self) -> bool:
        return self is not Regime.TRANSIENT

    @property
    def slow(self) -> bool:
        return self in (
            Regime.POSITIVE_RECURRENT_VERY_SLOW,
            Regime.POSITIVE_RECURRENT_SLOW,
            Regime.NULL_RECURRENT_SLOW,
        )


def _bisect(f, lo, hi, flo=None, tol=ROOT_TOL, max_iter=400):
    # assumes sign(f(lo)) != sign(f(hi))
    flo = f(lo) if flo is None else flo
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= tol * 1e-2 or hi - lo < 1e-15:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return mid


def inf_psi_unit(spec: EnvSpec) -> tuple[float, float]:
    """Minimum of ``psi`` over [0, 1] and where it is attained (psi is convex)."""
    if psi_prime(spec, 1.0) <= 0:
        return psi(spec, 1.0), 1.0
    if psi_prime(spec, 0.0) >= 0:
        return psi(spec, 0.0), 0.0
    s = _bisect(lambda x: psi_prime(spec, x), 0.0, 1.0, tol=1e-13)
    return psi(spec, s), s


def find_t0(spec: EnvSpec) -> float:
    """First zero of ``psi`` on ``[0, inf)``."""
    low, argmin = inf_psi_unit(spec)
    if low > ZERO_TOL:
        raise NoRoot(f"psi > 0 on [0, 1] (inf={low:.3g}): transient environment")
    if low >= -ZERO_TOL:
        return argmin
    # psi(0) = log E[nu] > 0 and psi(argmin) < 0
    return _bisect(lambda s: psi(spec, s), 0.0, argmin)


def find_kappa(spec: EnvSpec):
    """First zero of ``psi`` after 1, or :data:`INFINITE` when there is none."""
    if psi_prime(spec, 1.0) >= -SLOPE_TOL:
        raise DomainError("kappa is only defined when psi'(1) < 0")
    f = functools.partial(psi, spec)
    s_max = spec.s_max
    step = 1e-6
    lo = 1.0 + step
    if f(lo) >= 0:
        raise DomainError(f"psi(1) = {f(1.0):.3g} is not zero; kappa undefined")
    while True:
        hi = min(1.0 + 2 * step, s_max)
        if f(hi) > 0:
            return _bisect(f, lo, hi)
        if hi >= s_max:
            return INFINITE
        lo, step = hi, 2 * step


@dataclass(frozen=True)
class RegimeReport:
    inf_psi_01: float
    psi_prime_1: float
    t0: float | None
    kappa: object  # float, INFINITE, or None outside the fast regime
    regime: Regime
    notes: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        kappa = "inf" if is_infinite(self.kappa) else self.kappa
        return {
            "inf_psi_01": self.inf_psi_01,
            "psi_prime_1": self.psi_prime_1,
            "t0": self.t0,
            "kappa": kappa,
            "regime": self.regime.value,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RegimeReport:
        kappa = INFINITE if d["kappa"] == "inf" else d["kappa"]
        return cls(d["inf_psi_01"], d["psi_prime_1"], d["t0"], kappa, Regime(d["regime"]), tuple(d.get("notes", ())))


def classify(spec: EnvSpec) -> RegimeReport:
    low, argmin = inf_psi_unit(spec)
    slope = psi_prime(spec, 1.0)
    if low > ZERO_TOL:
        return RegimeReport(low, slope, None, None, Regime.TRANSIENT)
    if low < -ZERO_TOL:
        return RegimeReport(low, slope, find_t0(spec), None, Regime.POSITIVE_RECURRENT_VERY_SLOW)
    if slope > SLOPE_TOL:
        regime = Regime.POSITIVE_RECURRENT_SLOW
    elif slope >= -SLOPE_TOL:
        regime = Regime.NULL_RECURRENT_SLOW
    else:
        kappa = find_kappa(spec)
        notes = (FORMULA_LIMIT_NOTE,) if is_infinite(kappa) else ()
        return RegimeReport(low, slope, argmin, kappa, Regime.NULL_RECURRENT_FAST, notes)
    return RegimeReport(low, slope, argmin, None, regime)


# ---------------------------------------------------------------------------
# exponents and rates


def _require_recurrent(report):
    if not report.regime.recurrent:
        raise DomainError("exponents are only defined for recurrent regimes")


def xi(report: RegimeReport, theta: float) -> float:
    """Limit of ``log+ R_{n^theta} / log n`` at the n-th return time.

    For ``kappa`` infinite the diffusive formula is read as its limit:
    2 at ``theta = 0`` and ``1 - theta`` for ``theta > 0``.
    """
    _require_recurrent(report)
    if theta < 0:
        raise DomainError("theta must be non-negative")
    if theta >= 1:
        return 0.0
    if report.regime.slow:
        return report.t0 * (1.0 - theta)
    k = report.kappa
    if is_infinite(k):
        return 2.0 if theta == 0 else 1.0 - theta
    if k <= 2:
        return k * (1.0 - theta)
    return max(2.0 - k * theta, 1.0 - theta)


def xi_tilde(report: RegimeReport, theta: float) -> float:
    """Limit of ``log+ R^n_{n^theta} / log n`` at deterministic time ``n``."""
    _require_recurrent(report)
    if not 0 <= theta <= 1:
        raise DomainError("theta must lie in [0, 1]")
    if report.regime.slow:
        return report.t0 * (1.0 - theta)
    k = report.kappa
    if not is_infinite(k) and k <= 2:
        return 1.0 - k * theta if theta <= 1.0 / k else 0.0
    if theta > 0.5:
        return 0.0
    if is_infinite(k):
        return 1.0 if theta == 0 else 0.5 - theta
    return max(1.0 - k * theta, 0.5 - theta)


class Clock(str, enum.Enum):
    EXCURSION_COUNT = "excursions"
    RETURN_TIME = "return_time"


def rate(report: RegimeReport, gamma: float, clock: Clock = Clock.EXCURSION_COUNT) -> float:
    """Polynomial rate of the adaptive CDF estimator for a gamma-Holder CDF."""
    _require_recurrent(report)
    if not 0 < gamma <= 2:
        raise DomainError("gamma must lie in (0, 2]")
    clock = Clock(clock)
    if report.regime.slow:
        t0 = report.t0
        return gamma * t0 / (gamma + t0)
    k = report.kappa
    inf = is_infinite(k)
    if clock is Clock.EXCURSION_COUNT:
        if not inf and k <= 2:
            return gamma * k / (gamma + k)
        if not inf and k <= 2 + gamma:
            return 2 * gamma / (gamma + k)
        return gamma / (gamma + 1)
    if not inf and k <= 2 + gamma:
        return gamma / (gamma + k)
    return gamma / (2 * (gamma + 1))


# ---------------------------------------------------------------------------
# calibration

_FREE = {"beta_rho": ("a", "c"), "deterministic": ("omega",), "two_point": ("omega_hi", "omega_lo", "p_hi")}
_TARGETS = ("psi1_zero", "psi_prime1", "kappa", "t0")


def _with(spec, values):
    params = spec.increment.params()
    kind = params.pop("kind")
    params.update({k: float(v) for k, v in values.items()})
    return EnvSpec(spec.offspring, FAMILIES[kind](**params), spec.iid_children)


def _residuals(spec, targets):
    out = []
    if targets.get("psi1_zero"):
        out.append(psi(spec, 1.0))
    if "psi_prime1" in targets:
        out.append(psi_prime(spec, 1.0) - targets["psi_prime1"])
    if "kappa" in targets:
        out.append(psi(spec, targets["kappa"]))
    if "t0" in targets:
        out.append(psi(spec, targets["t0"]))
    return out


def _verify(spec, targets):
    res = _residuals(spec, targets)
    if max(abs(r) for r in res) > ROOT_TOL:
        raise CalibrationError(f"residuals {res} above tolerance")
    report = classify(spec)
    if "kappa" in targets and (report.kappa is None or is_infinite(report.kappa) or abs(report.kappa - targets["kappa"]) > 1e-7):
        raise CalibrationError(f"calibrated kappa {report.kappa} misses target {targets['kappa']}")
    if "t0" in targets and abs(report.t0 - targets["t0"]) > 1e-7:
        raise CalibrationError(f"calibrated t0 {report.t0} misses target {targets['t0']}")
    return spec


def _beta_on_psi1_line(template, targets):
    # psi(1) = 0  <=>  E[nu] * c / (a - 1) = 1, so a = 1 + E[nu] c exactly
    m = template.mean_nu

    def spec_of(c):
        return _with(template, {"a": 1.0 + m * c, "c": c})

    if "psi_prime1" in targets:
        g = lambda c: psi_prime(spec_of(c), 1.0) - targets["psi_prime1"]
    else:
        k = targets["kappa"]
        g = lambda c: psi(spec_of(c), k)
    grid = np.geomspace(1e-3, 1e3, 241)
    vals = []
    for c in grid:
        try:
            vals.append(g(c))
        except DomainError:
            vals.append(np.nan)
    for (c0, v0), (c1, v1) in zip(zip(grid, vals), zip(grid[1:], vals[1:])):
        if np.isfinite(v0) and np.isfinite(v1) and v0 * v1 <= 0:
            c = optimize.brentq(g, c0, c1, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            return spec_of(c)
    raise CalibrationError(f"no BetaRho on the psi(1)=0 line meets {targets}")


def calibrate(template: EnvSpec, targets: dict, free: tuple[str, ...] | None = None) -> EnvSpec:
    """Adjust the increment parameters of ``template`` to hit regime targets.

    ``targets`` may contain ``psi1_zero`` (bool), ``psi_prime1``, ``kappa``
    and ``t0``.  The offspring law is kept.  ``free`` names the parameters
    to move; by default the first ones of the family, one per equation.
    """
    unknown = set(targets) - set(_TARGETS)
    if unknown:
        raise CalibrationError(f"unknown calibration targets {sorted(unknown)}")
    n_eq = len(_residuals_template(targets))
    if n_eq == 0:
        raise CalibrationError("no calibration target given")
    kind = template.increment.kind
    if (
        kind == "beta_rho"
        and free is None
        and targets.get("psi1_zero")
        and n_eq == 2
        and ("kappa" in targets or "psi_prime1" in targets)
    ):
        return _verify(_beta_on_psi1_line(template, targets), targets)

    names = free or _FREE[kind][:n_eq]
    if len(names) != n_eq:
        raise CalibrationError(f"{n_eq} equations but {len(names)} free parameters")
    x0 = np.array([template.increment.params()[k] for k in names], dtype=float)

    def fun(x):
        try:
            return _residuals(_with(template, dict(zip(names, x))), targets)
        except DomainError:
            return [1e6] * n_eq

    sol = optimize.root(fun, x0, method="hybr", options={"xtol": 1e-14})
    return _verify(_with(template, dict(zip(names, sol.x))), targets)


def _residuals_template(targets):
    return [k for k in _TARGETS if k in targets and (k != "psi1_zero" or targets[k])]
