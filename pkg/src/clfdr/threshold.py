"""Two-group normal-approximation analytics for conditional vs marginal lFDR.

Given the row total ``n``, an alternative Z-score is approximately
``N(mu(n, gamma1), sigma(gamma1)^2)`` while a null one is ``N(0, 1)``. This
module compares the conditional lFDR ``clFDR(z, n)`` with the marginal
``lFDR(z)`` obtained by averaging the alternative over a row-total
distribution, and characterizes the rejection regions of each.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, ndtr

from .data import WHEAT_BIOMASS, Covariate
from .loglinear import conditional_mean, conditional_sd

_LOG_2PI = math.log(2.0 * math.pi)
DEGENERATE_SIGMA2 = 1e-12


def _log_phi(z, mu, sigma):
    return -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * ((np.asarray(z, dtype=float) - mu) / sigma) ** 2


class SizePMF:
    """Finite distribution of row totals ``n``."""

    def __init__(self, ns, probs):
        ns = np.asarray(ns, dtype=np.int64).ravel()
        probs = np.asarray(probs, dtype=float).ravel()
        if ns.size == 0 or ns.size != probs.size:
            raise ValueError("need one probability per row total")
        if np.any(ns < 1):
            raise ValueError("row totals must be >= 1")
        if np.unique(ns).size != ns.size:
            raise ValueError("row totals must be distinct")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise ValueError(f"probabilities must sum to 1, got {probs.sum()!r}")
        order = np.argsort(ns)
        self.ns = ns[order]
        self.probs = probs[order]
        self.ns.setflags(write=False)
        self.probs.setflags(write=False)

    @classmethod
    def point(cls, n: int) -> "SizePMF":
        return cls([n], [1.0])

    @classmethod
    def from_counts(cls, totals) -> "SizePMF":
        """Empirical distribution of observed positive row totals."""
        t = np.asarray(totals, dtype=np.int64)
        t = t[t > 0]
        ns, c = np.unique(t, return_counts=True)
        return cls(ns, c / c.sum())

    @classmethod
    def read_csv(cls, path) -> "SizePMF":
        """Two-column CSV ``n,prob`` with an optional header line."""
        import csv

        ns, ps = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row or not "".join(row).strip():
                    continue
                if len(row) != 2:
                    raise ValueError(f"line {i + 1}: expected 'n,prob'")
                try:
                    ns.append(int(row[0]))
                    ps.append(float(row[1]))
                except ValueError:
                    if i == 0:
                        continue
                    raise ValueError(f"line {i + 1}: malformed entry {row!r}") from None
        return cls(ns, ps)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.ns, size=size, p=self.probs)

    def to_list(self) -> list[tuple[int, float]]:
        return [(int(n), float(p)) for n, p in zip(self.ns, self.probs)]

    def __eq__(self, other):
        if not isinstance(other, SizePMF):
            return NotImplemented
        return np.array_equal(self.ns, other.ns) and np.array_equal(self.probs, other.probs)


def default_size_pmf(n_max: int = 911, log_mean: float = 2.1207, log_sd: float = 1.0022) -> SizePMF:
    """Synthetic stand-in for the row-total distribution of the wheat data.

    A log-normal discretized onto ``1..n_max``; the defaults put 59% of the
    mass on ``n <= 10`` and about 3.5% above 51.
    """
    n = np.arange(1, n_max + 1)
    upper = ndtr((np.log(n + 0.5) - log_mean) / log_sd)
    lower = ndtr((np.log(n - 0.5) - log_mean) / log_sd)
    w = upper - lower
    return SizePMF(n, w / w.sum())


@dataclass
class TwoGroupModel:
    pi0: float
    gamma1: float
    covariate: Covariate = field(default_factory=lambda: Covariate(WHEAT_BIOMASS))
    size_pmf: SizePMF = field(default_factory=default_size_pmf)

    def __post_init__(self):
        if not 0.0 < self.pi0 < 1.0:
            raise ValueError(f"pi0 must lie in (0, 1), got {self.pi0!r}")
        if not (math.isfinite(self.gamma1) and self.gamma1 > 0):
            raise ValueError(f"the two-group model needs gamma1 > 0, got {self.gamma1!r}")
        if not isinstance(self.covariate, Covariate):
            self.covariate = Covariate(self.covariate)
        if not isinstance(self.size_pmf, SizePMF):
            ns, ps = zip(*self.size_pmf)
            self.size_pmf = SizePMF(ns, ps)
        self.mu1 = float(conditional_mean(1, self.gamma1, self.covariate))
        self.sigma = conditional_sd(self.gamma1, self.covariate)

    @property
    def sigma2(self) -> float:
        return self.sigma**2

    def mu(self, n):
        """Mean of an alternative Z-score at row total ``n``."""
        return np.sqrt(n) * self.mu1

    def k(self, lam: float) -> float:
        return self.pi0 * (1.0 - lam) / ((1.0 - self.pi0) * lam)


def _null_share(log_null, log_alt):
    """``exp(a) / (exp(a) + exp(b))`` without overflow."""
    return np.exp(log_null - np.logaddexp(log_null, log_alt))


def clfdr_zn(z, n: int, model: TwoGroupModel):
    """Conditional lFDR of Z-score ``z`` at row total ``n``."""
    scalar = np.ndim(z) == 0
    a = math.log(model.pi0) + _log_phi(z, 0.0, 1.0)
    b = math.log(1.0 - model.pi0) + _log_phi(z, model.mu(n), model.sigma)
    out = _null_share(a, b)
    return float(out) if scalar else out


def lfdr_z(z, model: TwoGroupModel):
    """Marginal lFDR of ``z``: the alternative is averaged over the row-total pmf."""
    scalar = np.ndim(z) == 0
    zz = np.atleast_1d(np.asarray(z, dtype=float))
    pmf = model.size_pmf
    keep = pmf.probs > 0
    mus = model.mu(pmf.ns[keep])
    la = _log_phi(zz[:, None], mus[None, :], model.sigma) + np.log(pmf.probs[keep])[None, :]
    a = math.log(model.pi0) + _log_phi(zz, 0.0, 1.0)
    b = math.log(1.0 - model.pi0) + logsumexp(la, axis=1)
    out = _null_share(a, b)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class RejectionBoundary:
    n: int
    a: float
    b: float
    exists: bool


def boundary_roots(mu: float, sigma2: float, k: float) -> tuple[float, float, bool]:
    """Endpoints of ``{z : clFDR(z) <= lambda}`` for given alternative moments.

    ``k = pi0 (1 - lambda) / ((1 - pi0) lambda)``. Solves
    ``z^2 (sigma2 - 1) + 2 z mu - 2 sigma2 log(sigma k) - mu^2 = 0``. When
    ``sigma2 == 1`` the equation is linear and the region is ``[a, inf)``.
    Returns ``(a, b, exists)``; ``exists`` is False when the region is empty.
    """
    sigma = math.sqrt(sigma2)
    if abs(sigma2 - 1.0) <= DEGENERATE_SIGMA2:
        if mu > 0:
            return (mu * mu + 2.0 * math.log(k)) / (2.0 * mu), math.inf, True
        if mu < 0:
            return -math.inf, (mu * mu + 2.0 * math.log(k)) / (2.0 * mu), True
        # identical densities: clFDR is constant at pi0
        exists = k <= 1.0
        return (-math.inf, math.inf, True) if exists else (math.nan, math.nan, False)
    c = 1.0 - sigma2
    disc = mu * mu * sigma2 - 2.0 * c * sigma2 * math.log(sigma * k)
    if disc < 0:
        # no crossing: empty region when sigma2 < 1, the whole line when sigma2 > 1
        return (math.nan, math.nan, False) if c > 0 else (-math.inf, math.inf, True)
    r = math.sqrt(disc)
    if c > 0:
        # stable pairing: one root from the quadratic formula, the other from the product
        big = (mu + math.copysign(r, mu)) / c if mu != 0 else r / c
        prod = (mu * mu + 2.0 * sigma2 * math.log(sigma * k)) / c
        small = prod / big if big != 0 else -r / c
        return min(small, big), max(small, big), True
    # sigma2 > 1: clFDR <= lambda outside the roots; report the roots anyway
    lo, hi = sorted(((mu - r) / c, (mu + r) / c))
    return lo, hi, True


def rejection_boundary(n: int, model: TwoGroupModel, lam: float) -> RejectionBoundary:
    """Closed-form ``a(n) <= b(n)`` with ``{z : clFDR(z, n) <= lam} = [a(n), b(n)]``."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam!r}")
    a, b, exists = boundary_roots(float(model.mu(n)), model.sigma2, model.k(lam))
    return RejectionBoundary(int(n), a, b, exists)


def stationary_point(n: int, model: TwoGroupModel) -> float:
    """Minimizer of ``clFDR(., n)``: ``mu(n) / (1 - sigma^2)``."""
    return float(model.mu(n)) / (1.0 - model.sigma2)


def clfdr_derivative(z, n: int, model: TwoGroupModel):
    """Analytic ``d clFDR(z, n) / dz``."""
    mu = model.mu(n)
    s2 = model.sigma2
    c = clfdr_zn(z, n, model)
    # pi0 pi1 phi0 phi1 / f^2 == c (1 - c)
    return c * (1.0 - c) * (np.asarray(z) * (1.0 - s2) - mu) / s2


def clfdr_derivative_sign(z: float, n: int, model: TwoGroupModel) -> int:
    """Sign of ``d clFDR / dz``: -1 below the stationary point, +1 above, 0 at it."""
    mu = float(model.mu(n))
    lin = z * (1.0 - model.sigma2) - mu
    if abs(lin) <= 1e-12 * max(1.0, abs(mu)):
        return 0
    return 1 if lin > 0 else -1


def theorem2_min_n(model: TwoGroupModel, lam: float, n_max: int = 10_000) -> int | None:
    """Smallest ``n <= n_max`` from which the clFDR cut-off ``a(n)`` increases.

    The condition is ``mu(n, gamma1)^2 > 2 log(sigma(gamma1) * k)``; because
    ``mu(n)^2`` grows with ``n`` the set of qualifying ``n`` is ``[n*, inf)``.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    rhs = 2.0 * math.log(model.sigma * model.k(lam))
    ns = np.arange(1, n_max + 1)
    ok = model.mu(ns) ** 2 > rhs
    if not ok.any():
        return None
    first = int(np.argmax(ok))
    if not ok[first:].all():
        raise AssertionError("increasing-threshold condition is not an up-set")
    return int(ns[first])


def power_at_threshold(threshold: float, n: int, model: TwoGroupModel) -> float:
    """``P(Z >= threshold)`` for an alternative Z-score at row total ``n``."""
    return float(ndtr((float(model.mu(n)) - threshold) / model.sigma))


def power_in_interval(a: float, b: float, n: int, model: TwoGroupModel) -> float:
    """``P(a <= Z <= b)`` for an alternative Z-score at row total ``n``."""
    mu = float(model.mu(n))
    s = model.sigma
    return float(max(0.0, ndtr((b - mu) / s) - ndtr((a - mu) / s)))


def _crossings(f, lam: float, lo: float, hi: float, step: float, tol: float) -> list[float]:
    grid = np.arange(lo, hi + step / 2, step)
    vals = f(grid) - lam
    roots = []
    for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
        a, b = grid[i], grid[i + 1]
        fa = vals[i]
        while b - a > tol:
            m = 0.5 * (a + b)
            fm = float(f(m)) - lam
            if np.sign(fm) == np.sign(fa):
                a, fa = m, fm
            else:
                b = m
        roots.append(0.5 * (a + b))
    return roots


def lfdr_threshold(model: TwoGroupModel, lam: float, lo: float = 0.0, hi: float = 50.0,
                   tol: float = 1e-8) -> float | None:
    """Smallest ``z`` in ``[lo, hi]`` where the marginal lFDR falls to ``lam``.

    ``lFDR(z)`` is not monotone on the whole half-line (it returns to 1 far
    in the upper tail), so the crossing is located on a 0.01 grid and then
    bisected to ``tol``. Returns None if there is no crossing.
    """
    roots = _crossings(lambda z: lfdr_z(z, model), lam, lo, hi, 0.01, tol)
    return roots[0] if roots else None


def lfdr_region(model: TwoGroupModel, lam: float, lo: float = 0.0, hi: float = 50.0,
                tol: float = 1e-8) -> tuple[float, float] | None:
    """``[lower, upper]`` crossing pair of the marginal lFDR; ``upper`` is inf if beyond ``hi``."""
    roots = _crossings(lambda z: lfdr_z(z, model), lam, lo, hi, 0.01, tol)
    if not roots:
        return None
    return roots[0], roots[1] if len(roots) > 1 else math.inf


def boundary_table(model: TwoGroupModel, lam: float, ns) -> list[dict]:
    rows = []
    for n in ns:
        rb = rejection_boundary(int(n), model, lam)
        rows.append({"n": rb.n, "mu": float(model.mu(rb.n)), "a": rb.a, "b": rb.b,
                     "exists": rb.exists})
    return rows


def power_difference_table(model: TwoGroupModel, lam: float, ns) -> list[dict]:
    """Correct-rejection probability of clFDR vs marginal lFDR at fixed cut-off ``lam``."""
    region = lfdr_region(model, lam)
    rows = []
    for n in ns:
        rb = rejection_boundary(int(n), model, lam)
        p_c = power_in_interval(rb.a, rb.b, int(n), model) if rb.exists else 0.0
        p_l = power_in_interval(region[0], region[1], int(n), model) if region else 0.0
        rows.append({"n": int(n), "clfdr_power": p_c, "lfdr_power": p_l,
                     "difference": p_c - p_l})
    return rows


def frontier_table(lams, pi0s, gamma1s, covariate=None, n_max: int = 10_000) -> list[dict]:
    """Minimal ``n`` from which ``a(n)`` increases, over a parameter grid."""
    cov = Covariate(WHEAT_BIOMASS) if covariate is None else covariate
    pmf = SizePMF.point(1)
    rows = []
    for lam in lams:
        for pi0 in pi0s:
            for g in gamma1s:
                m = TwoGroupModel(pi0, g, cov, pmf)
                rows.append({"lambda": lam, "pi0": pi0, "gamma1": g,
                             "min_n": theorem2_min_n(m, lam, n_max)})
    return rows
