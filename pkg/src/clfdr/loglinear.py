"""Per-test log-linear multinomial model.

Conditioning a Poisson log-linear model ``log E[Y_n] = alpha + beta * x_n`` on
the row total ``n`` gives a multinomial with cell probabilities
``p_n(beta) = exp(beta x_n) / sum_j exp(beta x_j)``. Everything here is a
function of ``beta``, the covariate ``x`` and the counts; the nuisance
intercept drops out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr

from .data import Covariate, TestRecord

# scipy.special.ndtr is accurate to ~1e-16; this is the bound tests assert.
NORMAL_CDF_ABS_TOL = 1e-12

BETA_BRACKET = (-20.0, 20.0)


def _xvals(x) -> np.ndarray:
    if isinstance(x, Covariate):
        return x.values
    return np.asarray(x, dtype=float)


def _counts(rec) -> np.ndarray:
    if isinstance(rec, TestRecord):
        return rec.y
    return np.asarray(rec, dtype=np.int64)


def lse_columns(a: np.ndarray) -> np.ndarray:
    """``log(sum(exp(a), axis=0))`` for a finite-max 2-D array, without scipy's overhead."""
    m = a.max(axis=0)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return m + np.log(np.exp(a - m[None, :]).sum(axis=0))


def normal_cdf(z):
    return ndtr(z)


def normal_sf(z):
    return ndtr(-np.asarray(z, dtype=float))


def multinomial_probs(beta: float, x) -> np.ndarray:
    """Cell probabilities ``p(beta)`` via a max-shifted softmax."""
    if not math.isfinite(beta):
        raise ValueError(f"beta must be finite, got {beta!r}")
    eta = beta * _xvals(x)
    eta = eta - eta.max()
    w = np.exp(eta)
    return w / w.sum()


def log_probs(betas, x) -> np.ndarray:
    """``log p_n(beta_k)`` as a (len(betas), N) array."""
    x = _xvals(x)
    eta = np.outer(np.atleast_1d(np.asarray(betas, dtype=float)), x)
    return eta - logsumexp(eta, axis=1, keepdims=True)


def covariate_moments(betas, x) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``x'p(b)`` and variance ``x'Sigma(b)x`` of the covariate under ``p(b)``.

    Vectorized over ``betas``.
    """
    x = _xvals(x)
    b = np.atleast_1d(np.asarray(betas, dtype=float))
    P = np.exp(log_probs(b, x))
    mean = P @ x
    # centred form avoids the E[x^2] - E[x]^2 cancellation
    var = np.einsum("kn,kn->k", P, (x[None, :] - mean[:, None]) ** 2)
    return mean, var


def log_multinomial_coef(counts) -> np.ndarray:
    """``log(n! / prod y_j!)`` row-wise, via log-gamma."""
    y = np.asarray(counts, dtype=float)
    return gammaln(y.sum(axis=-1) + 1.0) - gammaln(y + 1.0).sum(axis=-1)


def log_pmf(rec, beta: float, x) -> float:
    """Multinomial log-pmf of one count vector at effect ``beta``."""
    y = _counts(rec)
    n = int(y.sum())
    if n < 1:
        raise ValueError("row total is zero; test is skipped")
    lp = log_probs([beta], x)[0]
    return float(log_multinomial_coef(y) + np.dot(y, lp))


def log_pmf_matrix(counts, betas, x) -> np.ndarray:
    """Component log-pmfs, shape (len(betas), M), for rows of ``counts``.

    Uses ``y'log p(b) = b*T - n*logsumexp(b*x)`` so the cost is O(K*M + M*N).
    """
    x = _xvals(x)
    y = np.asarray(counts)
    b = np.atleast_1d(np.asarray(betas, dtype=float))
    t = y @ x
    n = y.sum(axis=1)
    lse = logsumexp(np.outer(b, x), axis=1)
    return log_multinomial_coef(y)[None, :] + np.outer(b, t) - np.outer(lse, n)


@dataclass(frozen=True)
class TestStatistics:
    __test__ = False

    t: float
    z: float
    p: float = float("nan")
    n_total: int = 0


def null_scale(x) -> tuple[float, float]:
    """Null mean ``x'p(0)`` and variance ``x'Sigma(0)x`` per unit of row total."""
    m, v = covariate_moments([0.0], x)
    return float(m[0]), float(v[0])


def z_scores(counts, x) -> tuple[np.ndarray, np.ndarray]:
    """Sufficient statistics ``T = x'y`` and standardized scores for many rows.

    Rows with zero total get ``nan`` Z-scores.
    """
    x = _xvals(x)
    y = np.asarray(counts)
    if y.ndim == 1:
        y = y[None, :]
    t = y @ x
    n = y.sum(axis=1).astype(float)
    m0, v0 = null_scale(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(n > 0, (t - n * m0) / np.sqrt(n * v0), np.nan)
    return t, z


def z_score(rec, x) -> TestStatistics:
    y = _counts(rec)
    n = int(y.sum())
    if n < 1:
        raise ValueError("row total is zero; test is skipped")
    t, z = z_scores(y[None, :], x)
    return TestStatistics(t=float(t[0]), z=float(z[0]), n_total=n)


@dataclass(frozen=True)
class NullDistribution:
    """Null distribution ``F0`` of a Z-score.

    ``kind`` is ``"standard-normal"`` or ``"monte-carlo-empirical"``; the
    empirical kind keeps its sorted simulated Z sample, the row total it was
    simulated at, and its seed.
    """

    kind: str = "standard-normal"
    samples: np.ndarray | None = None
    seed: int | None = None
    n: int | None = None

    def __post_init__(self):
        if self.kind not in ("standard-normal", "monte-carlo-empirical"):
            raise ValueError(f"unknown null kind {self.kind!r}")
        if self.kind == "monte-carlo-empirical":
            if self.samples is None or len(self.samples) < 1:
                raise ValueError("empirical null needs at least one sample")
            if self.seed is None:
                raise ValueError("empirical null must record its seed")
            s = np.sort(np.asarray(self.samples, dtype=float))
            s.setflags(write=False)
            object.__setattr__(self, "samples", s)

    @property
    def reps(self) -> int:
        return 0 if self.samples is None else int(self.samples.size)


STANDARD_NORMAL = NullDistribution()


def p_value(z, f0: NullDistribution = STANDARD_NORMAL):
    """Two-sided p-value ``2 * P0(|Z| >= |z|)``.

    The empirical null replaces ``1 - F0(|z|)`` with the add-one estimate
    ``(1 + #{Z* >= |z|}) / (1 + B)`` so p is never 0. Results are capped at 1.
    """
    scalar = np.ndim(z) == 0
    az = np.abs(np.asarray(z, dtype=float))
    if f0.kind == "standard-normal":
        p = 2.0 * normal_sf(az)
    else:
        s = f0.samples
        ge = s.size - np.searchsorted(s, az, side="left")
        p = 2.0 * (1.0 + ge) / (1.0 + s.size)
    p = np.minimum(p, 1.0)
    p = np.where(np.isnan(az), np.nan, p)
    return float(p) if scalar else p


def sample_multinomial(rng: np.random.Generator, n, probs) -> np.ndarray:
    """Multinomial draws by sequential conditional binomials.

    ``n`` is an integer array of shape (R,); ``probs`` is (N,) or (R, N).
    Cell j is drawn as Binomial(remaining, p_j / (1 - p_1 - ... - p_{j-1})).
    """
    n = np.atleast_1d(np.asarray(n, dtype=np.int64))
    P = np.asarray(probs, dtype=float)
    if P.ndim == 1:
        P = np.broadcast_to(P, (n.size, P.size))
    R, N = P.shape
    out = np.zeros((R, N), dtype=np.int64)
    remaining = n.copy()
    mass = np.ones(R)
    for j in range(N - 1):
        q = np.clip(np.divide(P[:, j], mass, out=np.zeros(R), where=mass > 0), 0.0, 1.0)
        draw = rng.binomial(remaining, q)
        out[:, j] = draw
        remaining -= draw
        mass = mass - P[:, j]
    out[:, N - 1] = remaining
    return out


def simulate_null(x, n: int, reps: int, seed: int) -> NullDistribution:
    """Monte Carlo null for the Z-score at row total ``n`` (beta = 0)."""
    if n < 1 or reps < 1:
        raise ValueError("need n >= 1 and reps >= 1")
    rng = np.random.default_rng(seed)
    p0 = multinomial_probs(0.0, x)
    y = sample_multinomial(rng, np.full(reps, n), p0)
    _, z = z_scores(y, x)
    return NullDistribution("monte-carlo-empirical", samples=z, seed=seed, n=n)


def conditional_mean(n, gamma: float, x):
    """Mean of the Z-score at row total ``n`` when the true effect is ``gamma``."""
    m0, v0 = null_scale(x)
    mg, _ = covariate_moments([gamma], x)
    return np.sqrt(n) * (float(mg[0]) - m0) / math.sqrt(v0)


def conditional_sd(gamma: float, x) -> float:
    """Standard deviation of the Z-score under effect ``gamma`` (free of ``n``)."""
    _, v0 = null_scale(x)
    _, vg = covariate_moments([gamma], x)
    return math.sqrt(float(vg[0]) / v0)


def solve_mean_match(target, x, weight=1.0, start=None, tol: float = 1e-10, max_iter: int = 200,
                     bracket: tuple[float, float] = BETA_BRACKET) -> np.ndarray:
    """Solve ``x'p(b) = target`` for ``b`` elementwise, with safeguards.

    This is the stationarity condition of the concave objective
    ``g(b) = weight * (target * b - logsumexp(b * x))``; its derivative is
    ``weight * (target - x'p(b))`` and its second derivative is
    ``-weight * x'Sigma(b)x``. Newton steps start from ``start`` (default
    0, clipped into the bracket); a step that leaves the current bracket or lowers ``g`` is
    replaced by bisection. Targets at or beyond the covariate range return
    the bracket end, which is the constrained maximizer.

    Iteration stops when ``|g'| <= tol`` or the bracket has collapsed to
    floating point resolution.
    """
    x = _xvals(x)
    target = np.atleast_1d(np.asarray(target, dtype=float))
    w = np.broadcast_to(np.asarray(weight, dtype=float), target.shape)
    lo = np.full(target.shape, bracket[0])
    hi = np.full(target.shape, bracket[1])
    if start is None:
        b = np.zeros_like(target)
    else:
        b = np.clip(np.broadcast_to(np.asarray(start, dtype=float), target.shape),
                    bracket[0], bracket[1]).copy()

    def g(beta, tgt, wt):
        return wt * (tgt * beta - logsumexp(np.outer(beta, x), axis=1))

    m_lo, _ = covariate_moments(lo, x)
    m_hi, _ = covariate_moments(hi, x)
    at_lo = target <= m_lo
    at_hi = target >= m_hi
    active = ~(at_lo | at_hi)
    b[at_lo] = lo[at_lo]
    b[at_hi] = hi[at_hi]
    if not active.any():
        return b

    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        bi = b[idx]
        m, v = covariate_moments(bi, x)
        d1 = w[idx] * (target[idx] - m)
        done = np.abs(d1) <= tol
        # d1 > 0 means the root lies above bi
        lo[idx] = np.where(d1 > 0, bi, lo[idx])
        hi[idx] = np.where(d1 < 0, bi, hi[idx])
        collapsed = (hi[idx] - lo[idx]) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(bi))
        stop = done | collapsed
        active[idx[stop]] = False
        keep = ~stop
        if not keep.any():
            break
        idx, bi, m, v = idx[keep], bi[keep], m[keep], v[keep]
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = bi + (target[idx] - m) / v
        mid = 0.5 * (lo[idx] + hi[idx])
        ok = np.isfinite(newton) & (newton > lo[idx]) & (newton < hi[idx])
        cand = np.where(ok, newton, mid)
        worse = g(cand, target[idx], w[idx]) < g(bi, target[idx], w[idx])
        b[idx] = np.where(worse, mid, cand)
    return b


def conditional_mle(counts, x, min_total: int = 1) -> np.ndarray:
    """Per-row maximum likelihood effect under the conditional multinomial.

    Rows with total below ``min_total`` get ``nan``.
    """
    x = _xvals(x)
    y = np.asarray(counts)
    n = y.sum(axis=1)
    out = np.full(y.shape[0], np.nan)
    ok = n >= max(1, min_total)
    if ok.any():
        target = (y[ok] @ x) / n[ok]
        out[ok] = solve_mean_match(target, x, weight=n[ok])
    return out
