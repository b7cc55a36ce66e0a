"""Finite mixtures of log-linear multinomials and their EM fit.

Each test's effect is one of ``K + 1`` grid values ``gammas`` with
``gammas[0] == 0`` the null. The conditional local FDR of a test is the
posterior probability of the null component given its counts and row total.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import CountDataset
from .loglinear import (
    BETA_BRACKET,
    _counts,
    _xvals,
    conditional_mle,
    log_pmf_matrix,
    lse_columns,
    solve_mean_match,
)

log = logging.getLogger(__name__)

PI_FLOOR = 1e-6
EMPTY_WEIGHT = 1e-12


class EmptyComponentWarning(RuntimeWarning):
    pass


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureParams:
    """Effect grid and mixing proportions.

    ``gammas[0]`` is the null effect (exactly 0); the remaining effects are
    distinct and kept in ascending order.
    """

    gammas: np.ndarray
    pis: np.ndarray

    def __post_init__(self):
        g = np.array(self.gammas, dtype=float).ravel()
        p = np.array(self.pis, dtype=float).ravel()
        if g.size < 2 or g.size != p.size:
            raise ValueError("need K >= 1 and one proportion per effect")
        if g[0] != 0.0:
            raise ValueError("gammas[0] must be exactly 0")
        if not np.all(np.isfinite(g)):
            raise ValueError("gammas must be finite")
        if np.unique(g).size != g.size:
            raise ValueError(f"gammas must be distinct, got {g.tolist()}")
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError(f"each pi must lie in (0, 1), got {p.tolist()}")
        if abs(p.sum() - 1.0) > 1e-10:
            raise ValueError(f"pis must sum to 1, got {p.sum()!r}")
        if np.any(np.diff(g[1:]) < 0):
            raise ValueError("non-null gammas must be ascending; use MixtureParams.canonical")
        g.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "pis", p)

    @classmethod
    def canonical(cls, gammas, pis) -> "MixtureParams":
        """Build params after sorting the non-null components by effect."""
        g = np.asarray(gammas, dtype=float)
        p = np.asarray(pis, dtype=float)
        order = np.concatenate([[0], 1 + np.argsort(g[1:], kind="stable")])
        return cls(g[order], p[order])

    @property
    def K(self) -> int:
        return self.gammas.size - 1

    @property
    def pi0(self) -> float:
        return float(self.pis[0])

    def to_dict(self) -> dict:
        return {"gammas": self.gammas.tolist(), "pis": self.pis.tolist()}


@dataclass(frozen=True)
class Responsibilities:
    """Posterior component memberships, shape (K+1, M_used).

    ``rows`` maps each column to its row index in the dataset; zero-total
    rows have no column.
    """

    z_hat: np.ndarray
    rows: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.z_hat.sum(axis=1)


@dataclass
class FitResult:
    params: MixtureParams
    loglik_trace: list[float]
    iterations: int
    converged: bool
    aic: float
    bic: float
    n_params: int
    n_obs: int
    empty_components: list[int] = field(default_factory=list)
    restart_logliks: list[float] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def to_dict(self) -> dict:
        return {
            "gammas": self.params.gammas.tolist(),
            "pis": self.params.pis.tolist(),
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _usable(ds: CountDataset) -> tuple[np.ndarray, np.ndarray]:
    rows = np.nonzero(ds.totals > 0)[0]
    if rows.size == 0:
        raise FitError("no rows with a positive total")
    return rows, ds.counts[rows]


def _component_logpmf(counts, gammas, x) -> np.ndarray:
    return log_pmf_matrix(counts, gammas, x)


def mixture_log_pmf(rec, params: MixtureParams, x) -> float:
    """``log sum_k pi_k p(y | n; gamma_k)`` for one count vector."""
    y = _counts(rec)
    if y.sum() < 1:
        raise ValueError("row total is zero; test is skipped")
    lp = _component_logpmf(y[None, :], params.gammas, x)[:, 0]
    return float(logsumexp(lp + np.log(params.pis)))


def _joint(counts, params: MixtureParams, x) -> np.ndarray:
    return _component_logpmf(counts, params.gammas, x) + np.log(params.pis)[:, None]


def log_likelihood(ds: CountDataset, params: MixtureParams) -> float:
    """Observed-data log-likelihood over rows with a positive total."""
    _, y = _usable(ds)
    # np.sum is pairwise, so the reduction order is fixed
    return float(np.sum(logsumexp(_joint(y, params, ds.x), axis=0)))


def e_step(ds: CountDataset, params: MixtureParams) -> Responsibilities:
    rows, y = _usable(ds)
    lj = _joint(y, params, ds.x)
    z = np.exp(lj - logsumexp(lj, axis=0, keepdims=True))
    return Responsibilities(z, rows)


def m_step_pi(resp: Responsibilities, floor: float = 0.0) -> np.ndarray:
    """Mixing proportions as row means of the responsibilities.

    With ``floor > 0`` the result is the maximizer of the expected
    complete-data log-likelihood over ``{pi : pi_k >= floor}``: components
    below the floor are pinned to it and the remaining mass is shared in
    proportion to their weights.
    """
    w = resp.z_hat.sum(axis=1)
    pis = w / w.sum()
    if floor <= 0:
        return pis
    pinned = np.zeros(pis.size, dtype=bool)
    while True:
        free = ~pinned
        share = 1.0 - floor * pinned.sum()
        pis = np.where(pinned, floor, share * w / w[free].sum())
        newly = free & (pis < floor)
        if not newly.any():
            return pis
        pinned |= newly


def gamma_objective(gamma: float, counts, weights, x) -> tuple[float, float, float]:
    """``g(gamma)`` and its first two derivatives for one component.

    ``g(gamma) = sum_m w_m * y_m' log p(gamma)`` (constant terms dropped).
    """
    x = _xvals(x)
    y = np.asarray(counts)
    t = y @ x
    n = y.sum(axis=1)
    wt = float(np.dot(weights, t))
    wn = float(np.dot(weights, n))
    eta = gamma * x
    lse = logsumexp(eta)
    p = np.exp(eta - lse)
    mean = float(p @ x)
    var = float(p @ (x - mean) ** 2)
    return wt * gamma - wn * lse, wt - wn * mean, -wn * var


def _gamma_update(y, z_hat, x, current) -> tuple[np.ndarray, list[int]]:
    x = _xvals(x)
    t = y @ x
    n = y.sum(axis=1)
    new = np.array(current, dtype=float)
    empty = []
    wt = z_hat[1:] @ t
    wn = z_hat[1:] @ n
    live = []
    for k in range(1, z_hat.shape[0]):
        if z_hat[k].sum() < EMPTY_WEIGHT or wn[k - 1] <= 0:
            empty.append(k)
        else:
            live.append(k)
    if live:
        idx = np.array(live) - 1
        new[live] = solve_mean_match(wt[idx] / wn[idx], x, weight=wn[idx], start=new[live])
    return new, empty


def m_step_gamma(ds: CountDataset, resp: Responsibilities, x=None, current=None) -> np.ndarray:
    """Maximize each non-null component's expected log-likelihood in its effect.

    Every ``g_k`` is concave, so each update is a one-dimensional safeguarded
    Newton solve of ``g_k'(gamma) = 0`` on ``[-20, 20]``. The null effect is
    never updated. Components whose total responsibility is below 1e-12 keep
    their current effect and raise :class:`EmptyComponentWarning`.
    """
    x = ds.x if x is None else _xvals(x)
    if current is None:
        raise ValueError("current gammas are required")
    if len(current) < 2:
        raise ValueError("need K >= 1")
    y = ds.counts[resp.rows]
    new, empty = _gamma_update(y, resp.z_hat, x, current)
    new[0] = 0.0
    if empty:
        warnings.warn(f"empty mixture components {empty}", EmptyComponentWarning, stacklevel=2)
    return new


def clfdr_stats(ds: CountDataset, params: MixtureParams) -> np.ndarray:
    """Conditional local FDR per row; ``nan`` for zero-total rows."""
    resp = e_step(ds, params)
    out = np.full(ds.M, np.nan)
    out[resp.rows] = resp.z_hat[0]
    return out


def n_free_params(K: int) -> int:
    # K free proportions plus K free effects; the null effect is fixed at 0
    return 2 * K


def information_criteria(loglik: float, K: int, n_obs: int) -> tuple[float, float]:
    q = n_free_params(K)
    return -2.0 * loglik + 2.0 * q, -2.0 * loglik + q * math.log(n_obs)


def initial_params(ds: CountDataset, K: int, rng: np.random.Generator | None = None,
                   band: float = 0.1, min_total: int = 5) -> MixtureParams:
    """Starting values from quantiles of the per-row effect estimates.

    Rows with total >= ``min_total`` get a conditional MLE; estimates within
    ``band`` of zero are discarded and the non-null effects start at the
    ``k / (K + 1)`` quantiles of the rest, with uniform proportions. When
    ``rng`` is given the quantile levels and proportions are randomized
    instead (used for restarts).
    """
    beta = conditional_mle(ds.counts, ds.x, min_total=min_total)
    beta = beta[np.isfinite(beta)]
    pool = beta[np.abs(beta) > band]
    if pool.size < K:
        pool = np.concatenate([pool, np.linspace(-1.0, 1.0, K + 2)[1:-1]])
    if rng is None:
        levels = np.arange(1, K + 1) / (K + 1)
        pis = np.full(K + 1, 1.0 / (K + 1))
    else:
        levels = np.sort(rng.uniform(0.02, 0.98, size=K))
        pis = rng.dirichlet(np.full(K + 1, 2.0))
        pis = np.maximum(pis, 0.01)
        pis /= pis.sum()
    g = np.quantile(pool, levels)
    g = _separate(g, band)
    return MixtureParams.canonical(np.concatenate([[0.0], g]), pis)


def _separate(g: np.ndarray, gap: float) -> np.ndarray:
    """Nudge effects apart so none coincide with each other or with 0."""
    g = np.sort(np.asarray(g, dtype=float))
    for i in range(g.size):
        if abs(g[i]) < gap / 2:
            g[i] = math.copysign(gap / 2, g[i] if g[i] != 0 else 1.0)
        if i and g[i] <= g[i - 1] + 1e-3:
            g[i] = g[i - 1] + gap / 2
            if abs(g[i]) < gap / 2:
                g[i] = gap / 2
    lo, hi = BETA_BRACKET
    return np.clip(g, lo, hi)


def _run_em(y, x, params: MixtureParams, tol: float, max_iter: int):
    gammas = params.gammas.copy()
    pis = params.pis.copy()
    lp = _component_logpmf(y, gammas, x)
    lj = lp + np.log(pis)[:, None]
    ll_col = lse_columns(lj)
    trace = [float(np.sum(ll_col))]
    converged = False
    empty: set[int] = set()
    it = 0
    for it in range(1, max_iter + 1):
        z_hat = np.exp(lj - ll_col[None, :])
        resp = Responsibilities(z_hat, np.arange(y.shape[0]))
        pis = m_step_pi(resp, floor=PI_FLOOR)
        gammas, emp = _gamma_update(y, z_hat, x, gammas)
        gammas[0] = 0.0
        empty.update(emp)
        lp = _component_logpmf(y, gammas, x)
        lj = lp + np.log(pis)[:, None]
        ll_col = lse_columns(lj)
        ll = float(np.sum(ll_col))
        gain = ll - trace[-1]
        trace.append(ll)
        if gain < tol:
            converged = True
            break
    return gammas, pis, trace, it, converged, sorted(empty)


def _distinct(gammas: np.ndarray) -> np.ndarray:
    g = gammas.copy()
    if np.unique(g).size == g.size:
        return g
    # exact coincidences only arise at the bracket ends; shift duplicates inward
    for i in range(1, g.size):
        while np.any(g[:i] == g[i]):
            g[i] = np.nextafter(g[i], 0.0)
    return g


def fit_em(ds: CountDataset, K: int, init: MixtureParams | None = None, seed: int = 0,
           tol: float = 1e-8, max_iter: int = 1000, restarts: int = 5) -> FitResult:
    """Maximum likelihood fit of the ``K + 1`` component multinomial mixture.

    Parameters
    ----------
    ds : CountDataset
    K : int
        Number of non-null components.
    init : MixtureParams, optional
        Starting values. When given, a single EM run is made from them.
        Otherwise the first start is the quantile seeding of
        :func:`initial_params` and ``restarts - 1`` further starts are drawn
        with ``numpy.random.default_rng(seed)``.
    tol : float
        Stop once an iteration improves the log-likelihood by less than this.
    max_iter : int
        Iteration cap; hitting it leaves ``converged=False``.

    Returns
    -------
    FitResult
        The run with the highest final log-likelihood, components in
        canonical order.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    rows, y = _usable(ds)
    x = ds.x
    if init is not None:
        if init.K != K:
            raise ValueError(f"init has K={init.K}, expected {K}")
        starts = [init]
    else:
        rng = np.random.default_rng(seed)
        starts = [initial_params(ds, K)]
        starts += [initial_params(ds, K, rng=rng) for _ in range(max(0, restarts - 1))]

    best = None
    finals = []
    for i, start in enumerate(starts):
        out = _run_em(y, x, start, tol, max_iter)
        finals.append(out[2][-1])
        log.debug("EM start %d: loglik %.6f after %d iterations", i, out[2][-1], out[3])
        if best is None or out[2][-1] > best[2][-1]:
            best = out
    gammas, pis, trace, iters, converged, empty = best
    gammas = _distinct(gammas)
    order = np.concatenate([[0], 1 + np.argsort(gammas[1:], kind="stable")])
    rank = np.argsort(order)
    params = MixtureParams(gammas[order], pis[order] / pis.sum())
    empty = sorted(int(rank[k]) for k in empty)
    aic, bic = information_criteria(trace[-1], K, rows.size)
    return FitResult(
        params=params,
        loglik_trace=trace,
        iterations=iters,
        converged=converged,
        aic=aic,
        bic=bic,
        n_params=n_free_params(K),
        n_obs=int(rows.size),
        empty_components=empty,
        restart_logliks=finals,
    )
