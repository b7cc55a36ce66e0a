"""Normal mixture for Z-scores with a frozen standard normal null.

The marginal (unconditional) local FDR baseline: Z-scores are modelled as
``pi0 * N(0, 1) + sum_k pi_k * N(mu_k, sigma2_k)`` and the lFDR of ``z`` is
the null share of the density at ``z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .loglinear import lse_columns

VARIANCE_FLOOR = 1e-4
_LOG_2PI = math.log(2.0 * math.pi)


def _log_normal_pdf(z, mu, sigma2):
    z = np.asarray(z, dtype=float)
    return -0.5 * (_LOG_2PI + np.log(sigma2) + (z - mu) ** 2 / sigma2)


@dataclass(frozen=True)
class NormalMixtureParams:
    """``pi0`` for the N(0, 1) null plus free components ``(pi, mu, sigma2)``."""

    pi0: float
    pis: np.ndarray
    mus: np.ndarray
    sigma2s: np.ndarray

    def __post_init__(self):
        pis = np.atleast_1d(np.array(self.pis, dtype=float))
        mus = np.atleast_1d(np.array(self.mus, dtype=float))
        s2 = np.atleast_1d(np.array(self.sigma2s, dtype=float))
        if not (pis.size == mus.size == s2.size):
            raise ValueError("pis, mus and sigma2s must have equal length")
        if not 0.0 < self.pi0 <= 1.0:
            raise ValueError(f"pi0 must lie in (0, 1], got {self.pi0!r}")
        if np.any(pis < 0):
            raise ValueError("component proportions must be non-negative")
        if abs(self.pi0 + pis.sum() - 1.0) > 1e-10:
            raise ValueError("proportions must sum to 1")
        if np.any(s2 < VARIANCE_FLOOR):
            raise ValueError(f"component variances must be >= {VARIANCE_FLOOR}")
        for a in (pis, mus, s2):
            a.setflags(write=False)
        object.__setattr__(self, "pi0", float(self.pi0))
        object.__setattr__(self, "pis", pis)
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "sigma2s", s2)

    @property
    def K(self) -> int:
        """Total number of components, null included."""
        return self.pis.size + 1

    @property
    def components(self) -> list[tuple[float, float, float]]:
        return [(float(p), float(m), float(s)) for p, m, s in zip(self.pis, self.mus, self.sigma2s)]

    def _arrays(self):
        pis = np.concatenate([[self.pi0], self.pis])
        mus = np.concatenate([[0.0], self.mus])
        s2 = np.concatenate([[1.0], self.sigma2s])
        return pis, mus, s2

    def to_dict(self) -> dict:
        return {
            "pi0": self.pi0,
            "components": [{"pi": p, "mu": m, "sigma2": s} for p, m, s in self.components],
        }


def _log_joint(z, params: NormalMixtureParams) -> np.ndarray:
    pis, mus, s2 = params._arrays()
    z = np.atleast_1d(np.asarray(z, dtype=float))
    with np.errstate(divide="ignore"):
        return np.log(pis)[:, None] + _log_normal_pdf(z[None, :], mus[:, None], s2[:, None])


def normal_mixture_density(z, params: NormalMixtureParams):
    scalar = np.ndim(z) == 0
    f = np.exp(logsumexp(_log_joint(z, params), axis=0))
    return float(f[0]) if scalar else f


def lfdr_stats(z, params: NormalMixtureParams) -> np.ndarray:
    """Marginal local FDR ``pi0 * phi(z) / f(z)``, capped at 1."""
    lj = _log_joint(z, params)
    out = np.exp(lj[0] - logsumexp(lj, axis=0))
    return np.minimum(out, 1.0)


def n_free_params(K: int) -> int:
    # (pi, mu, sigma2) per free component; pi0 is determined by the rest
    return 3 * (K - 1)


@dataclass
class NormalMixtureFit:
    params: NormalMixtureParams
    loglik_trace: list[float]
    iterations: int
    converged: bool
    aic: float
    bic: float
    n_params: int
    n_obs: int
    reseeded: list[int] = field(default_factory=list)
    flagged: list[int] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d.update(
            aic=self.aic,
            bic=self.bic,
            loglik=self.loglik,
            n_params=self.n_params,
            iterations=self.iterations,
            converged=self.converged,
            flagged=self.flagged,
        )
        return d


def _initial(z: np.ndarray, K: int, rng: np.random.Generator | None):
    if rng is None:
        levels = np.arange(1, K) / K
        pis = np.full(K, 1.0 / K)
    else:
        levels = np.sort(rng.uniform(0.02, 0.98, size=K - 1))
        pis = rng.dirichlet(np.full(K, 2.0))
        pis = np.maximum(pis, 0.01)
        pis /= pis.sum()
    mus = np.quantile(z, levels)
    return pis, mus, np.ones(K - 1)


def _em(z, pis, mus, s2, tol, max_iter, rng):
    """One EM run; index 0 is the frozen null. Returns arrays over all K."""
    K = pis.size
    mus = np.concatenate([[0.0], mus])
    s2 = np.concatenate([[1.0], s2])
    reseeded: set[int] = set()
    flagged: set[int] = set()
    zz = z[None, :]

    def loglik_parts():
        with np.errstate(divide="ignore"):
            c = np.log(pis) - 0.5 * (_LOG_2PI + np.log(s2))
        lj = c[:, None] - 0.5 * (zz - mus[:, None]) ** 2 / s2[:, None]
        return lj, lse_columns(lj)

    lj, col = loglik_parts()
    trace = [float(np.sum(col))]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        r = np.exp(lj - col)
        w = r.sum(axis=1)
        pis = w / w.sum()
        live = w[1:] >= 1e-12
        wk = np.where(live, w[1:], 1.0)
        mu_new = np.where(live, (r[1:] @ z) / wk, mus[1:])
        var = np.where(live, np.einsum("km,km->k", r[1:], (zz - mu_new[:, None]) ** 2) / wk, 0.0)
        mus[1:] = mu_new
        s2[1:] = var
        restart = False
        for k in np.nonzero(var < VARIANCE_FLOOR)[0] + 1:
            if k not in reseeded:
                reseeded.add(k)
                mus[k] = float(rng.choice(z))
                s2[k] = 1.0
                pis = np.where(np.arange(K) == k, 1.0 / K, pis * (1.0 - 1.0 / K) / (1.0 - pis[k]))
                restart = True
            else:
                flagged.add(k)
                s2[k] = VARIANCE_FLOOR
        lj, col = loglik_parts()
        ll = float(np.sum(col))
        if restart:
            # a re-seeded component starts a fresh ascent
            trace = [ll]
            continue
        gain = ll - trace[-1]
        trace.append(ll)
        if gain < tol:
            converged = True
            break
    return pis, mus, s2, trace, it, converged, sorted(reseeded), sorted(flagged)


def fit_normal_mixture(z, K: int, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0,
                       restarts: int = 5) -> NormalMixtureFit:
    """EM fit of a ``K``-component normal mixture whose first component is N(0, 1).

    Only ``pi0`` and the ``K - 1`` free components are estimated. Variances
    that fall below ``VARIANCE_FLOOR`` trigger one re-seed of that component
    (new mean drawn from the data, unit variance); a second collapse pins the
    variance to the floor and the component is reported in ``flagged``.
    The best of ``restarts`` seeded starts is returned.

    ``n_params`` is ``3 * (K - 1)`` and is what AIC and BIC use.
    """
    z = np.asarray(z, dtype=float)
    z = z[np.isfinite(z)]
    if K < 2:
        raise ValueError("K must be >= 2 (null plus at least one free component)")
    if z.size < K:
        raise ValueError(f"need at least K={K} finite Z-scores, got {z.size}")
    rng = np.random.default_rng(seed)
    best = None
    for i in range(max(1, restarts)):
        pis, mus, s2 = _initial(z, K, None if i == 0 else rng)
        out = _em(z, pis, mus, s2, tol, max_iter, rng)
        if best is None or out[3][-1] > best[3][-1]:
            best = out
    pis, mus, s2, trace, it, converged, reseeded, flagged = best
    params = NormalMixtureParams(
        pi0=float(pis[0]),
        pis=pis[1:] * (1.0 - pis[0]) / pis[1:].sum(),
        mus=mus[1:],
        sigma2s=s2[1:],
    )
    q = n_free_params(K)
    ll = trace[-1]
    return NormalMixtureFit(
        params=params,
        loglik_trace=trace,
        iterations=it,
        converged=converged,
        aic=-2.0 * ll + 2.0 * q,
        bic=-2.0 * ll + q * math.log(z.size),
        n_params=q,
        n_obs=int(z.size),
        reseeded=reseeded,
        flagged=flagged,
    )
