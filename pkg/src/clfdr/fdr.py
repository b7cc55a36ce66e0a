"""Step-up decision rules and error bookkeeping.

Missing statistics (``nan``) mark skipped tests: they are never rejected and
do not count toward the number of tests M used by the thresholds.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

REJECT, RETAIN, SKIPPED = "reject", "retain", "skipped"


@dataclass(frozen=True)
class DecisionResult:
    reject: np.ndarray
    skipped: np.ndarray
    k: int
    lam: float
    alpha: float

    @property
    def delta(self) -> list[str]:
        return [SKIPPED if s else (REJECT if r else RETAIN) for r, s in zip(self.reject, self.skipped)]

    @property
    def M(self) -> int:
        """Number of admitted (non-skipped) tests."""
        return int((~self.skipped).sum())

    def summary(self) -> dict:
        return {"k": self.k, "lambda": self.lam, "alpha": self.alpha,
                "tests": self.M, "skipped": int(self.skipped.sum())}


@dataclass(frozen=True)
class ErrorCounts:
    V: int
    R: int
    S: int
    M: int

    def __post_init__(self):
        if not (0 <= self.V <= self.R <= self.M and 0 <= self.S <= self.M - self.R):
            raise ValueError(f"inconsistent counts {self}")

    @property
    def fdp(self) -> float:
        return self.V / self.R if self.R > 0 else 0.0


def _prepare(stats, alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.asarray(stats, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("no statistics given")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")
    skipped = np.isnan(s)
    if skipped.all():
        raise ValueError("every test is skipped")
    idx = np.nonzero(~skipped)[0]
    # stable sort by (statistic, original index)
    order = idx[np.argsort(s[idx], kind="stable")]
    return s, skipped, order


def _decide(s, skipped, order, k, alpha) -> DecisionResult:
    reject = np.zeros(s.size, dtype=bool)
    reject[order[:k]] = True
    lam = float(s[order[k - 1]]) if k > 0 else 0.0
    return DecisionResult(reject, skipped, int(k), lam, float(alpha))


def bh_procedure(p, alpha: float = 0.05) -> DecisionResult:
    """Benjamini-Hochberg: reject the k smallest p-values, ``k = max{m : P(m) <= alpha m / M}``."""
    s, skipped, order = _prepare(p, alpha)
    ps = s[order]
    if np.any((ps < 0) | (ps > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    M = ps.size
    ok = np.nonzero(ps <= alpha * np.arange(1, M + 1) / M)[0]
    k = int(ok[-1]) + 1 if ok.size else 0
    return _decide(s, skipped, order, k, alpha)


def lfdr_stepup(stats, alpha: float = 0.05) -> DecisionResult:
    """Reject the k smallest local FDR statistics with mean at most ``alpha``.

    ``k = max{m : sum_{i<=m} stat_(i) <= m * alpha}``. Works for marginal and
    conditional lFDR alike. Tied statistics at the cut are kept or dropped
    as a group, so every rejected test has a strictly smaller statistic than
    every retained one.
    """
    s, skipped, order = _prepare(stats, alpha)
    ss = s[order]
    if np.any((ss < 0) | (ss > 1)):
        raise ValueError("lFDR statistics must lie in [0, 1]")
    m = np.arange(1, ss.size + 1)
    ok = np.cumsum(ss) <= m * alpha
    # a cut is only allowed at the end of a tie group
    group_end = np.append(ss[1:] > ss[:-1], True)
    valid = np.nonzero(ok & group_end)[0]
    k = int(valid[-1]) + 1 if valid.size else 0
    return _decide(s, skipped, order, k, alpha)


def confusion_counts(result: DecisionResult, truth) -> ErrorCounts:
    """False discoveries V, discoveries R and missed alternatives S.

    ``truth[m]`` is 1 for a false null. Skipped tests are left out.
    """
    theta = np.asarray(truth).astype(bool).ravel()
    if theta.size != result.reject.size:
        raise ValueError(f"truth has length {theta.size}, expected {result.reject.size}")
    keep = ~result.skipped
    d = result.reject[keep]
    th = theta[keep]
    return ErrorCounts(
        V=int(np.sum(d & ~th)),
        R=int(np.sum(d)),
        S=int(np.sum(th & ~d)),
        M=int(keep.sum()),
    )


def fdr_mdr_estimates(batches: Iterable) -> tuple[float, float]:
    """Monte Carlo FDR and MDR over replicate decisions.

    Each batch is an :class:`ErrorCounts` or a ``(DecisionResult, truth)``
    pair. FDR is the mean false discovery proportion (0 when nothing is
    rejected); MDR is the ratio of summed missed alternatives to summed
    retained tests.
    """
    fdp, s_sum, retained = [], 0, 0
    for b in batches:
        c = b if isinstance(b, ErrorCounts) else confusion_counts(*b)
        fdp.append(c.fdp)
        s_sum += c.S
        retained += c.M - c.R
    if not fdp:
        raise ValueError("need at least one batch")
    mdr = s_sum / retained if retained > 0 else 0.0
    return float(np.mean(fdp)), float(mdr)
