"""Monte Carlo harness for the multinomial mixture.

Each replicate draws a dataset from the mixture (component, then row total,
then counts), runs the requested procedures and records their errors. Every
replicate has its own Philox stream keyed by ``(seed, rep_index)``, so results
do not depend on the order or the number of workers used.

Procedures
----------
bh
    Benjamini-Hochberg on normal-approximation p-values.
lfdr-normal
    Marginal lFDR from a normal mixture fitted to the Z-scores.
clfdr-oracle
    Conditional lFDR under the true mixture parameters.
clfdr-adaptive
    Conditional lFDR under EM estimates.
lfdr-oracle, clfdr-normal
    Normal-approximation marginal and conditional lFDR under the true
    parameters and true row-total distribution.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import WHEAT_BIOMASS, CountDataset, Covariate
from .fdr import ErrorCounts, bh_procedure, confusion_counts, lfdr_stepup
from .loglinear import conditional_mean, conditional_sd, log_probs, p_value, sample_multinomial, z_scores
from .mixture import MixtureParams, clfdr_stats, fit_em
from .normal_mixture import fit_normal_mixture, lfdr_stats
from .threshold import SizePMF, default_size_pmf

PROCEDURES = ("bh", "lfdr-normal", "clfdr-oracle", "clfdr-adaptive", "lfdr-oracle", "clfdr-normal")


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    M: int
    params: MixtureParams
    covariate: Covariate = field(default_factory=lambda: Covariate(WHEAT_BIOMASS))
    size_pmf: SizePMF = field(default_factory=default_size_pmf)
    alpha: float = 0.05
    reps: int = 100
    seed: int = 0
    procedures: tuple[str, ...] = ("bh", "lfdr-normal", "clfdr-oracle")
    normal_components: int = 3
    normal_restarts: int = 3
    em_restarts: int = 3
    em_tol: float = 1e-8
    em_max_iter: int = 1000

    def __post_init__(self):
        if self.reps < 1 or self.M < 1:
            raise ConfigError("reps and M must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        unknown = set(self.procedures) - set(PROCEDURES)
        if unknown:
            raise ConfigError(f"unknown procedures {sorted(unknown)}")
        if not isinstance(self.covariate, Covariate):
            self.covariate = Covariate(self.covariate)
        self.procedures = tuple(self.procedures)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        try:
            params = MixtureParams.canonical(d.pop("gammas"), d.pop("pis"))
            cov = Covariate(d.pop("covariate", WHEAT_BIOMASS))
            pmf = _pmf_from_json(d.pop("size_pmf", "default"))
            return cls(params=params, covariate=cov, size_pmf=pmf, **d)
        except KeyError as e:
            raise ConfigError(f"missing config key {e}") from None
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"malformed JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "gammas": self.params.gammas.tolist(),
            "pis": self.params.pis.tolist(),
            "covariate": self.covariate.values.tolist(),
            "size_pmf": [[n, p] for n, p in self.size_pmf.to_list()],
            "alpha": self.alpha,
            "reps": self.reps,
            "seed": self.seed,
            "procedures": list(self.procedures),
            "normal_components": self.normal_components,
            "normal_restarts": self.normal_restarts,
            "em_restarts": self.em_restarts,
            "em_tol": self.em_tol,
            "em_max_iter": self.em_max_iter,
        }


def _pmf_from_json(spec) -> SizePMF:
    if spec == "default":
        return default_size_pmf()
    if isinstance(spec, dict):
        if "point" in spec:
            return SizePMF.point(int(spec["point"]))
        if "lognormal" in spec:
            return default_size_pmf(**spec["lognormal"])
        raise ConfigError(f"unrecognized size_pmf {spec!r}")
    try:
        ns, ps = zip(*spec)
    except (TypeError, ValueError):
        raise ConfigError("size_pmf must be 'default', an object or [[n, prob], ...]") from None
    return SizePMF(ns, ps)


def _rep_rng(seed: int, rep_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, rep_index, stream])))


def _rep_seed(seed: int, rep_index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, rep_index, stream]).generate_state(1)[0])


def sample_dataset(config: SimConfig, rep_index: int) -> tuple[CountDataset, np.ndarray]:
    """Draw one replicate: component, then row total, then counts.

    Returns the dataset and ``truth`` (1 where the drawn component is non-null).
    """
    rng = _rep_rng(config.seed, rep_index)
    params = config.params
    comp = rng.choice(params.gammas.size, size=config.M, p=params.pis)
    n = config.size_pmf.sample(rng, config.M)
    P = np.exp(log_probs(params.gammas, config.covariate))[comp]
    y = sample_multinomial(rng, n, P)
    return CountDataset(config.covariate, y), (comp != 0).astype(np.int8)


def normal_approx_lfdr(z, n, params: MixtureParams, x, size_pmf: SizePMF | None = None) -> np.ndarray:
    """Normal-approximation null posterior for Z-scores.

    With ``size_pmf=None`` each alternative is ``N(mu(n_m, gamma_k), sigma(gamma_k)^2)``
    at the test's own row total (conditional); otherwise the alternatives
    are averaged over ``size_pmf`` (marginal).
    """
    z = np.asarray(z, dtype=float)
    g = params.gammas[1:]
    mu1 = np.array([conditional_mean(1, gk, x) for gk in g])
    sd = np.array([conditional_sd(gk, x) for gk in g])
    logpi = np.log(params.pis)
    a = logpi[0] - 0.5 * (math.log(2 * math.pi) + z**2)

    def logphi(zz, mu, s):
        return -0.5 * math.log(2 * math.pi) - np.log(s) - 0.5 * ((zz - mu) / s) ** 2

    if size_pmf is None:
        rn = np.sqrt(np.asarray(n, dtype=float))
        lb = logpi[1:, None] + logphi(z[None, :], mu1[:, None] * rn[None, :], sd[:, None])
        b = logsumexp(lb, axis=0)
    else:
        rn = np.sqrt(size_pmf.ns.astype(float))
        lp = np.log(size_pmf.probs, where=size_pmf.probs > 0, out=np.full(rn.size, -np.inf))
        # (K, |support|, M)
        lb = (logpi[1:, None, None] + lp[None, :, None]
              + logphi(z[None, None, :], (mu1[:, None] * rn[None, :])[:, :, None], sd[:, None, None]))
        b = logsumexp(lb.reshape(-1, z.size), axis=0)
    out = np.exp(a - np.logaddexp(a, b))
    return np.where(np.isnan(z), np.nan, out)


def _n_bins(config: SimConfig) -> int:
    return int(config.size_pmf.ns.max()) + 1


@dataclass
class RepOutcome:
    counts: dict[str, ErrorCounts]
    hist: dict[str, np.ndarray]  # (3, n_bins): rejections, true rejections, false rejections
    tests: np.ndarray  # (2, n_bins): tests, alternatives
    flagged: dict[str, bool]


def run_replicate(config: SimConfig, rep_index: int) -> RepOutcome:
    ds, truth = sample_dataset(config, rep_index)
    n = ds.totals
    _, z = z_scores(ds.counts, ds.x)
    stats: dict[str, np.ndarray] = {}
    results = {}
    flagged = {}
    for proc in config.procedures:
        flagged[proc] = False
        if proc == "bh":
            results[proc] = bh_procedure(p_value(z), config.alpha)
            continue
        if proc == "lfdr-normal":
            fit = fit_normal_mixture(z[np.isfinite(z)], config.normal_components,
                                     seed=_rep_seed(config.seed, rep_index, 1),
                                     tol=config.em_tol, max_iter=config.em_max_iter,
                                     restarts=config.normal_restarts)
            s = np.full(z.size, np.nan)
            ok = np.isfinite(z)
            s[ok] = lfdr_stats(z[ok], fit.params)
            flagged[proc] = not fit.converged
        elif proc == "clfdr-oracle":
            s = clfdr_stats(ds, config.params)
        elif proc == "clfdr-adaptive":
            fit = fit_em(ds, config.params.K, seed=_rep_seed(config.seed, rep_index, 2),
                         tol=config.em_tol, max_iter=config.em_max_iter, restarts=config.em_restarts)
            s = clfdr_stats(ds, fit.params)
            flagged[proc] = not fit.converged
        elif proc == "lfdr-oracle":
            s = normal_approx_lfdr(z, n, config.params, ds.x, config.size_pmf)
        elif proc == "clfdr-normal":
            s = normal_approx_lfdr(z, n, config.params, ds.x)
        stats[proc] = s
        results[proc] = lfdr_stepup(s, config.alpha)

    bins = _n_bins(config)
    alt = truth.astype(bool)
    tests = np.vstack([np.bincount(n, minlength=bins), np.bincount(n[alt], minlength=bins)])
    counts, hist = {}, {}
    for proc, res in results.items():
        counts[proc] = confusion_counts(res, truth)
        r = res.reject
        hist[proc] = np.vstack([
            np.bincount(n[r], minlength=bins),
            np.bincount(n[r & alt], minlength=bins),
            np.bincount(n[r & ~alt], minlength=bins),
        ])
    return RepOutcome(counts, hist, tests, flagged)


def _run_chunk(args):
    config, reps = args
    return [run_replicate(config, r) for r in reps]


@dataclass
class ProcedureSummary:
    fdr_hat: float
    mdr_hat: float
    mean_R: float
    mc_error: float
    fdp_se: float
    reps_used: int
    reps_flagged: int
    rejections_by_n: np.ndarray  # (3, n_bins)

    def to_dict(self) -> dict:
        return {
            "fdr_hat": self.fdr_hat,
            "mdr_hat": self.mdr_hat,
            "mean_R": self.mean_R,
            "mc_error": self.mc_error,
            "fdp_se": self.fdp_se,
            "reps_used": self.reps_used,
            "reps_flagged": self.reps_flagged,
        }


@dataclass
class SimReport:
    config: SimConfig
    procedures: dict[str, ProcedureSummary]
    tests_by_n: np.ndarray  # (2, n_bins): tests, alternatives

    @property
    def mc_error(self) -> dict[str, float]:
        return {k: v.mc_error for k, v in self.procedures.items()}

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "procedures": {k: v.to_dict() for k, v in self.procedures.items()},
        }

    def histogram_rows(self) -> list[dict]:
        """Per-(procedure, n) rows for every n that occurred."""
        rows = []
        seen = np.nonzero(self.tests_by_n[0])[0]
        for proc, s in self.procedures.items():
            for n in seen:
                rows.append({
                    "procedure": proc,
                    "n": int(n),
                    "tests": int(self.tests_by_n[0, n]),
                    "alternatives": int(self.tests_by_n[1, n]),
                    "rejections": int(s.rejections_by_n[0, n]),
                    "true_rejections": int(s.rejections_by_n[1, n]),
                    "false_rejections": int(s.rejections_by_n[2, n]),
                })
        return rows

    def rejections_between(self, proc: str, lo: int = 1, hi: int | None = None,
                           kind: str = "all") -> int:
        """Total rejections of ``proc`` over replicates with ``lo <= n <= hi``."""
        row = {"all": 0, "true": 1, "false": 2}[kind]
        h = self.procedures[proc].rejections_by_n[row]
        hi = h.size - 1 if hi is None else min(hi, h.size - 1)
        return int(h[lo:hi + 1].sum())


def summarize(config: SimConfig, outcomes: list[RepOutcome]) -> SimReport:
    bins = _n_bins(config)
    tests = np.zeros((2, bins), dtype=np.int64)
    for o in outcomes:
        tests += o.tests
    summaries = {}
    for proc in config.procedures:
        used = [o for o in outcomes if not o.flagged[proc]]
        hist = np.zeros((3, bins), dtype=np.int64)
        fdp, s_sum, retained, r_sum = [], 0, 0, 0
        for o in used:
            c = o.counts[proc]
            fdp.append(c.fdp)
            s_sum += c.S
            retained += c.M - c.R
            r_sum += c.R
            hist += o.hist[proc]
        k = len(used)
        if k:
            fdr = float(np.mean(fdp))
            se = float(np.std(fdp, ddof=1) / math.sqrt(k)) if k > 1 else float("nan")
        else:
            fdr, se = float("nan"), float("nan")
        summaries[proc] = ProcedureSummary(
            fdr_hat=fdr,
            mdr_hat=s_sum / retained if retained else 0.0,
            mean_R=r_sum / k if k else float("nan"),
            mc_error=math.sqrt(fdr * (1.0 - fdr) / k) if k else float("nan"),
            fdp_se=se,
            reps_used=k,
            reps_flagged=len(outcomes) - k,
            rejections_by_n=hist,
        )
    return SimReport(config, summaries, tests)


def run_simulation(config: SimConfig, workers: int = 1) -> SimReport:
    """Run every replicate and aggregate in replicate order.

    ``mc_error`` is the binomial standard error ``sqrt(fdr (1 - fdr) / reps)``
    of the FDR estimate. Replicates where an adaptive fit did not converge
    are left out of that procedure's averages and counted in
    ``reps_flagged``.
    """
    reps = list(range(config.reps))
    if workers <= 1:
        outcomes = [run_replicate(config, r) for r in reps]
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, [(config, c) for c in chunks]))
        by_rep = {}
        for chunk, part in zip(chunks, parts):
            by_rep.update(zip(chunk, part))
        outcomes = [by_rep[r] for r in reps]
    return summarize(config, outcomes)
