"""Acceptance gate. Each test carries a ``criterion`` marker and the session
summary prints one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import itertools
import math

import numpy as np
import pytest
from scipy.special import ndtr

from clfdr.fdr import bh_procedure, lfdr_stepup
from clfdr.loglinear import conditional_mean, conditional_sd, log_pmf, multinomial_probs
from clfdr.mixture import MixtureParams, fit_em, initial_params
from clfdr.sim import SimConfig, run_simulation, sample_dataset
from clfdr.threshold import (
    SizePMF,
    TwoGroupModel,
    clfdr_derivative,
    clfdr_derivative_sign,
    clfdr_zn,
    rejection_boundary,
    theorem2_min_n,
)


@pytest.mark.criterion(1, "probability vectors p(0.1), p(0.5)")
@pytest.mark.parametrize("beta, expected", [
    (0.1, (0.18, 0.19, 0.20, 0.21, 0.22)),
    (0.5, (0.11, 0.14, 0.18, 0.24, 0.33)),
])
def test_probability_vectors(wheat, beta, expected):
    p = multinomial_probs(beta, wheat)
    assert np.round(p, 2).tolist() == list(expected)


@pytest.mark.criterion(2, "conditional moments mu(n, gamma), sigma(gamma)")
@pytest.mark.parametrize("n, gamma, expected", [
    (911, 0.1, 2.28),
    (911, 0.3, 6.86),
    (5, 1.0, 1.59),
    (25, 1.0, 3.55),
])
def test_conditional_mean(wheat, n, gamma, expected):
    assert abs(conditional_mean(n, gamma, wheat) - expected) <= 0.01


@pytest.mark.criterion(2, "conditional moments mu(n, gamma), sigma(gamma)")
def test_conditional_sd(wheat):
    assert abs(conditional_sd(1.0, wheat) - 0.89) <= 0.01


@pytest.mark.criterion(3, "power at the fixed Z cut-off 1.98")
@pytest.mark.parametrize("n, expected", [(5, 0.33), (25, 0.96), (100, 1.00)])
def test_power_formula(wheat, n, expected):
    mu = conditional_mean(n, 1.0, wheat)
    power = 1.0 - ndtr((1.98 - mu) / 0.89)
    assert abs(power - expected) <= 0.01
    # same with the unrounded sigma
    power = 1.0 - ndtr((1.98 - mu) / conditional_sd(1.0, wheat))
    assert abs(power - expected) <= 0.01


@pytest.fixture(scope="module")
def model_half_one(wheat):
    return TwoGroupModel(0.5, 1.0, wheat, SizePMF.point(1))


@pytest.mark.criterion(4, "rejection boundaries a(5), a(25)")
@pytest.mark.parametrize("n, lo, hi", [(5, 1.57, 1.62), (25, 2.18, 2.22)])
def test_boundary_values(model_half_one, n, lo, hi):
    rb = rejection_boundary(n, model_half_one, 0.2)
    assert rb.exists
    assert lo <= rb.a <= hi
    assert abs(clfdr_zn(rb.a, n, model_half_one) - 0.2) <= 1e-8
    assert abs(clfdr_zn(rb.b, n, model_half_one) - 0.2) <= 1e-8


@pytest.mark.criterion(4, "rejection boundaries a(5), a(25)")
@pytest.mark.parametrize("n", [5, 25])
def test_boundary_matches_grid_scan(model_half_one, n):
    rb = rejection_boundary(n, model_half_one, 0.2)
    step = 1e-4
    z = np.arange(-10.0, rb.b + 5.0, step)
    inside = z[clfdr_zn(z, n, model_half_one) <= 0.2]
    assert inside.size > 0
    assert abs(inside.min() - rb.a) <= step
    assert abs(inside.max() - rb.b) <= step
    # the region is one interval
    assert np.all(np.diff(inside) < 1.5 * step)


@pytest.mark.criterion(5, "upper boundary b(n) at least 4.6 sd above mu(n)")
def test_upper_boundary_far_in_tail(wheat):
    worst = (math.inf, None)
    for g, lam, n, pi0 in itertools.product((0.5, 1.0, 2.0), (0.05, 0.1, 0.2),
                                            (5, 100, 1000), (0.1, 0.5, 0.9)):
        m = TwoGroupModel(pi0, g, wheat, SizePMF.point(1))
        rb = rejection_boundary(n, m, lam)
        assert rb.exists
        dist = (rb.b - float(m.mu(n))) / m.sigma
        worst = min(worst, (dist, (g, lam, n, pi0)))
    assert worst[0] >= 4.6, f"(b - mu)/sigma = {worst[0]:.4f} at (gamma1, lambda, n, pi0) = {worst[1]}"


@pytest.mark.criterion(6, "increasing clFDR cut-off from a moderate n")
@pytest.mark.parametrize("gamma1, bound", [(1.0, 10), (0.5, 25)])
def test_min_n_for_increasing_cutoff(wheat, gamma1, bound):
    m = TwoGroupModel(0.5, gamma1, wheat, SizePMF.point(1))
    n_star = theorem2_min_n(m, 0.2)
    assert n_star is not None and n_star <= bound
    a = np.array([rejection_boundary(n, m, 0.2).a for n in range(n_star, 1001)])
    assert np.all(np.diff(a) >= -1e-12)


@pytest.mark.criterion(7, "oracle clFDR step-up controls FDR")
@pytest.mark.parametrize("pi0", [0.5, 0.8])
@pytest.mark.parametrize("gamma1", [0.5, 1.0])
@pytest.mark.parametrize("alpha", [0.05, 0.1])
def test_oracle_fdr_control(pi0, gamma1, alpha):
    cfg = SimConfig(M=500, params=MixtureParams([0.0, gamma1], [pi0, 1.0 - pi0]), alpha=alpha,
                    reps=1000, seed=99, procedures=("clfdr-oracle",))
    s = run_simulation(cfg).procedures["clfdr-oracle"]
    assert s.reps_used == 1000
    assert s.fdr_hat <= alpha + 3.0 * s.mc_error


@pytest.mark.criterion(8, "thresholding effect under heterogeneous row totals")
def test_thresholding_effect():
    # two-group truth with a matching null-plus-one normal mixture arm
    cfg = SimConfig(M=500, params=MixtureParams([0.0, 2.0], [0.5, 0.5]), alpha=0.05,
                    reps=1000, seed=2024, procedures=("clfdr-oracle", "lfdr-normal"),
                    normal_components=2, normal_restarts=1)
    r = run_simulation(cfg)
    assert r.procedures["lfdr-normal"].reps_flagged == 0
    small = {p: r.rejections_between(p, 1, 10, "true") for p in cfg.procedures}
    large = {p: r.rejections_between(p, 100) for p in cfg.procedures}
    assert small["clfdr-oracle"] > small["lfdr-normal"], small
    assert large["clfdr-oracle"] < large["lfdr-normal"], large


@pytest.fixture(scope="module")
def recovery_data():
    truth = MixtureParams([0.0, -1.13, 0.78], [0.69, 0.16, 0.15])
    cfg = SimConfig(M=2000, params=truth, size_pmf=SizePMF(range(5, 101), np.full(96, 1 / 96)),
                    seed=3, reps=1)
    ds, _ = sample_dataset(cfg, 0)
    return truth, ds


@pytest.mark.criterion(9, "EM monotone ascent and parameter recovery")
def test_em_recovery(recovery_data):
    truth, ds = recovery_data
    fit = fit_em(ds, 2, seed=0)
    assert fit.converged
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    assert np.all(np.abs(fit.params.pis - truth.pis) <= 0.05), fit.params.pis
    assert np.all(np.abs(fit.params.gammas - truth.gammas) <= 0.15), fit.params.gammas


@pytest.mark.criterion(9, "EM monotone ascent and parameter recovery")
def test_em_monotone_every_start(recovery_data):
    _, ds = recovery_data
    rng = np.random.default_rng(5)
    starts = [initial_params(ds, 2)] + [initial_params(ds, 2, rng=rng) for _ in range(5)]
    starts.append(MixtureParams([0.0, -3.0, 3.0], [0.2, 0.4, 0.4]))
    for start in starts:
        fit = fit_em(ds, 2, init=start, max_iter=300)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)


def _compositions(n, parts):
    for cuts in itertools.combinations(range(n + parts - 1), parts - 1):
        bounds = (-1,) + cuts + (n + parts - 1,)
        yield [bounds[i + 1] - bounds[i] - 1 for i in range(parts)]


@pytest.mark.criterion(10, "small-instance oracles")
@pytest.mark.parametrize("n", range(1, 7))
def test_pmf_sums_to_one(wheat, n):
    ys = np.array(list(_compositions(n, 5)))
    assert len(ys) == math.comb(n + 4, 4)
    for beta in (-2.0, -0.3, 0.0, 0.5, 1.7):
        total = math.fsum(math.exp(log_pmf(y, beta, wheat)) for y in ys)
        assert abs(total - 1.0) <= 1e-12


def _brute_bh(p, alpha):
    vals = sorted(v for v in p if not math.isnan(v))
    M = len(vals)
    k = max((m for m in range(1, M + 1) if vals[m - 1] <= alpha * m / M), default=0)
    cut = vals[k - 1] if k else -math.inf
    return [not math.isnan(v) and v <= cut for v in p]


def _brute_stepup(s, alpha):
    vals = sorted(v for v in s if not math.isnan(v))
    M = len(vals)
    best = 0
    for m in range(1, M + 1):
        whole_group = m == M or vals[m] != vals[m - 1]
        if whole_group and sum(vals[:m]) <= m * alpha:
            best = m
    cut = vals[best - 1] if best else -math.inf
    return [not math.isnan(v) and v <= cut for v in s]


def _random_stats(rng):
    size = int(rng.integers(1, 30))
    if rng.random() < 0.5:
        # coarse grid so ties are common
        s = rng.integers(0, 21, size) / 20.0
    else:
        s = rng.beta(0.3, 1.0, size)
    s[rng.random(size) < 0.1] = np.nan
    if np.all(np.isnan(s)):
        s[0] = 0.0
    return s


@pytest.mark.criterion(10, "small-instance oracles")
def test_step_up_rules_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        s = _random_stats(rng)
        alpha = float(rng.choice([0.01, 0.05, 0.1, 0.2, 0.5]))
        assert bh_procedure(s, alpha).reject.tolist() == _brute_bh(s.tolist(), alpha)
        assert lfdr_stepup(s, alpha).reject.tolist() == _brute_stepup(s.tolist(), alpha)


@pytest.mark.criterion(10, "small-instance oracles")
def test_derivative_sign_matches_finite_differences(wheat):
    rng = np.random.default_rng(8)
    h = 1e-6
    checked = 0
    for _ in range(2000):
        m = TwoGroupModel(float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.1, 2.0)), wheat,
                          SizePMF.point(1))
        n = int(rng.integers(1, 200))
        z = float(rng.uniform(-2.0, float(m.mu(n)) + 2.0))
        fd = (clfdr_zn(z + h, n, m) - clfdr_zn(z - h, n, m)) / (2 * h)
        an = float(clfdr_derivative(z, n, m))
        if abs(fd) < 1e-7:
            continue
        checked += 1
        assert np.sign(fd) == clfdr_derivative_sign(z, n, m)
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an))
    assert checked > 1000
