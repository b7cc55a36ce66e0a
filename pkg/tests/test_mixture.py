import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from clfdr.data import CountDataset
from clfdr.loglinear import log_pmf
from clfdr.mixture import (
    PI_FLOOR,
    EmptyComponentWarning,
    FitError,
    MixtureParams,
    Responsibilities,
    clfdr_stats,
    e_step,
    fit_em,
    gamma_objective,
    information_criteria,
    initial_params,
    log_likelihood,
    m_step_gamma,
    m_step_pi,
    mixture_log_pmf,
    n_free_params,
)
from clfdr.sim import SimConfig, sample_dataset
from clfdr.threshold import SizePMF


@pytest.fixture(scope="module")
def small_ds():
    cfg = SimConfig(M=300, params=MixtureParams([0.0, -1.0, 0.8], [0.6, 0.2, 0.2]),
                    size_pmf=SizePMF(range(1, 41), np.full(40, 1 / 40)), seed=1, reps=1)
    ds, _ = sample_dataset(cfg, 0)
    counts = ds.counts.copy()
    counts[:3] = 0
    return CountDataset(ds.covariate, counts)


def test_params_validation():
    with pytest.raises(ValueError):
        MixtureParams([0.1, 1.0], [0.5, 0.5])
    with pytest.raises(ValueError):
        MixtureParams([0.0, 1.0, 1.0], [0.4, 0.3, 0.3])
    with pytest.raises(ValueError):
        MixtureParams([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        MixtureParams([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        MixtureParams([0.0, 1.0, -1.0], [0.4, 0.3, 0.3])
    with pytest.raises(ValueError):
        MixtureParams([0.0], [1.0])


def test_canonical_sorts_effects():
    p = MixtureParams.canonical([0.0, 1.0, -1.0], [0.4, 0.35, 0.25])
    assert p.gammas.tolist() == [0.0, -1.0, 1.0]
    assert p.pis.tolist() == [0.4, 0.25, 0.35]
    assert p.K == 2 and p.pi0 == 0.4


def test_mixture_log_pmf_by_hand(wheat):
    params = MixtureParams([0.0, 0.7], [0.3, 0.7])
    y = [2, 0, 1, 4, 3]
    ref = math.log(0.3 * math.exp(log_pmf(y, 0.0, wheat)) + 0.7 * math.exp(log_pmf(y, 0.7, wheat)))
    assert mixture_log_pmf(y, params, wheat) == pytest.approx(ref, abs=1e-12)


def test_log_likelihood_skips_zero_rows(small_ds):
    params = MixtureParams([0.0, -1.0, 0.8], [0.6, 0.2, 0.2])
    ref = math.fsum(mixture_log_pmf(small_ds.counts[m], params, small_ds.x)
                    for m in range(small_ds.M) if small_ds.totals[m] > 0)
    assert log_likelihood(small_ds, params) == pytest.approx(ref, abs=1e-9)


gamma_lists = st.lists(st.floats(-3, 3, allow_nan=False).filter(lambda v: abs(v) > 1e-3),
                       min_size=1, max_size=3, unique=True)


@settings(max_examples=40, deadline=None)
@given(gammas=gamma_lists, data=st.data())
def test_responsibilities_are_posteriors(small_ds, gammas, data):
    raw = data.draw(st.lists(st.floats(0.05, 1.0), min_size=len(gammas) + 1, max_size=len(gammas) + 1))
    pis = np.array(raw) / sum(raw)
    params = MixtureParams.canonical([0.0] + gammas, pis)
    resp = e_step(small_ds, params)
    assert resp.z_hat.shape == (params.K + 1, small_ds.M - 3)
    assert np.allclose(resp.z_hat.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(resp.z_hat >= 0)
    c = clfdr_stats(small_ds, params)
    assert np.all(np.isnan(c[:3]))
    assert np.array_equal(c[3:], resp.z_hat[0])


def test_m_step_pi_unfloored():
    z = np.array([[0.5, 0.2, 1.0], [0.5, 0.8, 0.0]])
    pis = m_step_pi(Responsibilities(z, np.arange(3)))
    assert pis.tolist() == pytest.approx([1.7 / 3, 1.3 / 3])


@settings(max_examples=60, deadline=None)
@given(w=st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 50.0)), min_size=2, max_size=5), floor=st.sampled_from([1e-3, 0.05, 0.15]))
def test_m_step_pi_floor_is_constrained_maximizer(w, floor):
    w = np.array(w)
    if w.sum() <= 1e-6 or floor * w.size >= 1:
        return
    z = w[:, None] / w.sum()
    resp = Responsibilities(z * w.sum(), np.arange(1))
    pis = m_step_pi(resp, floor=floor)
    assert pis.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(pis >= floor - 1e-15)
    # brute force over which components sit on the floor
    obj = lambda p: float(np.sum(w[w > 0] * np.log(p[w > 0])))
    best = -np.inf
    for mask in itertools.product([False, True], repeat=w.size):
        pinned = np.array(mask)
        if pinned.all() or w[~pinned].sum() == 0:
            continue
        cand = np.where(pinned, floor, (1 - floor * pinned.sum()) * w / w[~pinned].sum())
        if np.all(cand >= floor - 1e-15):
            best = max(best, obj(cand))
    assert obj(pis) >= best - 1e-9


@pytest.mark.parametrize("gamma", [-2.0, -0.4, 0.3, 1.5])
def test_gamma_objective_derivatives(small_ds, gamma, rng):
    y = small_ds.counts[3:]
    w = rng.uniform(0, 1, y.shape[0])
    g, d1, d2 = gamma_objective(gamma, y, w, small_ds.x)
    h = 1e-5
    gp = gamma_objective(gamma + h, y, w, small_ds.x)[0]
    gm = gamma_objective(gamma - h, y, w, small_ds.x)[0]
    assert d1 == pytest.approx((gp - gm) / (2 * h), rel=1e-6, abs=1e-6)
    assert d2 == pytest.approx((gp - 2 * g + gm) / h**2, rel=1e-4, abs=1e-3)
    assert d2 < 0


def test_m_step_gamma_maximizes_each_component(small_ds):
    params = MixtureParams([0.0, -0.5, 0.5], [0.5, 0.25, 0.25])
    resp = e_step(small_ds, params)
    new = m_step_gamma(small_ds, resp, current=params.gammas)
    assert new[0] == 0.0
    y = small_ds.counts[resp.rows]
    for k in (1, 2):
        opt = minimize_scalar(lambda b: -gamma_objective(b, y, resp.z_hat[k], small_ds.x)[0],
                              bounds=(-20, 20), method="bounded", options={"xatol": 1e-10})
        assert new[k] == pytest.approx(opt.x, abs=1e-5)
        assert abs(gamma_objective(new[k], y, resp.z_hat[k], small_ds.x)[1]) <= 1e-8


def test_m_step_gamma_flags_empty(small_ds):
    resp = e_step(small_ds, MixtureParams([0.0, 1.0], [0.5, 0.5]))
    z = resp.z_hat.copy()
    z[0] += z[1]
    z[1] = 0.0
    with pytest.warns(EmptyComponentWarning):
        new = m_step_gamma(small_ds, Responsibilities(z, resp.rows), current=[0.0, 1.0])
    assert new.tolist() == [0.0, 1.0]


@settings(max_examples=25, deadline=None)
@given(gammas=gamma_lists, seed=st.integers(0, 10_000))
def test_one_em_step_does_not_decrease_loglik(small_ds, gammas, seed):
    rng = np.random.default_rng(seed)
    params = MixtureParams.canonical([0.0] + gammas, rng.dirichlet(np.ones(len(gammas) + 1)) * 0.98
                                     + 0.02 / (len(gammas) + 1))
    before = log_likelihood(small_ds, params)
    resp = e_step(small_ds, params)
    pis = m_step_pi(resp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyComponentWarning)
        g = m_step_gamma(small_ds, resp, current=params.gammas)
    if np.unique(g).size < g.size or np.any(pis <= 0):
        return
    after = log_likelihood(small_ds, MixtureParams.canonical(g, pis))
    assert after >= before - 1e-8


def test_fit_em_basics(small_ds):
    fit = fit_em(small_ds, 2, seed=0, restarts=3)
    assert fit.converged
    assert fit.n_obs == small_ds.M - 3
    assert fit.n_params == n_free_params(2) == 4
    assert np.all(np.diff(fit.loglik_trace) >= -1e-8)
    assert fit.loglik == pytest.approx(log_likelihood(small_ds, fit.params), abs=1e-9)
    assert fit.aic == pytest.approx(-2 * fit.loglik + 2 * 4)
    assert fit.bic == pytest.approx(-2 * fit.loglik + 4 * math.log(small_ds.M - 3))
    assert np.all(np.diff(fit.params.gammas[1:]) > 0)
    assert len(fit.restart_logliks) == 3
    assert fit.loglik == pytest.approx(max(fit.restart_logliks))
    d = fit.to_dict()
    assert set(d) == {"gammas", "pis", "loglik", "aic", "bic", "iterations", "converged"}


def test_fit_em_is_deterministic(small_ds):
    a = fit_em(small_ds, 1, seed=4, restarts=2)
    b = fit_em(small_ds, 1, seed=4, restarts=2)
    assert a.loglik_trace == b.loglik_trace
    assert np.array_equal(a.params.gammas, b.params.gammas)


def test_fit_em_iteration_cap(small_ds):
    fit = fit_em(small_ds, 2, max_iter=1, restarts=1)
    assert not fit.converged
    assert fit.iterations == 1
    assert len(fit.loglik_trace) == 2


def test_fit_em_pis_respect_floor(wheat):
    # data with no signal: the non-null components should shrink toward the floor, not below it
    y = np.random.default_rng(0).multinomial(30, [0.2] * 5, size=200)
    fit = fit_em(CountDataset(wheat, y), 2, restarts=1, max_iter=200)
    assert np.all(fit.params.pis >= PI_FLOOR * (1 - 1e-9))


def test_fit_em_errors(wheat, small_ds):
    with pytest.raises(FitError):
        fit_em(CountDataset(wheat, np.zeros((4, 5), dtype=int)), 1)
    with pytest.raises(ValueError):
        fit_em(small_ds, 0)
    with pytest.raises(ValueError):
        fit_em(small_ds, 2, init=MixtureParams([0.0, 1.0], [0.5, 0.5]))


def test_information_criteria():
    aic, bic = information_criteria(-100.0, 3, 778)
    assert aic == 212.0
    assert bic == pytest.approx(200.0 + 6 * math.log(778))


def test_initial_params_are_valid(small_ds):
    p = initial_params(small_ds, 3)
    assert p.K == 3 and p.gammas[0] == 0.0
    assert np.all(np.abs(p.gammas[1:]) >= 0.05)
    q = initial_params(small_ds, 3, rng=np.random.default_rng(1))
    assert q.K == 3
