import math

import numpy as np
import pytest
from scipy import stats

from hiermeta.datamodel import CohortData, ValidationError, load_cohort_csv, standardize_responses
from hiermeta.onestage import OneStageOptions, OneStageParams, fit_onestage, marginal_loglik
from hiermeta.sim import Scenario, generate_dataset
from hiermeta.stage1 import run_stage1
from hiermeta.stage2 import pool_within_cohort

from conftest import COHORTS, make_cohort
from oracles import mvn_logpdf


def dense_loglik(params, data):
    """Stack every observed cell, build the full covariance, evaluate one Gaussian density."""
    rows, mean, idx = [], [], []
    for j in range(data.n_individuals):
        for k in range(data.n_endpoints):
            if data.observed[j, k]:
                rows.append(data.responses[j, k])
                mean.append(params.alpha[k] + params.beta * data.exposure[j] + params.gamma[k] * data.propensity[j])
                idx.append((j, k))
    n = len(rows)
    V = np.zeros((n, n))
    for a, (j, k) in enumerate(idx):
        for b, (i, l) in enumerate(idx):
            if i == j:
                V[a, b] += params.Sigma[k, l]
            if k == l:
                # B_k is shared by all individuals
                V[a, b] += params.phi * data.exposure[j] * data.exposure[i]
    return mvn_logpdf(np.array(rows), np.array(mean), V)


def test_k1_hand_computed():
    A = np.array([0.5, -1.0, 2.0, 0.3])
    S = np.array([0.1, 0.7, 0.2, 0.9])
    y = np.array([1.0, -0.5, 3.0, 0.8])
    d = CohortData("c", A, S, y[:, None], np.ones((4, 1), bool), ["y"])
    p = OneStageParams(alpha=[0.2], gamma=[0.5], beta=1.1, phi=0.3, Sigma=[[0.8]])
    mu = 0.2 + 1.1 * A + 0.5 * S
    V = 0.8 * np.eye(4) + 0.3 * np.outer(A, A)
    r = y - mu
    expect = -0.5 * (4 * math.log(2 * math.pi) + math.log(np.linalg.det(V)) + r @ np.linalg.inv(V) @ r)
    assert marginal_loglik(p, d) == pytest.approx(expect, rel=1e-12)


def test_separable_without_heterogeneity():
    rng = np.random.default_rng(0)
    d = make_cohort(rng, J=40, K=3)
    s2 = np.array([0.7, 1.3, 2.0])
    p = OneStageParams(alpha=[0.1, 0.2, 0.3], gamma=[1.0, 0.5, 0.0], beta=1.4, phi=0.0, Sigma=np.diag(s2))
    expect = 0.0
    for k in range(3):
        mu = p.alpha[k] + p.beta * d.exposure + p.gamma[k] * d.propensity
        expect += stats.norm.logpdf(d.responses[:, k], mu, math.sqrt(s2[k])).sum()
    assert marginal_loglik(p, d) == pytest.approx(expect, rel=1e-12)


def test_k1_ols_maximum():
    d = make_cohort(np.random.default_rng(1), J=60, K=1)
    fit = run_stage1(d).fits[0]
    a, b, g = fit.theta_hat
    p = OneStageParams(alpha=[a], gamma=[g], beta=b, phi=0.0, Sigma=[[fit.sigma2_hat]])
    n = d.n_individuals
    assert marginal_loglik(p, d) == pytest.approx(-n / 2 * (math.log(2 * math.pi * fit.sigma2_hat) + 1), rel=1e-12)


@pytest.mark.parametrize("missing", [0.0, 0.3])
def test_dense_oracle_k2_j5(missing):
    rng = np.random.default_rng(5)
    J = 5
    A, S = rng.normal(size=J), rng.normal(size=J)
    Y = rng.normal(size=(J, 2))
    R = np.ones((J, 2), bool)
    if missing:
        R[2, 1] = False
    d = CohortData("c", A, S, Y, R, ["a", "b"])
    p = OneStageParams(alpha=[0.3, -0.1], gamma=[0.4, 0.9], beta=0.7, phi=0.45,
                       Sigma=np.array([[1.2, 0.5], [0.5, 0.9]]))
    assert marginal_loglik(p, d) == pytest.approx(dense_loglik(p, d), rel=1e-10)


def test_dense_oracle_random_patterns():
    rng = np.random.default_rng(8)
    d = make_cohort(rng, J=12, K=3, missing=0.25)
    W = rng.normal(size=(3, 3))
    p = OneStageParams(alpha=rng.normal(size=3), gamma=rng.normal(size=3), beta=0.4, phi=0.8,
                       Sigma=W @ W.T + np.eye(3))
    assert marginal_loglik(p, d) == pytest.approx(dense_loglik(p, d), rel=1e-10)


def test_known_truth_no_heterogeneity():
    s = Scenario(K=5, tau2=0.0, n=500, sigma=tuple(map(tuple, np.eye(5))), seed=3)
    fit = fit_onestage(generate_dataset(s, 0))
    assert fit.converged
    assert abs(fit.beta_tilde - 3.0) < 3 * fit.se_tilde
    assert fit.phi_tilde < 0.05


@pytest.mark.parametrize("path", COHORTS, ids=lambda p: p.stem)
def test_agrees_with_two_stage_on_fixture(path):
    d, _ = standardize_responses(load_cohort_csv(path, "exposure", "propensity", ignore=["id"]))
    two = pool_within_cohort(run_stage1(d).block)
    one = fit_onestage(d)
    assert one.converged
    assert abs(one.beta_tilde - two.beta_hat) < 0.1


def test_k1_pinned_phi_equals_ols():
    d = make_cohort(np.random.default_rng(2), J=80, K=1)
    fit = fit_onestage(d, OneStageOptions(phi_fixed=0.0))
    assert fit.beta_tilde == pytest.approx(run_stage1(d).block.B_hat[0], abs=1e-6)
    assert fit.phi_tilde == 0.0


@pytest.mark.parametrize("seed,missing", [(0, 0.0), (1, 0.2)])
def test_dominates_two_stage_plugin(seed, missing):
    d = make_cohort(np.random.default_rng(seed), J=150, K=3, beta=(1.0, 1.6, 0.7), missing=missing)
    st1 = run_stage1(d)
    st2 = pool_within_cohort(st1.block)
    plug = OneStageParams(
        alpha=[f.theta_hat[0] for f in st1.fits],
        gamma=[f.theta_hat[2] for f in st1.fits],
        beta=st2.beta_hat,
        phi=st2.phi_hat,
        Sigma=st1.rescov.Sigma_hat,
    )
    fit = fit_onestage(d)
    assert fit.loglik >= marginal_loglik(plug, d) - 1e-6
    assert fit.loglik == pytest.approx(marginal_loglik(fit.params, d), abs=1e-8)


def test_endpoint_permutation():
    d = make_cohort(np.random.default_rng(4), J=150, K=3, beta=(1.0, 1.6, 0.7), missing=0.1)
    perm = [2, 0, 1]
    a = fit_onestage(d)
    b = fit_onestage(d.select_endpoints(perm))
    assert b.beta_tilde == pytest.approx(a.beta_tilde, abs=1e-6)
    assert b.phi_tilde == pytest.approx(a.phi_tilde, abs=1e-6)
    assert b.loglik == pytest.approx(a.loglik, abs=1e-6)
    np.testing.assert_allclose(b.Sigma_tilde, a.Sigma_tilde[np.ix_(perm, perm)], rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(b.alpha, a.alpha[perm], rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(b.gamma, a.gamma[perm], rtol=1e-4, atol=1e-6)


def test_sigma_positive_definite_and_contrasts():
    fit = fit_onestage(make_cohort(np.random.default_rng(6), J=100, K=3, missing=0.2))
    assert np.linalg.eigvalsh(fit.Sigma_tilde).min() > 0
    np.testing.assert_allclose(fit.Sigma_tilde, fit.Sigma_tilde.T)
    assert fit.phi_tilde >= 0
    assert math.isfinite(fit.loglik)
    assert len(fit.fixed_effects) == 6
    np.testing.assert_allclose(fit.tau, fit.alpha[1:] - fit.alpha[0])


def test_endpoint_cap():
    d = make_cohort(np.random.default_rng(0), J=30, K=3)
    with pytest.raises(ValidationError, match="variance parameters"):
        fit_onestage(d, OneStageOptions(max_endpoints=2))
