"""Independent reference computations used by the tests.

Nothing here calls into the package's numerical code; each function is a
brute-force or closed-form version of something the package does faster.
"""
import math

import numpy as np

from hiermeta.datamodel import CohortData


def cofactor_inverse3(M):
    M = np.asarray(M, float)
    a, b, c = M[0]
    d, e, f = M[1]
    g, h, i = M[2]
    cof = np.array([
        [e * i - f * h, -(d * i - f * g), d * h - e * g],
        [-(b * i - c * h), a * i - c * g, -(a * h - b * g)],
        [b * f - c * e, -(a * f - c * d), a * e - b * d],
    ])
    det = a * cof[0, 0] + b * cof[0, 1] + c * cof[0, 2]
    return cof.T / det


def det3(M):
    (a, b, c), (d, e, f), (g, h, i) = np.asarray(M, float)
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def normal_equations(X, y):
    return cofactor_inverse3(X.T @ X) @ (X.T @ y)


def mvn_logpdf(x, mean, cov):
    """Dense Gaussian log-density via slogdet and solve."""
    x = np.asarray(x, float) - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (len(x) * math.log(2 * math.pi) + logdet + x @ np.linalg.solve(cov, x))


def pl_surface(betas, phis, B, V):
    """Within-cohort pseudo-log-likelihood on a (phi, beta) grid by dense evaluation."""
    K = len(B)
    out = np.empty((len(phis), len(betas)))
    R = B[None, :] - betas[:, None]
    for i, p in enumerate(phis):
        Psi = V + p * np.eye(K)
        sign, logdet = np.linalg.slogdet(Psi)
        P = np.linalg.inv(Psi)
        q = np.einsum("bk,kl,bl->b", R, P, R)
        out[i] = -0.5 * (K * math.log(2 * math.pi) + logdet + q)
    return out


def grid_argmax(B, V, n=2000, beta_range=None, phi_range=None):
    """Maximize the pseudo-likelihood over an n x n grid; returns (beta, phi, beta_step, phi_step)."""
    b0, b1 = beta_range if beta_range else (B.min(), B.max())
    p0, p1 = phi_range
    betas = np.linspace(b0, b1, n)
    phis = np.linspace(p0, p1, n)
    surf = pl_surface(betas, phis, B, V)
    i, j = np.unravel_index(np.argmax(surf), surf.shape)
    return betas[j], phis[i], betas[1] - betas[0], phis[1] - phis[0]


def resimulate_gamma12(J=200, missing=0.3, reps=5000, rho=0.5, seed=0, run_stage1=None):
    """Empirical covariance of (B1_hat, B2_hat) over resimulated noise and missingness, X fixed.

    Returns (empirical cov, its Monte Carlo SE, mean model-based J^-1 Gamma_12).
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(size=J)
    S = 0.5 * A + rng.normal(size=J)
    L = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    est = np.empty((reps, 2))
    model = np.empty(reps)
    for r in range(reps):
        E = rng.standard_normal((J, 2)) @ L.T
        Y = 1.0 + A[:, None] * np.array([1.0, -1.0]) + 0.5 * S[:, None] + E
        R = np.ones((J, 2), bool)
        R[:, 1] = rng.uniform(size=J) >= missing
        d = CohortData("sim", A, S, Y, R, ["y1", "y2"])
        res = run_stage1(d)
        est[r] = res.block.B_hat
        model[r] = res.block.sampling_cov[0, 1]
    c = est - est.mean(0)
    prod = c[:, 0] * c[:, 1]
    emp = prod.sum() / (reps - 1)
    mcse = prod.std(ddof=1) / math.sqrt(reps)
    return emp, mcse, model.mean()


def random_instance(rng, K, correlated):
    """Small pooling instance: B in [0, 1) and a sampling covariance with variances in [0.02, 0.3)."""
    B = rng.uniform(0, 1, K)
    v = rng.uniform(0.02, 0.3, K)
    if correlated:
        W = rng.normal(size=(K, K + 2))
        C = W @ W.T
        d = np.sqrt(np.diag(C))
        C = C / np.outer(d, d)
    else:
        C = np.eye(K)
    V = np.sqrt(np.outer(v, v)) * C
    return B, (V + V.T) / 2
