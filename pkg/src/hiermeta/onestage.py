"""One-stage comparator: joint Gaussian ML for all endpoints of a cohort.

Model, for individual j and endpoint k:

    Y_jk = alpha_k + B_k A_j + gamma_k S_j + E_jk,
    B_k ~ N(beta, phi) independently, E_j ~ MVN(0, Sigma).

B_k is shared by every individual, so integrating it out gives the stacked
covariance ``V = blockdiag_j(Sigma[O_j, O_j]) + phi * Z Z'`` where column k
of Z holds A_j on the rows of endpoint k. The likelihood is evaluated with
the Woodbury identity; all sums over individuals are precomputed once per
missingness pattern, so one evaluation costs O(patterns * K^4) regardless of J.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .datamodel import CohortData, NumericalError, ValidationError
from .stage1 import run_stage1
from .stage2 import EvaluationError, pool_within_cohort

log = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)
GRAD_TOL = 1e-5  # on the per-observation negative log-likelihood


@dataclass(frozen=True)
class OneStageOptions:
    restarts: int = 5
    seed: int = 0
    spread: float = 0.5
    max_endpoints: int = 12
    maxiter: int = 2000
    phi_fixed: float | None = None


@dataclass(frozen=True, eq=False)
class OneStageParams:
    alpha: np.ndarray
    gamma: np.ndarray
    beta: float
    phi: float
    Sigma: np.ndarray


@dataclass(frozen=True, eq=False)
class OneStageFit:
    beta_tilde: float
    se_tilde: float
    phi_tilde: float
    Sigma_tilde: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    loglik: float
    converged: bool
    cohort_id: str = ""
    endpoint_names: tuple[str, ...] = ()
    n_starts: int = 0
    message: str = ""

    @property
    def tau(self) -> np.ndarray:
        """Intercept contrasts alpha_r - alpha_1."""
        return self.alpha[1:] - self.alpha[0]

    @property
    def zeta(self) -> np.ndarray:
        """Propensity-slope contrasts gamma_r - gamma_1."""
        return self.gamma[1:] - self.gamma[0]

    @property
    def fixed_effects(self) -> np.ndarray:
        """(alpha_1, tau, gamma_1, zeta)."""
        return np.concatenate([[self.alpha[0]], self.tau, [self.gamma[0]], self.zeta])

    @property
    def variance(self) -> float:
        return self.se_tilde ** 2

    @property
    def params(self) -> OneStageParams:
        return OneStageParams(self.alpha, self.gamma, self.beta_tilde, self.phi_tilde, self.Sigma_tilde)

    def to_dict(self) -> dict:
        return {
            "cohort_id": self.cohort_id,
            "method": "one-stage",
            "beta": self.beta_tilde,
            "se": self.se_tilde,
            "phi": self.phi_tilde,
            "Sigma": self.Sigma_tilde.tolist(),
            "alpha": self.alpha.tolist(),
            "gamma": self.gamma.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "endpoints": list(self.endpoint_names),
        }


class _Moments:
    """Per-pattern cross-product tensors of the stacked design, response and random-effect columns."""

    def __init__(self, data: CohortData):
        K = data.n_endpoints
        self.K = K
        self.p = 2 * K + 1
        self.N = int(data.observed.sum())
        A, S = data.exposure, data.propensity
        patterns: dict[tuple[int, ...], list[int]] = {}
        for j, row in enumerate(data.observed):
            patterns.setdefault(tuple(np.flatnonzero(row)), []).append(j)
        self.groups = []
        for P, rows in sorted(patterns.items()):
            if not P:
                continue
            rows = np.asarray(rows)
            m, n = len(P), len(rows)
            X = np.zeros((n, m, self.p))
            Z = np.zeros((n, m, K))
            for a, k in enumerate(P):
                X[:, a, k] = 1.0
                X[:, a, K + k] = S[rows]
                X[:, a, 2 * K] = A[rows]
                Z[:, a, k] = A[rows]
            y = data.responses[np.ix_(rows, P)]
            self.groups.append((
                np.asarray(P), n,
                np.einsum("jap,jbq->abpq", X, X),
                np.einsum("jap,jbq->abpq", X, Z),
                np.einsum("jap,jbq->abpq", Z, Z),
                np.einsum("jap,jb->abp", X, y),
                np.einsum("jap,jb->abp", Z, y),
                np.einsum("ja,jb->ab", y, y),
            ))

    def quad(self, Sigma: np.ndarray, phi: float):
        """(log det V, X'V^-1 X, X'V^-1 y, y'V^-1 y)."""
        K, p = self.K, self.p
        XX = np.zeros((p, p)); XZ = np.zeros((p, K)); ZZ = np.zeros((K, K))
        Xy = np.zeros(p); Zy = np.zeros(K); yy = 0.0
        logdet = 0.0
        for P, n, tXX, tXZ, tZZ, tXy, tZy, tyy in self.groups:
            try:
                L = np.linalg.cholesky(Sigma[np.ix_(P, P)])
            except np.linalg.LinAlgError:
                raise EvaluationError("Sigma is not positive definite") from None
            Linv = np.linalg.inv(L)
            Q = Linv.T @ Linv
            logdet += 2 * n * np.log(np.diag(L)).sum()
            XX += np.einsum("ab,abpq->pq", Q, tXX)
            XZ += np.einsum("ab,abpq->pq", Q, tXZ)
            ZZ += np.einsum("ab,abpq->pq", Q, tZZ)
            Xy += np.einsum("ab,abp->p", Q, tXy)
            Zy += np.einsum("ab,abp->p", Q, tZy)
            yy += float(np.einsum("ab,ab->", Q, tyy))
        if phi < 0:
            raise EvaluationError("phi must be nonnegative")
        if phi > 0:
            C = np.eye(K) + phi * ZZ
            sign, ld = np.linalg.slogdet(C)
            if sign <= 0:
                raise EvaluationError("I + phi Z'D^-1 Z is not positive definite")
            logdet += ld
            F = phi * np.linalg.inv(C)
            F = (F + F.T) / 2
            XX = XX - XZ @ F @ XZ.T
            Xy = Xy - XZ @ F @ Zy
            yy = yy - Zy @ F @ Zy
        return logdet, (XX + XX.T) / 2, Xy, yy

    def loglik(self, Sigma, phi, b) -> float:
        logdet, XX, Xy, yy = self.quad(Sigma, phi)
        rr = yy - 2 * b @ Xy + b @ XX @ b
        return -0.5 * (self.N * LOG2PI + logdet + rr)

    def profile(self, Sigma, phi, beta: float | None = None):
        """Log-likelihood maximized over the fixed effects (all, or all but a given beta)."""
        logdet, XX, Xy, yy = self.quad(Sigma, phi)
        if beta is None:
            try:
                b = np.linalg.solve(XX, Xy)
            except np.linalg.LinAlgError:
                raise EvaluationError("singular GLS system") from None
        else:
            i = self.p - 1
            sub = slice(0, i)
            rhs = Xy[sub] - XX[sub, i] * beta
            b = np.append(np.linalg.solve(XX[sub, sub], rhs), beta)
        rr = yy - 2 * b @ Xy + b @ XX @ b
        return -0.5 * (self.N * LOG2PI + logdet + rr), b


def marginal_loglik(params: OneStageParams, data: CohortData) -> float:
    """Exact marginal log-likelihood of the observed responses with B_k integrated out."""
    b = np.concatenate([np.asarray(params.alpha, float), np.asarray(params.gamma, float), [params.beta]])
    return float(_Moments(data).loglik(np.asarray(params.Sigma, float), float(params.phi), b))


# log-Cholesky parameterization of Sigma
def _sigma_from(theta: np.ndarray, K: int) -> np.ndarray:
    L = np.zeros((K, K))
    L[np.tril_indices(K)] = theta
    L[np.diag_indices(K)] = np.exp(np.diag(L))
    return L @ L.T


def _theta_from(Sigma: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(Sigma)
    L[np.diag_indices(len(L))] = np.log(np.diag(L))
    return L[np.tril_indices(len(L))]


def _nearest_pd(S: np.ndarray, floor: float) -> np.ndarray:
    S = (S + S.T) / 2
    lam, U = np.linalg.eigh(S)
    return (U * np.maximum(lam, floor)) @ U.T


def _hessian(f, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    n = len(x)
    H = np.zeros((n, n))
    f0 = f(x)
    E = np.diag(h)
    for i in range(n):
        H[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / h[i] ** 2
        for k in range(i):
            H[i, k] = H[k, i] = (
                f(x + E[i] + E[k]) - f(x + E[i] - E[k]) - f(x - E[i] + E[k]) + f(x - E[i] - E[k])
            ) / (4 * h[i] * h[k])
    return H


def _projected_gradient(f, x: np.ndarray, free_phi: bool) -> float:
    g = np.empty(len(x))
    for i in range(len(x)):
        h = 1e-6 * (1 + abs(x[i]))
        lo = x.copy()
        hi = x.copy()
        hi[i] += h
        if free_phi and i == len(x) - 1 and x[i] - h < 0:
            g[i] = (f(hi) - f(x)) / h
            if x[i] == 0 and g[i] > 0:
                g[i] = 0.0
            continue
        lo[i] -= h
        g[i] = (f(hi) - f(lo)) / (2 * h)
    return float(np.max(np.abs(g)))


def fit_onestage(data: CohortData, opts: OneStageOptions | None = None) -> OneStageFit:
    """Maximum likelihood fit of the one-stage model.

    Fixed effects are profiled out by GLS; the variance parameters (log-Cholesky
    factor of Sigma and phi >= 0) are searched with L-BFGS-B, started from the
    two-stage estimates and from ``restarts`` seeded perturbations of them.
    """
    opts = opts or OneStageOptions()
    K = data.n_endpoints
    if K < 1:
        raise ValidationError("no endpoints")
    if K > opts.max_endpoints:
        raise ValidationError(
            f"{K} endpoints need {K * (K + 1) // 2 + 1} variance parameters; cap is K <= {opts.max_endpoints}"
        )
    st1 = run_stage1(data)  # also checks per-endpoint design rank
    # work on unit scale so the optimizer sees O(1) parameters
    scale = float(np.nanstd(data.responses[data.observed])) or 1.0
    sdata = data.replace(responses=data.responses / scale)
    mom = _Moments(sdata)
    nt = K * (K + 1) // 2

    Sig0 = _nearest_pd(st1.rescov.Sigma_hat / scale ** 2, 1e-3 * np.diag(st1.rescov.Sigma_hat).min() / scale ** 2)
    if opts.phi_fixed is None:
        phi0 = pool_within_cohort(st1.block).phi_hat / scale ** 2
    else:
        phi0 = opts.phi_fixed / scale ** 2
    free_phi = opts.phi_fixed is None

    # phi = t^2 keeps the search well scaled when phi is small relative to Sigma
    def unpack(x):
        return _sigma_from(x[:nt], K), (x[nt] ** 2 if free_phi else phi0)

    def objective(x):
        if np.any(np.abs(x[:nt]) > 50):
            return np.inf
        Sigma, phi = unpack(x)
        try:
            ll, _ = mom.profile(Sigma, phi)
        except (EvaluationError, np.linalg.LinAlgError):
            return np.inf
        return -ll / mom.N if np.isfinite(ll) else np.inf

    v_typ = float(np.mean(np.diag(st1.block.sampling_cov))) / scale ** 2
    rng = np.random.default_rng(opts.seed)
    starts = [(Sig0, phi0)]
    for _ in range(opts.restarts):
        u = rng.uniform(1 - opts.spread, 1 + opts.spread, size=K + 1)
        d = np.sqrt(u[:K])
        p = phi0 * u[K] if phi0 > 0 else v_typ * u[K]
        starts.append((Sig0 * np.outer(d, d), p))

    bounds = [(None, None)] * nt + ([(0.0, None)] if free_phi else [])
    best = None
    for Sig, p in starts:
        x0 = np.append(_theta_from(Sig), [math.sqrt(p)] if free_phi else [])
        res = minimize(objective, x0, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": opts.maxiter, "ftol": 1e-13, "gtol": 1e-9})
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun):
        raise NumericalError("one-stage likelihood could not be evaluated at any start")

    Sigma, phi = unpack(best.x)
    ll, b = mom.profile(Sigma, phi)
    stationary = bool(best.success) or _projected_gradient(objective, best.x, free_phi) < GRAD_TOL

    # observed information of beta: Schur complement of the profile Hessian over (beta, variance params)
    beta_s = b[-1]
    at_bound = (not free_phi) or phi < 1e-4 * (1 + phi)
    z0 = np.append([beta_s], best.x[:nt] if at_bound else best.x)

    def prof(z):
        Sg = _sigma_from(z[1:1 + nt], K)
        ph = phi if at_bound else z[1 + nt] ** 2
        return mom.profile(Sg, ph, beta=z[0])[0]

    h = 1e-4 * (1 + np.abs(z0))
    h[0] = 1e-4 * (1 + abs(beta_s * scale)) / scale
    H = _hessian(prof, z0, h)
    try:
        var_s = float(np.linalg.inv(-H)[0, 0])
    except np.linalg.LinAlgError:
        var_s = float("nan")
    if not var_s > 0:
        log.warning("cohort %s: observed information not positive definite", data.cohort_id)
        se = float("nan")
    else:
        se = math.sqrt(var_s) * scale

    return OneStageFit(
        beta_tilde=float(beta_s * scale),
        se_tilde=se,
        phi_tilde=float(phi * scale ** 2),
        Sigma_tilde=Sigma * scale ** 2,
        alpha=b[:K] * scale,
        gamma=b[K:2 * K] * scale,
        loglik=float(ll - mom.N * math.log(scale)),
        converged=stationary and math.isfinite(se),
        cohort_id=data.cohort_id,
        endpoint_names=data.endpoint_names,
        n_starts=len(starts),
        message=str(best.message),
    )
