"""Pooling of correlated endpoint effects within one cohort.

The pooled effect beta and the between-endpoint heterogeneity phi are
estimated by alternating an inverse-variance weighted mean (diagonal of
Psi(phi) = Gamma/J + phi I) with a maximization of the Gaussian
pseudo-likelihood of B_hat over phi.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import EffectBlock, NumericalError, ValidationError
from .optimize import maximize_on_interval

LOG2PI = math.log(2 * math.pi)


class EvaluationError(NumericalError):
    """Psi(phi) is not positive definite."""


@dataclass(frozen=True)
class ConvergenceOptions:
    tol_beta: float = 1e-8
    tol_phi: float = 1e-8
    max_iter: int = 500
    phi_tol: float = 1e-10  # scalar search tolerance
    phi_max: float | None = None
    weighting: str = "diagonal"  # or "full" (generalized-inverse GLS weights)


@dataclass(frozen=True, eq=False)
class CohortPooled:
    beta_hat: float
    se_beta: float
    phi_hat: float
    weights: np.ndarray
    iterations: int
    converged: bool
    pl_trace: tuple[tuple[float, float, float], ...]
    naive_se: float = float("nan")
    cohort_id: str = ""
    endpoint_names: tuple[str, ...] = ()
    B_hat: np.ndarray = field(default_factory=lambda: np.empty(0))
    se_endpoints: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def variance(self) -> float:
        return self.se_beta ** 2

    def to_dict(self) -> dict:
        return {
            "cohort_id": self.cohort_id,
            "method": "two-stage",
            "beta": self.beta_hat,
            "se": self.se_beta,
            "phi": self.phi_hat,
            "naive_se": self.naive_se,
            "weights": self.weights.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": [list(t) for t in self.pl_trace],
            "endpoints": [
                {"name": n, "estimate": float(b), "se": float(s)}
                for n, b, s in zip(self.endpoint_names, self.B_hat, self.se_endpoints)
            ],
        }


class _Spectrum:
    """Eigen-decomposition of J^-1 Gamma so that Psi(phi) is diagonal in a fixed basis."""

    def __init__(self, block: EffectBlock):
        lam, U = np.linalg.eigh(block.sampling_cov)
        self.lam = lam
        self.U = U
        self.B = block.B_hat
        self.K = block.K

    def coords(self, beta: float) -> np.ndarray:
        return self.U.T @ (self.B - beta)

    def loglik(self, beta: float, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        d = self.lam[:, None] + np.atleast_1d(phi)[None, :]
        c2 = self.coords(beta)[:, None] ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -0.5 * (self.K * LOG2PI + np.log(d).sum(0) + (c2 / d).sum(0))
        out = np.where((d > 0).all(0), out, -np.inf)
        return out if phi.ndim else float(out[0])

    def score_phi(self, beta: float, phi: float) -> float:
        d = self.lam + phi
        if np.any(d <= 0):
            raise EvaluationError("Psi(phi) not positive definite")
        c2 = self.coords(beta) ** 2
        return float(-0.5 * (np.sum(1 / d) - np.sum(c2 / d ** 2)))


def pseudo_loglik(beta: float, phi: float, block: EffectBlock) -> float:
    """Gaussian log pseudo-likelihood of B_hat ~ MVN(beta 1, J^-1 Gamma + phi I)."""
    if phi < 0:
        raise ValueError("phi must be nonnegative")
    Psi = block.sampling_cov + phi * np.eye(block.K)
    try:
        L = np.linalg.cholesky(Psi)
    except np.linalg.LinAlgError:
        raise EvaluationError(f"Psi({phi}) is not positive definite") from None
    z = np.linalg.solve(L, block.B_hat - beta)
    return float(-0.5 * (block.K * LOG2PI + 2 * np.log(np.diag(L)).sum() + z @ z))


def weighted_beta(phi: float, block: EffectBlock) -> tuple[float, np.ndarray]:
    """Inverse-variance weighted mean using only the diagonal of Psi(phi)."""
    v = np.diag(block.sampling_cov) + phi
    if np.any(v <= 0):
        raise NumericalError("nonpositive diagonal variance in Psi(phi)")
    w = 1 / v
    w = w / w.sum()
    return float(w @ block.B_hat), w


def gls_beta(phi: float, block: EffectBlock) -> tuple[float, np.ndarray]:
    """Generalized least squares weights 1' Psi^+ / (1' Psi^+ 1); may be negative."""
    Psi = block.sampling_cov + phi * np.eye(block.K)
    a = np.linalg.pinv(Psi, hermitian=True) @ np.ones(block.K)
    s = a.sum()
    if s == 0 or not np.isfinite(s):
        raise NumericalError("GLS weights undefined")
    w = a / s
    return float(w @ block.B_hat), w


def default_phi_max(block: EffectBlock) -> float:
    """Upper end of the phi search.

    Beyond K * range(B)^2 + tr(J^-1 Gamma) the phi-score is negative for every
    beta in the hull of B_hat, so the maximizer cannot lie further out.
    """
    v = np.diag(block.sampling_cov)
    spread = float(np.ptp(block.B_hat)) if block.K > 1 else 0.0
    return float(max(100 * v.max(), block.K * spread ** 2 + v.sum()))


def robust_se(w: np.ndarray, phi: float, block: EffectBlock) -> float:
    Psi = block.sampling_cov + phi * np.eye(block.K)
    var = float(w @ Psi @ w)
    if var <= 0:
        raise NumericalError(f"nonpositive sandwich variance {var}")
    return math.sqrt(var)


def pool_within_cohort(block: EffectBlock, opts: ConvergenceOptions | None = None) -> CohortPooled:
    opts = opts or ConvergenceOptions()
    if block.K == 0:
        raise ValidationError("no endpoints to pool")
    if opts.weighting not in ("diagonal", "full"):
        raise ValueError(f"unknown weighting {opts.weighting!r}")
    step = weighted_beta if opts.weighting == "diagonal" else gls_beta
    spectrum = _Spectrum(block)
    phi_max = opts.phi_max if opts.phi_max is not None else default_phi_max(block)

    def phi_step(beta: float, current: float) -> float:
        f = lambda p: spectrum.loglik(beta, p)
        g = lambda p: spectrum.score_phi(beta, p)
        new = maximize_on_interval(f, 0.0, phi_max, tol=opts.phi_tol, score=g)
        return new if f(new) >= f(current) else current

    phi = 0.0
    beta, w = step(phi, block)
    trace = [(beta, phi, spectrum.loglik(beta, phi))]
    converged = False
    it = 0
    while it < opts.max_iter:
        it += 1
        phi_new = phi_step(beta, phi)
        trace.append((beta, phi_new, spectrum.loglik(beta, phi_new)))
        beta_new, w = step(phi_new, block)
        trace.append((beta_new, phi_new, spectrum.loglik(beta_new, phi_new)))
        done = abs(beta_new - beta) < opts.tol_beta and abs(phi_new - phi) < opts.tol_phi
        beta, phi = beta_new, phi_new
        if done:
            converged = True
            break

    naive = math.sqrt(float(w ** 2 @ (np.diag(block.sampling_cov) + phi)))
    return CohortPooled(
        beta_hat=beta,
        se_beta=robust_se(w, phi, block),
        phi_hat=phi,
        weights=w,
        iterations=it,
        converged=converged,
        pl_trace=tuple(trace),
        naive_se=naive,
        cohort_id=block.cohort_id,
        endpoint_names=block.endpoint_names,
        B_hat=block.B_hat,
        se_endpoints=block.se,
    )
