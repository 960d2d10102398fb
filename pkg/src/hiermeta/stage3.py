"""Random-effects synthesis of independent cohort-level estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import ValidationError
from .optimize import maximize_on_interval
from .stage2 import ConvergenceOptions

LOG2PI = math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class GlobalPooled:
    beta_global: float
    se_global: float
    eta2_hat: float
    se_eta2: float
    cohort_weights: np.ndarray
    estimates: np.ndarray
    variances: np.ndarray
    labels: tuple[str, ...]
    iterations: int
    converged: bool
    eta2_dl: float
    method: str = "two-stage"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "beta": self.beta_global,
            "se": self.se_global,
            "eta2": self.eta2_hat,
            "se_eta2": self.se_eta2,
            "eta2_dersimonian_laird": self.eta2_dl,
            "iterations": self.iterations,
            "converged": self.converged,
            "cohorts": [
                {"cohort_id": c, "estimate": float(b), "se": float(math.sqrt(v)), "weight": float(w)}
                for c, b, v, w in zip(self.labels, self.estimates, self.variances, self.cohort_weights)
            ],
        }


def log_pl(beta: float, eta2, y: np.ndarray, v: np.ndarray):
    """Cross-cohort log pseudo-likelihood; vectorized over ``eta2``."""
    eta2 = np.asarray(eta2, dtype=float)
    t = v[:, None] + np.atleast_1d(eta2)[None, :]
    out = -0.5 * (len(y) * LOG2PI + np.log(t).sum(0) + ((y - beta)[:, None] ** 2 / t).sum(0))
    return out if eta2.ndim else float(out[0])


def _weighted(eta2: float, y, v):
    w = 1 / (v + eta2)
    w = w / w.sum()
    return float(w @ y), w


def dersimonian_laird(y, v) -> float:
    """Method-of-moments between-study variance."""
    y = np.asarray(y, float)
    v = np.asarray(v, float)
    if len(y) < 2:
        return 0.0
    w = 1 / v
    mu = (w @ y) / w.sum()
    Q = float(w @ (y - mu) ** 2)
    c = w.sum() - (w ** 2).sum() / w.sum()
    return float(max(0.0, (Q - (len(y) - 1)) / c))


def profile_log_pl(eta2: float, y, v) -> float:
    beta, _ = _weighted(eta2, y, v)
    return log_pl(beta, eta2, y, v)


def _eta2_se(eta2: float, y, v) -> float:
    h = 1e-4 * (1 + eta2)
    if eta2 >= h:
        f = [profile_log_pl(eta2 + d, y, v) for d in (-h, 0.0, h)]
        curv = (f[0] - 2 * f[1] + f[2]) / h ** 2
    else:
        f = [profile_log_pl(eta2 + d, y, v) for d in (0.0, h, 2 * h, 3 * h)]
        curv = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h ** 2
    return math.sqrt(-1 / curv) if curv < 0 else float("nan")


def pool_across_cohorts(
    estimates: Sequence[float],
    variances: Sequence[float],
    labels: Sequence[str] | None = None,
    opts: ConvergenceOptions | None = None,
    method: str = "two-stage",
) -> GlobalPooled:
    opts = opts or ConvergenceOptions()
    y = np.asarray(estimates, dtype=float).ravel()
    v = np.asarray(variances, dtype=float).ravel()
    I = len(y)
    labels = tuple(labels) if labels is not None else tuple(f"cohort_{i + 1}" for i in range(I))
    if I == 0:
        raise ValidationError("no cohort estimates to pool")
    if len(v) != I or len(labels) != I:
        raise ValidationError("estimates, variances and labels must have equal length")
    for lab, vi in zip(labels, v):
        if not vi > 0 or not math.isfinite(vi):
            raise ValidationError(f"cohort {lab!r} has nonpositive variance {vi}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("non-finite cohort estimate")

    spread = float(np.ptp(y)) if I > 1 else 0.0
    eta_max = opts.phi_max if opts.phi_max is not None else max(100 * v.max(), I * spread ** 2 + v.sum())

    def score(beta, e):
        t = v + e
        return float(-0.5 * (np.sum(1 / t) - np.sum((y - beta) ** 2 / t ** 2)))

    eta2 = 0.0
    beta, w = _weighted(eta2, y, v)
    converged = False
    it = 0
    while it < opts.max_iter:
        it += 1
        f = lambda e, b=beta: log_pl(b, e, y, v)
        new = maximize_on_interval(f, 0.0, eta_max, tol=opts.phi_tol, score=lambda e, b=beta: score(b, e))
        if f(new) < f(eta2):
            new = eta2
        beta_new, w = _weighted(new, y, v)
        done = abs(beta_new - beta) < opts.tol_beta and abs(new - eta2) < opts.tol_phi
        beta, eta2 = beta_new, new
        if done:
            converged = True
            break

    return GlobalPooled(
        beta_global=beta,
        se_global=float(np.sum(1 / (v + eta2)) ** -0.5),
        eta2_hat=eta2,
        se_eta2=_eta2_se(eta2, y, v),
        cohort_weights=w,
        estimates=y,
        variances=v,
        labels=labels,
        iterations=it,
        converged=converged,
        eta2_dl=float(dersimonian_laird(y, v)),
        method=method,
    )
