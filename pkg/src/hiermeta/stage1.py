"""Per-endpoint least-squares fits and the missing-data adjusted covariance of the exposure effects."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    CohortData,
    EffectBlock,
    EndpointFit,
    InsufficientDataError,
    MIN_ENDPOINT_ROWS,
    NumericalError,
    SingularDesignError,
)

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
EXPOSURE = 1  # position of the exposure coefficient in (1, A, S)


class DesignMomentError(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class ResidualCovariance:
    Sigma_hat: np.ndarray
    n_pairwise: np.ndarray
    zero_overlap: tuple[tuple[int, int], ...] = ()
    cauchy_schwarz: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True, eq=False)
class DesignMoment:
    Omega_hat: np.ndarray

    @property
    def inverse(self) -> np.ndarray:
        return _inv_rank_checked(self.Omega_hat, DesignMomentError, "design moment")


@dataclass(frozen=True, eq=False)
class Stage1Result:
    cohort_id: str
    fits: tuple[EndpointFit, ...]
    rescov: ResidualCovariance
    omega: DesignMoment
    block: EffectBlock
    theta_cov: np.ndarray  # 3K x 3K covariance of sqrt(J)(theta_hat - theta)
    adjustment: np.ndarray  # n_kl / (n_k n_l)
    warnings: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        b = self.block
        return {
            "cohort_id": self.cohort_id,
            "J": int(b.J),
            "endpoints": [
                {
                    "name": f.name,
                    "alpha": float(f.theta_hat[0]),
                    "B": float(f.theta_hat[1]),
                    "gamma": float(f.theta_hat[2]),
                    "se_B": float(b.se[f.k]),
                    "sigma2": float(f.sigma2_hat),
                    "n": int(f.n_k),
                }
                for f in self.fits
            ],
            "Gamma": b.Gamma_hat.tolist(),
            "n_pairwise": b.n_pairwise.tolist(),
            "Sigma": self.rescov.Sigma_hat.tolist(),
            "Omega": self.omega.Omega_hat.tolist(),
            "warnings": list(self.warnings),
        }


def _inv_rank_checked(M: np.ndarray, exc: type[Exception], what: str) -> np.ndarray:
    U, s, Vt = np.linalg.svd(M)
    if s[0] <= 0 or s[-1] <= RANK_TOL * s[0]:
        raise exc(f"{what} is rank deficient (singular values {s})")
    return (Vt.T / s) @ U.T


def fit_endpoint(data: CohortData, k: int) -> EndpointFit:
    """Least squares of endpoint ``k`` on (1, A, S) over its observed rows.

    The residual variance uses divisor n_k (maximum likelihood).
    """
    name = data.endpoint_names[k]
    rows = data.observed[:, k]
    n_k = int(rows.sum())
    if n_k < MIN_ENDPOINT_ROWS:
        raise InsufficientDataError(f"endpoint {name!r}: {n_k} rows, need {MIN_ENDPOINT_ROWS}")
    X = data.design[rows]
    y = data.responses[rows, k]
    XtX_inv = _inv_rank_checked(X.T @ X, SingularDesignError, f"design for endpoint {name!r}")
    theta = XtX_inv @ (X.T @ y)
    resid = y - X @ theta
    return EndpointFit(k=k, theta_hat=theta, sigma2_hat=float(resid @ resid / n_k), n_k=n_k, name=name)


def _residual_matrix(data: CohortData, fits) -> np.ndarray:
    X = data.design
    E = np.zeros(data.responses.shape)
    for f in fits:
        r = data.responses[:, f.k] - X @ f.theta_hat
        E[:, f.k] = np.where(data.observed[:, f.k], r, 0.0)
    return E


def estimate_residual_covariance(data: CohortData, fits) -> ResidualCovariance:
    """Pairwise-available residual covariance: sigma_kl averages over rows where both k and l are seen."""
    fits = sorted(fits, key=lambda f: f.k)
    if len(fits) != data.n_endpoints:
        raise ValueError("need one fit per endpoint")
    E = _residual_matrix(data, fits)
    npair = data.n_pairwise
    cross = E.T @ E
    with np.errstate(divide="ignore", invalid="ignore"):
        Sigma = np.where(npair > 0, cross / np.maximum(npair, 1), 0.0)
    Sigma = (Sigma + Sigma.T) / 2
    zero, cs = [], []
    K = data.n_endpoints
    for k in range(K):
        for l in range(k + 1, K):
            if npair[k, l] == 0:
                log.warning("cohort %s: endpoints %s and %s never observed together; covariance set to 0",
                            data.cohort_id, data.endpoint_names[k], data.endpoint_names[l])
                zero.append((k, l))
            elif abs(Sigma[k, l]) > np.sqrt(Sigma[k, k] * Sigma[l, l]) * (1 + 1e-8):
                cs.append((k, l))
    return ResidualCovariance(Sigma_hat=Sigma, n_pairwise=npair, zero_overlap=tuple(zero),
                              cauchy_schwarz=tuple(cs))


def design_moment(data: CohortData) -> DesignMoment:
    X = data.design
    return DesignMoment(Omega_hat=X.T @ X / data.n_individuals)


def adjustment_factors(npair: np.ndarray) -> np.ndarray:
    n = np.diag(npair).astype(float)
    return npair / np.outer(n, n)


def _pair_scale(data: CohortData, rescov: ResidualCovariance) -> np.ndarray:
    return rescov.Sigma_hat * data.n_individuals * adjustment_factors(rescov.n_pairwise)


def theta_covariance(data: CohortData, rescov: ResidualCovariance) -> np.ndarray:
    """3K x 3K covariance of sqrt(J)(theta_hat - theta).

    Block (k, l) is sigma_kl * Omega^-1 * J n_kl / (n_k n_l).
    """
    Oinv = design_moment(data).inverse
    return np.kron(_pair_scale(data, rescov), (Oinv + Oinv.T) / 2)


def effect_covariance(data: CohortData, fits, rescov: ResidualCovariance) -> EffectBlock:
    """Exposure-coefficient part of :func:`theta_covariance` packaged with B_hat."""
    fits = sorted(fits, key=lambda f: f.k)
    Oinv = design_moment(data).inverse
    Gamma = _pair_scale(data, rescov) * Oinv[EXPOSURE, EXPOSURE]
    return EffectBlock(
        B_hat=np.array([f.theta_hat[EXPOSURE] for f in fits]),
        Gamma_hat=(Gamma + Gamma.T) / 2,
        J=data.n_individuals,
        n_pairwise=rescov.n_pairwise,
        endpoint_names=data.endpoint_names,
        cohort_id=data.cohort_id,
    )


def run_stage1(data: CohortData) -> Stage1Result:
    fits = tuple(fit_endpoint(data, k) for k in range(data.n_endpoints))
    rescov = estimate_residual_covariance(data, fits)
    block = effect_covariance(data, fits, rescov)
    warn = [f"endpoints {data.endpoint_names[k]}/{data.endpoint_names[l]} have no overlap; covariance set to 0"
            for k, l in rescov.zero_overlap]
    warn += [f"endpoints {data.endpoint_names[k]}/{data.endpoint_names[l]} residual covariance exceeds "
             "Cauchy-Schwarz bound" for k, l in rescov.cauchy_schwarz]
    warn += [f"endpoints {a}/{b} overlap on only {n} rows" for a, b, n in data.pair_flags]
    return Stage1Result(
        cohort_id=data.cohort_id,
        fits=fits,
        rescov=rescov,
        omega=design_moment(data),
        block=block,
        theta_cov=theta_covariance(data, rescov),
        adjustment=adjustment_factors(rescov.n_pairwise),
        warnings=tuple(warn),
    )


def block_from_dict(d: dict) -> EffectBlock:
    """Rebuild an EffectBlock from a Stage I report."""
    return EffectBlock(
        B_hat=[e["B"] for e in d["endpoints"]],
        Gamma_hat=np.array(d["Gamma"]),
        J=int(d["J"]),
        n_pairwise=np.array(d["n_pairwise"], dtype=np.int64),
        endpoint_names=tuple(e["name"] for e in d["endpoints"]),
        cohort_id=d.get("cohort_id", ""),
    )
