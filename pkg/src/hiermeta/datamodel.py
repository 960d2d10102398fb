"""Cohort data containers, CSV ingestion and IQ-scale standardization."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

IQ_MEAN = 100.0
IQ_SD = 15.0
MIN_ENDPOINT_ROWS = 4
MIN_PAIR_ROWS = 2


class HiermetaError(Exception):
    """Base class for all package errors."""


class ValidationError(HiermetaError, ValueError):
    """Input data violates a precondition."""


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(HiermetaError, ArithmeticError):
    """A computation could not be carried out (singular matrix, non-PD covariance...)."""


class SingularDesignError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CohortData:
    """Individual-level data for one cohort.

    ``responses`` holds NaN wherever ``observed`` is False. Arrays are copied
    and made read-only on construction.
    """

    cohort_id: str
    exposure: np.ndarray
    propensity: np.ndarray
    responses: np.ndarray
    observed: np.ndarray
    endpoint_names: tuple[str, ...]
    pair_flags: tuple[tuple[str, str, int], ...] = field(default=(), init=False)

    def __post_init__(self):
        exposure = np.asarray(self.exposure, dtype=float).ravel()
        propensity = np.asarray(self.propensity, dtype=float).ravel()
        responses = np.asarray(self.responses, dtype=float)
        if responses.ndim == 1:
            responses = responses[:, None]
        observed = np.asarray(self.observed, dtype=bool)
        if observed.shape != responses.shape:
            raise ValidationError(
                f"observed mask shape {observed.shape} != responses shape {responses.shape}"
            )
        responses = np.where(observed, responses, np.nan)
        object.__setattr__(self, "exposure", _frozen(exposure))
        object.__setattr__(self, "propensity", _frozen(propensity))
        object.__setattr__(self, "responses", _frozen(responses))
        object.__setattr__(self, "observed", _frozen(observed))
        object.__setattr__(self, "endpoint_names", tuple(str(n) for n in self.endpoint_names))
        object.__setattr__(self, "pair_flags", self._validate())

    @property
    def n_individuals(self) -> int:
        return self.exposure.shape[0]

    @property
    def n_endpoints(self) -> int:
        return self.responses.shape[1]

    @property
    def design(self) -> np.ndarray:
        """J x 3 matrix with rows (1, A_j, S_j)."""
        return np.column_stack([np.ones(self.n_individuals), self.exposure, self.propensity])

    @property
    def n_observed(self) -> np.ndarray:
        return self.observed.sum(axis=0)

    @property
    def n_pairwise(self) -> np.ndarray:
        r = self.observed.astype(np.int64)
        return r.T @ r

    def _validate(self) -> tuple[tuple[str, str, int], ...]:
        J = self.exposure.shape[0]
        K = self.responses.shape[1]
        if J == 0:
            raise ValidationError(f"cohort {self.cohort_id!r} has no individuals")
        if K == 0:
            raise ValidationError(f"cohort {self.cohort_id!r} has no endpoints")
        if self.propensity.shape[0] != J or self.responses.shape[0] != J:
            raise ValidationError("exposure, propensity and responses must have the same row count")
        if len(self.endpoint_names) != K:
            raise ValidationError(f"expected {K} endpoint names, got {len(self.endpoint_names)}")
        if len(set(self.endpoint_names)) != K:
            raise ValidationError("endpoint names must be unique")
        for name, col in (("exposure", self.exposure), ("propensity", self.propensity)):
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise ValidationError(f"{name} missing or non-finite at row {bad[0] + 1}")
        vals = self.responses[self.observed]
        if not np.all(np.isfinite(vals)):
            raise ValidationError("observed responses must be finite")
        n_k = self.observed.sum(axis=0)
        for k in range(K):
            if n_k[k] < MIN_ENDPOINT_ROWS:
                raise ValidationError(
                    f"endpoint {self.endpoint_names[k]!r} has {n_k[k]} observed rows; "
                    f"at least {MIN_ENDPOINT_ROWS} required"
                )
        flags = []
        npair = self.n_pairwise
        for k in range(K):
            for l in range(k + 1, K):
                if npair[k, l] < MIN_PAIR_ROWS:
                    a, b = self.endpoint_names[k], self.endpoint_names[l]
                    log.warning("cohort %s: endpoints %s/%s overlap on only %d rows",
                                self.cohort_id, a, b, npair[k, l])
                    flags.append((a, b, int(npair[k, l])))
        return tuple(flags)

    def validate(self) -> "CohortData":
        """Re-run validation; returns an equal copy."""
        return self.replace()

    def replace(self, **changes) -> "CohortData":
        kw = dict(
            cohort_id=self.cohort_id,
            exposure=self.exposure,
            propensity=self.propensity,
            responses=self.responses,
            observed=self.observed,
            endpoint_names=self.endpoint_names,
        )
        kw.update(changes)
        return CohortData(**kw)

    def select_endpoints(self, idx: Sequence[int]) -> "CohortData":
        idx = list(idx)
        return self.replace(
            responses=self.responses[:, idx],
            observed=self.observed[:, idx],
            endpoint_names=[self.endpoint_names[i] for i in idx],
        )

    def equals(self, other: "CohortData") -> bool:
        return (
            self.cohort_id == other.cohort_id
            and self.endpoint_names == other.endpoint_names
            and np.array_equal(self.exposure, other.exposure)
            and np.array_equal(self.propensity, other.propensity)
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.responses, other.responses, equal_nan=True)
        )


@dataclass(frozen=True)
class StandardizationRecord:
    endpoint_names: tuple[str, ...]
    original_mean: tuple[float, ...]
    original_sd: tuple[float, ...]
    target_mean: float = IQ_MEAN
    target_sd: float = IQ_SD

    def _coeffs(self):
        m = np.asarray(self.original_mean)
        s = np.asarray(self.original_sd)
        return m, s

    def apply(self, responses: np.ndarray) -> np.ndarray:
        m, s = self._coeffs()
        return self.target_mean + (np.asarray(responses) - m) / s * self.target_sd

    def invert(self, responses: np.ndarray) -> np.ndarray:
        m, s = self._coeffs()
        return m + (np.asarray(responses) - self.target_mean) / self.target_sd * s

    def to_dict(self) -> dict:
        return {
            "endpoints": list(self.endpoint_names),
            "original_mean": list(self.original_mean),
            "original_sd": list(self.original_sd),
            "target_mean": self.target_mean,
            "target_sd": self.target_sd,
        }


@dataclass(frozen=True)
class EndpointFit:
    k: int
    theta_hat: np.ndarray  # (alpha, B, gamma)
    sigma2_hat: float
    n_k: int
    name: str = ""

    @property
    def effect(self) -> float:
        return float(self.theta_hat[1])


@dataclass(frozen=True, eq=False)
class EffectBlock:
    """Exposure-effect estimates of one cohort with the covariance of sqrt(J)(B_hat - B)."""

    B_hat: np.ndarray
    Gamma_hat: np.ndarray
    J: int
    n_pairwise: np.ndarray
    endpoint_names: tuple[str, ...] = ()
    cohort_id: str = ""

    def __post_init__(self):
        B = np.atleast_1d(np.asarray(self.B_hat, dtype=float))
        G = np.atleast_2d(np.asarray(self.Gamma_hat, dtype=float))
        npair = np.atleast_2d(np.asarray(self.n_pairwise))
        K = B.shape[0]
        if K == 0:
            raise ValidationError("effect block has no endpoints")
        if G.shape != (K, K) or npair.shape != (K, K):
            raise ValidationError("Gamma_hat and n_pairwise must be K x K")
        tol = 1e-10 * np.maximum(1.0, np.abs(G))
        if np.any(np.abs(G - G.T) > tol):
            raise ValidationError("Gamma_hat is not symmetric")
        if np.any(np.diag(G) <= 0):
            raise ValidationError("Gamma_hat must have a strictly positive diagonal")
        if not np.array_equal(npair, npair.T):
            raise ValidationError("n_pairwise is not symmetric")
        d = np.diag(npair)
        if np.any(npair > np.minimum.outer(d, d)):
            raise ValidationError("n_pairwise off-diagonal exceeds endpoint counts")
        if self.J <= 0:
            raise ValidationError("J must be positive")
        names = tuple(self.endpoint_names) or tuple(f"endpoint_{k + 1}" for k in range(K))
        object.__setattr__(self, "B_hat", _frozen(B))
        object.__setattr__(self, "Gamma_hat", _frozen(G))
        object.__setattr__(self, "n_pairwise", _frozen(npair))
        object.__setattr__(self, "endpoint_names", names)

    @property
    def K(self) -> int:
        return self.B_hat.shape[0]

    @property
    def sampling_cov(self) -> np.ndarray:
        """J^-1 Gamma_hat, the conditional covariance of B_hat."""
        return self.Gamma_hat / self.J

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.Gamma_hat) / self.J)

    @classmethod
    def from_variances(cls, estimates, variances, names=()) -> "EffectBlock":
        """Independent estimates with known variances (J = 1, diagonal Gamma)."""
        v = np.asarray(variances, dtype=float)
        return cls(
            B_hat=np.asarray(estimates, dtype=float),
            Gamma_hat=np.diag(v),
            J=1,
            n_pairwise=np.diag(np.ones(v.shape[0], dtype=np.int64)),
            endpoint_names=tuple(names),
        )


def load_cohort_csv(
    path: str | Path,
    exposure: str,
    propensity: str,
    endpoints: Sequence[str] | None = None,
    cohort_id: str | None = None,
    na_values: Sequence[str] = ("", "NA"),
    delimiter: str = ",",
    ignore: Sequence[str] = (),
) -> CohortData:
    """Read one cohort from a CSV file with a header row.

    When ``endpoints`` is None every column other than the exposure, the
    propensity and ``ignore`` columns is treated as an endpoint.
    """
    path = Path(path)
    na = {s.strip() for s in na_values}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        rows = [(reader.line_num, row) for row in reader if any(c.strip() for c in row)]
    for col in (exposure, propensity):
        if col not in header:
            raise ValidationError(f"column {col!r} not found in {path.name}")
    if endpoints is None:
        skip = {exposure, propensity, *ignore}
        endpoints = [h for h in header if h not in skip]
    endpoints = list(endpoints)
    if not endpoints:
        raise ValidationError("no endpoint columns")
    for col in endpoints:
        if col not in header:
            raise ValidationError(f"endpoint column {col!r} not found in {path.name}")
    ix_a, ix_s = header.index(exposure), header.index(propensity)
    ix_y = [header.index(c) for c in endpoints]

    J, K = len(rows), len(endpoints)
    A = np.empty(J)
    S = np.empty(J)
    Y = np.full((J, K), np.nan)
    R = np.zeros((J, K), dtype=bool)

    def num(cell: str, line: int, col: str) -> float:
        try:
            return float(cell)
        except ValueError:
            raise ParseError(f"cannot parse {cell!r} in column {col!r}", line) from None

    for j, (line, row) in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        for col, ix, target in ((exposure, ix_a, A), (propensity, ix_s, S)):
            cell = row[ix].strip()
            if cell in na:
                raise ValidationError(f"line {line}: {col} is missing (row {j + 1})")
            target[j] = num(cell, line, col)
        for k, ix in enumerate(ix_y):
            cell = row[ix].strip()
            if cell not in na:
                Y[j, k] = num(cell, line, endpoints[k])
                R[j, k] = True
    return CohortData(
        cohort_id=cohort_id if cohort_id is not None else path.stem,
        exposure=A,
        propensity=S,
        responses=Y,
        observed=R,
        endpoint_names=endpoints,
    )


def standardize_responses(
    data: CohortData, target_mean: float = IQ_MEAN, target_sd: float = IQ_SD
) -> tuple[CohortData, StandardizationRecord]:
    """Rescale every endpoint so its observed cells have the given mean and SD (divisor n-1)."""
    means, sds = [], []
    for k, name in enumerate(data.endpoint_names):
        vals = data.responses[data.observed[:, k], k]
        m = float(np.mean(vals))
        s = float(np.std(vals, ddof=1))
        if not s > 0 or not math.isfinite(s):
            raise ValidationError(f"endpoint {name!r} has zero standard deviation")
        means.append(m)
        sds.append(s)
    rec = StandardizationRecord(
        endpoint_names=data.endpoint_names,
        original_mean=tuple(means),
        original_sd=tuple(sds),
        target_mean=float(target_mean),
        target_sd=float(target_sd),
    )
    Y = np.where(data.observed, rec.apply(data.responses), np.nan)
    return data.replace(responses=Y), rec
