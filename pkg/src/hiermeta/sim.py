"""Monte Carlo harness for the correlated-endpoint simulation study.

Each replicate draws its own random stream from a Philox counter-based
generator keyed by (seed, scenario stream, replicate), so results do not
depend on execution order or on how replicates are spread over workers.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .datamodel import CohortData, HiermetaError, ValidationError
from .onestage import OneStageOptions, fit_onestage
from .stage1 import run_stage1
from .stage2 import ConvergenceOptions, pool_within_cohort

log = logging.getLogger(__name__)

METHODS = ("two_stage", "one_stage")
STUDY_K = (10, 5, 3)
STUDY_TAU2 = (0.10, 0.25, 0.50)
Z975 = 1.959963984540054


@dataclass(frozen=True)
class Scenario:
    K: int
    tau2: float
    n: int = 500
    reps: int = 1000
    beta_true: float = 3.0
    rho: float = 0.5
    sigma: tuple[tuple[float, ...], ...] | None = None  # overrides rho when given
    alpha: float = 0.0
    gamma: float = 1.0
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if self.n < 4:
            raise ValidationError("n must be >= 4")
        if self.reps < 1:
            raise ValidationError("reps must be >= 1")
        if self.tau2 < 0:
            raise ValidationError("tau2 must be >= 0")
        S = self.sigma_matrix
        if not np.allclose(S, S.T):
            raise ValidationError("residual covariance must be symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise ValidationError("residual covariance must be positive definite")

    @property
    def sigma_matrix(self) -> np.ndarray:
        if self.sigma is not None:
            S = np.asarray(self.sigma, dtype=float)
            if S.shape != (self.K, self.K):
                raise ValidationError(f"sigma must be {self.K} x {self.K}")
            return S
        return np.full((self.K, self.K), self.rho) + (1 - self.rho) * np.eye(self.K)


@dataclass(frozen=True)
class MethodMetrics:
    ebias: float
    ase: float
    ese: float
    cp: float
    mcse_ebias: float
    mcse_ase: float
    mcse_ese: float
    mcse_cp: float
    n_ok: int
    failures: int
    ese_defined: bool


@dataclass(frozen=True)
class ScenarioResult:
    scenario: Scenario
    metrics: dict[str, MethodMetrics]
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    ses: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def replicate_rng(seed: int, stream: int, rep: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(rep)))
    return np.random.Generator(np.random.Philox(ss))


def draw_effects(s: Scenario, rep: int) -> np.ndarray:
    """Endpoint-specific true effects b_k of a replicate (first draws of its stream)."""
    return _draw_effects(s, replicate_rng(s.seed, s.stream, rep))


def _draw_effects(s: Scenario, rng: np.random.Generator) -> np.ndarray:
    return s.beta_true + math.sqrt(s.tau2) * rng.standard_normal(s.K)


def generate_dataset(s: Scenario, rep: int) -> CohortData:
    """One complete-data cohort: Y_jk = alpha + b_k X_j + gamma Z_j + E_jk with b_k ~ N(beta, tau2)."""
    rng = replicate_rng(s.seed, s.stream, rep)
    b = _draw_effects(s, rng)
    X = rng.standard_normal(s.n)
    Z = rng.standard_normal(s.n)
    L = np.linalg.cholesky(s.sigma_matrix)
    E = rng.standard_normal((s.n, s.K)) @ L.T
    Y = s.alpha + X[:, None] * b[None, :] + s.gamma * Z[:, None] + E
    return CohortData(
        cohort_id=f"sim_{s.stream}_{rep}",
        exposure=X,
        propensity=Z,
        responses=Y,
        observed=np.ones(Y.shape, dtype=bool),
        endpoint_names=[f"y{k + 1}" for k in range(s.K)],
    )


def _fit_replicate(s: Scenario, rep: int, methods: Sequence[str], conv, onestage_opts):
    data = generate_dataset(s, rep)
    out = {}
    for m in methods:
        try:
            if m == "two_stage":
                r = pool_within_cohort(run_stage1(data).block, conv)
                out[m] = (r.beta_hat, r.se_beta, r.converged)
            else:
                r = fit_onestage(data, onestage_opts)
                out[m] = (r.beta_tilde, r.se_tilde, r.converged)
        except (HiermetaError, np.linalg.LinAlgError) as exc:
            log.debug("replicate %d method %s failed: %s", rep, m, exc)
            out[m] = (math.nan, math.nan, False)
    return out


def summarize(est: np.ndarray, se: np.ndarray, ok: np.ndarray, truth: float) -> MethodMetrics:
    e, s = est[ok], se[ok]
    n = len(e)
    failures = int((~ok).sum())
    if n == 0:
        nan = math.nan
        return MethodMetrics(nan, nan, nan, nan, nan, nan, nan, nan, 0, failures, False)
    ebias = float(math.fsum(e - truth) / n)
    ase = float(math.fsum(s) / n)
    cover = np.abs(e - truth) <= Z975 * s
    cp = float(cover.mean())
    ese_defined = n > 1
    ese = float(np.std(e, ddof=1)) if ese_defined else math.nan
    return MethodMetrics(
        ebias=ebias,
        ase=ase,
        ese=ese,
        cp=cp,
        mcse_ebias=ese / math.sqrt(n) if ese_defined else math.nan,
        mcse_ase=float(np.std(s, ddof=1)) / math.sqrt(n) if ese_defined else math.nan,
        mcse_ese=ese / math.sqrt(2 * (n - 1)) if ese_defined else math.nan,
        mcse_cp=math.sqrt(cp * (1 - cp) / n),
        n_ok=n,
        failures=failures,
        ese_defined=ese_defined,
    )


def run_scenario(
    s: Scenario,
    methods: Iterable[str] = ("two_stage",),
    n_jobs: int = 1,
    conv: ConvergenceOptions | None = None,
    onestage_opts: OneStageOptions | None = None,
) -> ScenarioResult:
    methods = tuple(m.replace("-", "_") for m in methods)
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    conv = conv or ConvergenceOptions()
    onestage_opts = onestage_opts or OneStageOptions()
    reps = Parallel(n_jobs=n_jobs, batch_size=16)(
        delayed(_fit_replicate)(s, r, methods, conv, onestage_opts) for r in range(s.reps)
    )
    metrics, ests, ses = {}, {}, {}
    for m in methods:
        est = np.array([r[m][0] for r in reps])
        se = np.array([r[m][1] for r in reps])
        ok = np.array([r[m][2] for r in reps]) & np.isfinite(est) & np.isfinite(se)
        metrics[m] = summarize(est, se, ok, s.beta_true)
        ests[m], ses[m] = est, se
    return ScenarioResult(scenario=s, metrics=metrics, estimates=ests, ses=ses)


def study_scenarios(seed: int = 0, reps: int = 1000, n: int = 500, **kw) -> list[Scenario]:
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    cells = []
    for i, (tau2, K) in enumerate((t, k) for t in STUDY_TAU2 for k in STUDY_K):
        cells.append(Scenario(K=K, tau2=tau2, n=n, reps=reps, seed=seed, stream=i, **kw))
    return cells


def run_study_grid(
    seed: int = 0,
    reps: int = 1000,
    methods: Iterable[str] = METHODS,
    n_jobs: int = 1,
    scenarios: Sequence[Scenario] | None = None,
    **kw,
) -> list[ScenarioResult]:
    cells = scenarios if scenarios is not None else study_scenarios(seed=seed, reps=reps, **kw)
    return [run_scenario(s, methods, n_jobs=n_jobs) for s in cells]


ROW_FIELDS = ("tau2", "K", "n", "reps", "method", "ebias", "ase", "ese", "cp",
              "mcse_ebias", "mcse_ase", "mcse_ese", "mcse_cp", "n_ok", "failures", "ese_defined")


def result_rows(results: Sequence[ScenarioResult]) -> list[dict]:
    rows = []
    for res in results:
        s = res.scenario
        for m, mm in res.metrics.items():
            row = {"tau2": s.tau2, "K": s.K, "n": s.n, "reps": s.reps, "method": m}
            row.update(asdict(mm))
            rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in ROW_FIELDS])
    return buf.getvalue()


def rows_to_json(rows: Sequence[dict], seed: int) -> str:
    clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows]
    return json.dumps({"seed": seed, "rows": clean}, indent=2, sort_keys=True) + "\n"


def format_table(rows: Sequence[dict]) -> str:
    """Aligned text with one line per (tau2, K, method)."""
    head = f"{'tau2':>5} {'K':>3} {'method':<10} {'EBIAS':>8} {'ASE':>6} {'ESE':>6} {'CP':>5}  (MC SE of CP)"
    lines = [head]
    for r in rows:
        ese = "  NA" if r["ese"] is None or math.isnan(r["ese"]) else f"{r['ese']:6.3f}"
        lines.append(
            f"{r['tau2']:5.2f} {r['K']:3d} {r['method']:<10} {r['ebias']:8.4f} {r['ase']:6.3f} "
            f"{ese:>6} {r['cp']:5.3f}  ({r['mcse_cp']:.3f})"
        )
    return "\n".join(lines) + "\n"
