from functools import lru_cache
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from hiermeta.datamodel import CohortData
from hiermeta import sim

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=8, deadline=None)
hypothesis.settings.load_profile("default")

DATA = Path(__file__).parent / "data"
COHORTS = sorted((DATA / "cohorts").glob("*.csv"))
COHORTS_MISSING = sorted((DATA / "cohorts_missing").glob("*.csv"))


def make_cohort(rng, J=200, K=3, beta=(1.0, 2.0, 3.0), rho=0.5, missing=0.0, scale=1.0, cohort_id="c"):
    beta = np.resize(np.asarray(beta, float), K)
    A = rng.normal(size=J)
    S = 0.5 * A + rng.normal(size=J)
    C = np.full((K, K), rho) + (1 - rho) * np.eye(K)
    E = rng.standard_normal((J, K)) @ np.linalg.cholesky(C).T * scale
    Y = 1.0 + A[:, None] * beta + 0.7 * S[:, None] + E
    R = rng.uniform(size=(J, K)) >= missing
    return CohortData(cohort_id, A, S, Y, R, [f"y{k + 1}" for k in range(K)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SEED = 42


@lru_cache(maxsize=None)
def study_grid(seed=SEED, reps=1000):
    """Two-stage results for all nine simulation cells, keyed by (tau2, K); shared across test modules."""
    return {(r.scenario.tau2, r.scenario.K): r for r in sim.run_study_grid(seed, reps, methods=("two_stage",))}


@lru_cache(maxsize=None)
def both_methods_cell(tau2, K, seed=SEED, reps=500):
    cell = next(s for s in sim.study_scenarios(seed=seed, reps=reps) if s.tau2 == tau2 and s.K == K)
    return sim.run_scenario(cell, ("two_stage", "one_stage"))
