"""Acceptance criteria. Each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (add ``-s`` to also see
progress output from the simulations).
"""
import json

import numpy as np
import pytest

from hiermeta.cli import main
from hiermeta.datamodel import EffectBlock, load_cohort_csv, standardize_responses
from hiermeta.onestage import fit_onestage
from hiermeta.stage1 import run_stage1
from hiermeta.stage2 import ConvergenceOptions, pool_within_cohort
from hiermeta.stage3 import pool_across_cohorts

from conftest import COHORTS, both_methods_cell, make_cohort, study_grid
from oracles import cofactor_inverse3, grid_argmax, random_instance, resimulate_gamma12

# reported two-stage (ASE, ESE) for the three checked cells
PUBLISHED = {(0.25, 5): (0.13, 0.13), (0.10, 10): (0.16, 0.14), (0.50, 3): (0.23, 0.24)}


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail
    return emit


@pytest.mark.slow
def test_criterion_1_simulation_cells(report):
    grid = study_grid()
    parts, ok = [], True
    for cell, (ase_pub, ese_pub) in PUBLISHED.items():
        m = grid[cell].metrics["two_stage"]
        checks = {
            "ebias": abs(m.ebias) <= 3 * m.mcse_ebias,
            "ase": abs(m.ase - ase_pub) <= 0.15 * ase_pub,
            "ese": abs(m.ese - ese_pub) <= 0.15 * ese_pub,
            "cp": 0.93 <= m.cp <= 0.97,
        }
        ok &= all(checks.values())
        failed = ",".join(k for k, v in checks.items() if not v) or "none"
        parts.append(f"tau2={cell[0]} K={cell[1]}: EBIAS={m.ebias:+.4f} ASE={m.ase:.3f} "
                     f"ESE={m.ese:.3f} CP={m.cp:.3f} (failed: {failed})")
    report(1, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_2_two_stage_less_biased(report):
    res = both_methods_cell(0.50, 3, reps=500)
    two, one = res.metrics["two_stage"], res.metrics["one_stage"]
    ok = abs(two.ebias) < abs(one.ebias)
    report(2, ok, f"|EBIAS| two-stage={abs(two.ebias):.6f} one-stage={abs(one.ebias):.6f} "
                  f"(MC SE {two.mcse_ebias:.4f}/{one.mcse_ebias:.4f}, one-stage failures {one.failures})")


def _check_instances(pool, correlated, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        K = int(rng.integers(1, 6))
        B, V = random_instance(rng, K, correlated)
        beta, phi = pool(B, V)
        bg, pg, db, dp = grid_argmax(B, V, n=2001, beta_range=(-0.5, 1.5), phi_range=(0.0, 1.0))
        assert max(db, dp) <= 1e-3 + 1e-15
        worst = max(worst, abs(beta - bg), abs(phi - pg))
    return worst


def _stage2(weighting):
    def run(B, V):
        r = pool_within_cohort(EffectBlock(B, V, 1, np.ones((len(B), len(B)), int)),
                               ConvergenceOptions(weighting=weighting))
        return r.beta_hat, r.phi_hat
    return run


def _stage3(y, V):
    g = pool_across_cohorts(y, np.diag(V))
    return g.beta_global, g.eta2_hat


def test_criterion_3_grid_oracle(report):
    diag = _check_instances(_stage2("diagonal"), correlated=False, seed=31)
    full = _check_instances(_stage2("full"), correlated=True, seed=32)
    across = _check_instances(_stage3, correlated=False, seed=33)
    ok = max(diag, full, across) <= 1e-3
    report(3, ok, f"max |estimate - grid argmax| over 20 instances each: within-cohort diagonal Gamma {diag:.2e}, "
                  f"within-cohort correlated Gamma (GLS weights) {full:.2e}, across cohorts {across:.2e}")


def test_criterion_4_missing_data_covariance(report):
    emp, mcse, model = resimulate_gamma12(J=200, missing=0.3, reps=5000, seed=2024, run_stage1=run_stage1)
    ok = abs(emp - model) <= 3 * mcse
    report(4, ok, f"empirical Cov(B1,B2)={emp:.6f} model J^-1 Gamma_12={model:.6f} "
                  f"diff={abs(emp - model) / mcse:.2f} MC SEs")


def test_criterion_5_reductions(report):
    d = make_cohort(np.random.default_rng(55), J=250, K=4)
    res = run_stage1(d)
    X = d.design
    inv_AA = cofactor_inverse3(X.T @ X)[1, 1]
    rel = max(abs(res.block.sampling_cov[k, k] / (f.sigma2_hat * inv_AA) - 1) for k, f in enumerate(res.fits))

    one = run_stage1(d.select_endpoints([2]))
    k1 = pool_within_cohort(one.block)
    exact_k1 = k1.beta_hat == one.block.B_hat[0]

    y = np.array([-2.0, -1.8, -2.3, -2.1])
    v = np.array([0.9, 1.4, 0.7, 2.0])
    g = pool_across_cohorts(y, v)
    fe = (y / v).sum() / (1 / v).sum()
    fe_ok = g.eta2_hat == 0 and abs(g.beta_global - fe) <= 1e-12
    ok = rel <= 1e-10 and exact_k1 and fe_ok
    report(5, ok, f"OLS variance rel. diff {rel:.1e}; K=1 pooled == stage I: {exact_k1}; "
                  f"eta2=0 fixed-effect diff {abs(g.beta_global - fe):.1e}")


def test_criterion_6_cross_method_fixture(report):
    two, one = [], []
    for p in COHORTS:
        d, _ = standardize_responses(load_cohort_csv(p, "exposure", "propensity", ignore=["id"]))
        a = pool_within_cohort(run_stage1(d).block)
        b = fit_onestage(d)
        assert a.converged and b.converged
        two.append((a.beta_hat, a.variance))
        one.append((b.beta_tilde, b.variance))
    g2 = pool_across_cohorts(*zip(*two))
    g1 = pool_across_cohorts(*zip(*one))
    d_beta = abs(g2.beta_global - g1.beta_global)
    d_se = abs(g2.se_global - g1.se_global) / g2.se_global
    ok = d_beta < 0.2 and d_se < 0.10
    report(6, ok, f"global two-stage {g2.beta_global:.3f} (SE {g2.se_global:.3f}) vs one-stage "
                  f"{g1.beta_global:.3f} (SE {g1.se_global:.3f}); |diff|={d_beta:.3f}, SE rel diff={d_se:.1%}")


@pytest.mark.slow
def test_criterion_7_simulate_deterministic(tmp_path, report):
    # every cell and both methods; two replicates per cell keep the runtime to about a minute
    args = ["simulate", "--seed", "42", "--reps", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a = (tmp_path / "a" / "study.csv").read_bytes()
    b = (tmp_path / "b" / "study.csv").read_bytes()
    rows = len(a.decode().splitlines()) - 1
    meta = json.loads((tmp_path / "a" / "study.json").read_text())["seed"]
    report(7, a == b and rows == 18 and meta == 42,
           f"two runs of simulate --seed 42 ({rows} rows, serial vs 2 workers) byte-identical: {a == b}")
