"""Write the synthetic six-cohort fixture used by the tests and the README walkthrough.

Cohort names and endpoint lists follow the layout of the real study (which
cannot be shared); all numbers are simulated. Responses are written on raw
test-score scales so that the IQ standardization step has work to do.

    python scripts/make_fixture.py [--out tests/data/cohorts] [--missing 0.0]
"""
import argparse
import csv
from pathlib import Path

import numpy as np

COHORTS = {
    "seattle": (460, ["wisc_verbal_iq", "wisc_performance_iq"]),
    "atlanta1": (260, ["kabc_simultaneous", "kabc_sequential"]),
    "atlanta2": (300, ["das_verbal", "das_nonverbal", "das_spatial"]),
    "pittsburgh1": (560, ["sb_verbal", "sb_abstract", "sb_quantitative", "sb_memory"]),
    "pittsburgh2": (400, ["sb_verbal", "sb_abstract", "sb_quantitative", "sb_memory"]),
    "detroit": (340, ["wisc_verbal_iq", "wisc_performance_iq", "wisc_distractibility"]),
}

BETA_GLOBAL = -3.0
ETA2 = 1.0
PHI = 2.0
RESID_SD = 14.0
RESID_CORR = 0.6


def make_cohort(rng, J, names, missing):
    K = len(names)
    A = np.minimum(np.exp(rng.normal(-1.2, 0.9, J)), 4.0)
    S = 1 / (1 + np.exp(-(0.9 * np.log(A) + 0.8 + rng.normal(0, 1.0, J))))
    beta_i = BETA_GLOBAL + np.sqrt(ETA2) * rng.standard_normal()
    B = beta_i + np.sqrt(PHI) * rng.standard_normal(K)
    corr = np.full((K, K), RESID_CORR) + (1 - RESID_CORR) * np.eye(K)
    E = rng.multivariate_normal(np.zeros(K), RESID_SD ** 2 * corr, size=J)
    Y = 100 + A[:, None] * B - 6 * S[:, None] + E
    # raw score scales: scaled scores (10, 3) for subtests, standard scores (100, 15) for composites
    raw_mean = np.where(np.arange(K) % 2 == 0, 100.0, 10.0)
    raw_sd = np.where(np.arange(K) % 2 == 0, 15.0, 3.0)
    Y = raw_mean + (Y - 100) / 15 * raw_sd
    R = rng.uniform(size=(J, K)) >= missing
    R[:, 0] |= ~R.any(axis=1)
    return A, S, Y, R


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="tests/data/cohorts")
    ap.add_argument("--missing", type=float, default=0.0, help="MCAR probability per cell")
    ap.add_argument("--seed", type=int, default=20240611)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for cohort, (J, names) in COHORTS.items():
        A, S, Y, R = make_cohort(rng, J, names, args.missing)
        with (out / f"{cohort}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "exposure", "propensity", *names])
            for j in range(J):
                cells = [f"{Y[j, k]:.4f}" if R[j, k] else "NA" for k in range(len(names))]
                w.writerow([j + 1, f"{A[j]:.5f}", f"{S[j]:.5f}", *cells])
        print(f"wrote {out / cohort}.csv (J={J}, K={len(names)})")


if __name__ == "__main__":
    main()
