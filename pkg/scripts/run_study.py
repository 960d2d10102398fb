"""Run the two-stage simulation grid and print the summary table.

    python scripts/run_study.py --reps 1000 --seed 42 --jobs 4
"""
import argparse

from hiermeta import sim

ap = argparse.ArgumentParser()
ap.add_argument("--reps", type=int, default=1000)
ap.add_argument("--seed", type=int, default=42)
ap.add_argument("--jobs", type=int, default=1)
args = ap.parse_args()

results = sim.run_study_grid(seed=args.seed, reps=args.reps, methods=("two_stage",), n_jobs=args.jobs)
print(sim.format_table(sim.result_rows(results)))
