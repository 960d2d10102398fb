"""Regenerate the golden forest plot used by tests/test_forest.py.

Pools the six-cohort fixture with the two-stage method and renders the
global report. Review the SVG by eye before committing a new version.

    python scripts/make_forest_golden.py
"""
import tempfile
from pathlib import Path

from hiermeta.cli import main

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "tests" / "data"

with tempfile.TemporaryDirectory() as tmp:
    inputs = [str(p) for p in sorted((DATA / "cohorts").glob("*.csv"))]
    main(["pool", *inputs, "--ignore", "id", "--out", tmp])
    main(["forest", str(Path(tmp) / "global.json"), "--out", str(DATA / "forest_six_cohort.svg")])
print(f"wrote {DATA / 'forest_six_cohort.svg'}")
