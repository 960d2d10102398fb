"""Command-line interface: ``hiermeta stage1|pool|forest|simulate``.

Options can come from an INI config file (``--config``); command-line flags
take precedence. See README.md for the config schema.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import sim
from .datamodel import CohortData, HiermetaError, NumericalError, ValidationError, load_cohort_csv, standardize_responses
from .forest import PlotOptions, render_svg, rows_from_report
from .onestage import OneStageOptions, fit_onestage
from .stage1 import block_from_dict, run_stage1
from .stage2 import ConvergenceOptions, pool_within_cohort
from .stage3 import pool_across_cohorts

log = logging.getLogger("hiermeta")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 2, 3, 4

DEFAULTS: dict[str, dict[str, Any]] = {
    "schema": {"exposure": "exposure", "propensity": "propensity", "endpoints": None,
               "ignore": "", "na": ",NA", "delimiter": ",", "standardize": True},
    "convergence": {"tol_beta": 1e-8, "tol_phi": 1e-8, "max_iter": 500},
    "onestage": {"restarts": 5, "max_endpoints": 12},
    "simulate": {"reps": 1000, "seed": 0, "n": 500, "rho": 0.5, "methods": "two-stage,one-stage",
                 "jobs": 1, "K": "10,5,3", "tau2": "0.10,0.25,0.50"},
    "plot": {"width": 720, "effect_label": "Effect (95% CI)", "title": None, "reference": True},
}


class Settings:
    """Flag > config file > built-in default lookup."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg = configparser.ConfigParser()
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.exists():
                raise ValidationError(f"config file {path} not found")
            self.cfg.read(path, encoding="utf-8")

    def get(self, section: str, key: str, attr: str | None = None):
        default = DEFAULTS[section][key]
        v = getattr(self.args, attr or key, None)
        if v is not None:
            return v
        if self.cfg.has_option(section, key):
            raw = self.cfg.get(section, key)
            if isinstance(default, bool):
                return self.cfg.getboolean(section, key)
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
            return raw
        return default


def _split(s: str | None) -> list[str] | None:
    if s is None:
        return None
    return [t.strip() for t in s.split(",") if t.strip()]


def _dump(obj: Any, path: Path) -> None:
    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.generic):
            return clean(o.item())
        return o

    path.write_text(json.dumps(clean(obj), indent=2) + "\n", encoding="utf-8")


def _load(path: Path, st: Settings) -> CohortData:
    na = st.get("schema", "na").split(",")
    return load_cohort_csv(
        path,
        exposure=st.get("schema", "exposure"),
        propensity=st.get("schema", "propensity"),
        endpoints=_split(st.get("schema", "endpoints")),
        na_values=na,
        delimiter=st.get("schema", "delimiter"),
        ignore=_split(st.get("schema", "ignore")) or (),
    )


def _prepare(path: Path, st: Settings):
    data = _load(path, st)
    rec = None
    if st.get("schema", "standardize"):
        data, rec = standardize_responses(data)
    return data, rec


def _conv(st: Settings) -> ConvergenceOptions:
    return ConvergenceOptions(
        tol_beta=st.get("convergence", "tol_beta"),
        tol_phi=st.get("convergence", "tol_phi"),
        max_iter=st.get("convergence", "max_iter"),
    )


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_stage1(args) -> int:
    st = Settings(args)
    out = _outdir(args)
    for p in args.inputs:
        data, rec = _prepare(Path(p), st)
        res = run_stage1(data)
        rep = res.to_dict()
        rep["standardization"] = rec.to_dict() if rec else None
        _dump(rep, out / f"{data.cohort_id}_stage1.json")
        lines = ["endpoint," + ",".join(res.block.endpoint_names)]
        for name, row in zip(res.block.endpoint_names, res.block.Gamma_hat):
            lines.append(name + "," + ",".join(repr(float(v)) for v in row))
        (out / f"{data.cohort_id}_gamma.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"{data.cohort_id}: J={data.n_individuals}")
        for e in rep["endpoints"]:
            print(f"  {e['name']:<40} B={e['B']:9.3f}  SE={e['se_B']:7.3f}  n={e['n']}")
    return EXIT_OK


def cmd_pool(args) -> int:
    st = Settings(args)
    out = _outdir(args)
    methods = ["two-stage", "one-stage"] if args.method == "both" else [args.method]
    conv = _conv(st)
    os_opts = OneStageOptions(restarts=st.get("onestage", "restarts"),
                              max_endpoints=st.get("onestage", "max_endpoints"), seed=args.seed or 0)
    per_method: dict[str, list] = {m: [] for m in methods}
    failures = []
    nonconverged = False
    for p in map(Path, args.inputs):
        try:
            if p.suffix == ".json":
                d = json.loads(p.read_text(encoding="utf-8"))
                block, data = block_from_dict(d), None
                cid = d.get("cohort_id") or p.stem
            else:
                data, _ = _prepare(p, st)
                block, cid = run_stage1(data).block, data.cohort_id
        except (HiermetaError, OSError, KeyError, ValueError) as exc:
            failures.append({"cohort": p.stem, "method": "all", "error": str(exc),
                             "kind": _kind(exc)})
            continue
        for m in methods:
            try:
                if m == "two-stage":
                    r = pool_within_cohort(block, conv)
                    est, var, ok = r.beta_hat, r.variance, r.converged
                else:
                    if data is None:
                        raise ValidationError("one-stage pooling needs the raw cohort CSV")
                    r = fit_onestage(data, os_opts)
                    est, var, ok = r.beta_tilde, r.variance, r.converged
                rep = r.to_dict()
                rep["cohort_id"] = cid
                _dump(rep, out / f"{cid}_{m}.json")
                nonconverged |= not ok
                per_method[m].append((cid, est, var))
            except (HiermetaError, ValueError, np.linalg.LinAlgError) as exc:
                failures.append({"cohort": cid, "method": m, "error": str(exc), "kind": _kind(exc)})
    for f in failures:
        print(f"error: cohort {f['cohort']} ({f['method']}): {f['error']}", file=sys.stderr)

    report: dict[str, Any] = {"methods": {}, "failures": failures}
    lines = [f"{'method':<10} {'cohort':<28} {'effect':>9} {'SE':>7}"]
    for m, rows in per_method.items():
        if not rows:
            continue
        g = pool_across_cohorts([r[1] for r in rows], [r[2] for r in rows], [r[0] for r in rows], conv, method=m)
        nonconverged |= not g.converged
        report["methods"][m] = g.to_dict()
        for cid, est, var in rows:
            lines.append(f"{m:<10} {cid:<28} {est:9.3f} {math.sqrt(var):7.3f}")
        lines.append(f"{m:<10} {'GLOBAL':<28} {g.beta_global:9.3f} {g.se_global:7.3f}  "
                     f"eta2={g.eta2_hat:.3f} ({g.se_eta2:.3f})")
    _dump(report, out / "global.json")
    summary = "\n".join(lines) + "\n"
    (out / "pool_summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    if not report["methods"]:
        return EXIT_NUMERIC if any(f["kind"] == "numerical" for f in failures) else EXIT_INPUT
    return EXIT_NONCONVERGED if nonconverged else EXIT_OK


def _kind(exc: Exception) -> str:
    return "numerical" if isinstance(exc, (NumericalError, np.linalg.LinAlgError)) else "input"


def cmd_forest(args) -> int:
    st = Settings(args)
    report = json.loads(Path(args.report).read_text(encoding="utf-8"))
    if "methods" in report:
        key = args.method or next(iter(report["methods"]))
        if key not in report["methods"]:
            raise ValidationError(f"report has no method {key!r}")
        report = report["methods"][key]
    rows, pooled, title = rows_from_report(report)
    opts = PlotOptions(
        width=st.get("plot", "width"),
        effect_label=st.get("plot", "effect_label"),
        title=st.get("plot", "title") or title,
        reference=0.0 if st.get("plot", "reference") else None,
    )
    Path(args.out).write_text(render_svg(rows, pooled, opts), encoding="utf-8")
    return EXIT_OK


def cmd_simulate(args) -> int:
    st = Settings(args)
    out = _outdir(args)
    reps = st.get("simulate", "reps")
    seed = st.get("simulate", "seed")
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    Ks = [int(k) for k in _split(st.get("simulate", "K"))]
    taus = [float(t) for t in _split(st.get("simulate", "tau2"))]
    cells = [
        sim.Scenario(K=K, tau2=t, n=st.get("simulate", "n"), reps=reps, seed=seed, stream=i,
                     rho=st.get("simulate", "rho"))
        for i, (t, K) in enumerate((t, K) for t in taus for K in Ks)
    ]
    methods = _split(st.get("simulate", "methods"))
    results = sim.run_study_grid(scenarios=cells, methods=methods, n_jobs=st.get("simulate", "jobs"))
    rows = sim.result_rows(results)
    (out / "study.csv").write_text(sim.rows_to_csv(rows), encoding="utf-8")
    (out / "study.json").write_text(sim.rows_to_json(rows, seed), encoding="utf-8")
    text = sim.format_table(rows)
    (out / "study.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _schema_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--exposure", help="exposure column (default: exposure)")
    p.add_argument("--propensity", help="propensity score column (default: propensity)")
    p.add_argument("--endpoints", help="comma-separated endpoint columns (default: all other columns)")
    p.add_argument("--ignore", help="comma-separated columns to skip, e.g. an id column")
    p.add_argument("--na", help="comma-separated missing-value tokens (default: empty and NA)")
    p.add_argument("--delimiter")
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False,
                   help="keep responses on their original scale")


def _conv_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol-beta", type=float)
    p.add_argument("--tol-phi", type=float)
    p.add_argument("--max-iter", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiermeta", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stage1", help="per-endpoint fits and effect covariance")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _schema_flags(p)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("pool", help="pool within and across cohorts")
    p.add_argument("inputs", nargs="+", help="cohort CSV files or *_stage1.json reports")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("two-stage", "one-stage", "both"), default="two-stage")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    _schema_flags(p)
    _conv_flags(p)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("forest", help="SVG forest plot from a pooled report")
    p.add_argument("report")
    p.add_argument("--out", required=True)
    p.add_argument("--method", help="which method to plot from a global.json report")
    p.add_argument("--width", type=int)
    p.add_argument("--effect-label")
    p.add_argument("--title")
    p.add_argument("--no-reference", dest="reference", action="store_const", const=False)
    p.add_argument("--config")
    p.set_defaults(func=cmd_forest)

    p = sub.add_parser("simulate", help="Monte Carlo study over the (tau2, K) grid")
    p.add_argument("--out", required=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--methods", help="comma-separated: two-stage,one-stage")
    p.add_argument("--jobs", type=int)
    p.add_argument("--K", help="comma-separated endpoint counts")
    p.add_argument("--tau2", help="comma-separated heterogeneity values")
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
