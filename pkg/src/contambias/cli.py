"""Command-line interface.

Subcommands ``decompose``, ``estimate``, ``oracle`` and ``simulate``. Each
prints an aligned table and can write a JSON report (``--json``) and a
table CSV (``--csv``). Exit codes: 0 success, 2 invalid input, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import __version__
from . import decompose as dec
from . import estimators as est
from . import oracle as orc
from .data import CATEGORICAL, CONTINUOUS, DesignSpec, load_csv
from .exceptions import NumericalError, ValidationError
from .simulation import monte_carlo

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

logger = logging.getLogger("contambias")


def report_schema() -> dict:
    text = resources.files("contambias").joinpath("resources/report.schema.json").read_text("utf-8")
    return json.loads(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_control(text: str):
    name, sep, kind = text.rpartition(":")
    if sep and kind in (CATEGORICAL, CONTINUOUS):
        return name, kind
    return text, CATEGORICAL


# -- argument parsing --------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", required=True, help="input CSV with a header row")
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--control", action="append", default=[], metavar="NAME[:KIND]",
                   help="control column; KIND is categorical (default) or continuous")
    p.add_argument("--control-arm", default=None, help="treatment label of the control arm")
    p.add_argument("--arm-order", default=None,
                   help="comma-separated treatment labels fixing the order of arms 1..K")
    p.add_argument("--hc", default="HC1", choices=["HC0", "HC1"], help="robust SE flavor")


def _output_args(p):
    p.add_argument("--json", default=None, metavar="PATH", help="write the JSON report here")
    p.add_argument("--csv", default=None, metavar="PATH", help="write the table CSV here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-q", "--quiet", action="store_true", help="suppress the stdout table")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contambias",
        description="Contamination-bias diagnostics for regressions with several treatment arms.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="own-effect / contamination decomposition")
    _data_args(p)
    _output_args(p)
    p.add_argument("--bootstrap", type=int, default=500, metavar="B",
                   help="bootstrap replicates for component SEs (0 disables)")
    p.add_argument("--bootstrap-scheme", default="iid", choices=["iid", "cells"])

    p = sub.add_parser("estimate", help="contamination-free estimators")
    _data_args(p)
    _output_args(p)
    p.add_argument("--which", default="all", choices=["ate", "one_at_a_time", "common", "all"])

    p = sub.add_parser("oracle", help="population weights, estimands and bounds for a spec")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="population spec JSON")
    g.add_argument("--random", action="store_true",
                   help="use a random integer-count spec drawn from --seed")
    _output_args(p)
    p.add_argument("--check", action="store_true",
                   help="compare against the sample decomposition of the exact enumeration")
    p.add_argument("--cell-scale", type=int, default=None,
                   help="rows in the exact enumeration (default: smallest integral)")

    p = sub.add_parser("simulate", help="Monte Carlo of every estimator against its estimand")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--reps", type=int, default=200)
    _output_args(p)
    return parser


# -- commands --------------------------------------------------------------

def _load(args):
    controls = [_parse_control(c) for c in args.control]
    arm_order = None
    if args.arm_order:
        arm_order = [s.strip() for s in args.arm_order.split(",")]
    ds = load_csv(
        args.data, args.outcome, args.treatment,
        [c for c, _ in controls], [k for _, k in controls],
        control_arm=args.control_arm, arm_order=arm_order, min_arm_size=2,
    )
    fingerprint = {
        "path": str(args.data),
        "rows": int(ds.n),
        "rows_dropped": int(ds.n_dropped),
        "columns": {"outcome": args.outcome, "treatment": args.treatment,
                    "controls": [{"name": c, "kind": k} for c, k in controls]},
        "sha256": _sha256(args.data),
    }
    warnings = []
    if ds.n_dropped:
        warnings.append(f"dropped {ds.n_dropped} rows with missing values")
    return ds, fingerprint, warnings


def cmd_decompose(args):
    ds, fingerprint, warnings = _load(args)
    spec = DesignSpec.default_for(ds)
    d = dec.decompose_beta(ds, spec, args.hc)
    warnings += d.warnings
    arms = list(d.arm_names)
    res = {
        "arms": arms,
        "design": {"control_style": spec.control_style, "se_flavor": args.hc},
        "beta": d.beta_hat, "beta_se": d.beta_se,
        "own": d.own_component, "contamination": d.contamination_component,
        "strata": {"count": len(d.strata), "excluded": d.cates.excluded},
    }
    n_included = int(d.cates.included.sum())
    if n_included >= 2:
        b = dec.worst_case_bounds(d)
        res["worst_case"] = {"lower": b.lower, "upper": b.upper,
                             "convention": "per contaminating arm, summed"}
        c = dec.weight_effect_correlation(d)
        res["correlation"] = {"own": np.diag(c.corr), "matrix": c.corr, "defined": c.defined}
    else:
        warnings.append("fewer than two strata; bounds and correlations not computed")
    h = dec.heterogeneity_sd(d.cates)
    res["heterogeneity_sd"] = {"adjusted": h.sd, "raw": h.raw_sd, "clamped": h.clamped}
    if args.bootstrap:
        bs = dec.decomposition_se(ds, spec, B=args.bootstrap, seed=args.seed,
                                  scheme=args.bootstrap_scheme, n_jobs=args.jobs)
        res["bootstrap"] = {"method": bs.method, "B": bs.B, "scheme": bs.scheme,
                            "redrawn": bs.n_redrawn, "se": bs.se}
        if bs.n_redrawn:
            warnings.append(f"bootstrap redrew {bs.n_redrawn} replicates with empty cells")

    rows = []
    bse = res.get("bootstrap", {}).get("se", {})
    for k, arm in enumerate(arms):
        row = {"arm": arm, "beta": d.beta_hat[k], "beta_se": d.beta_se[k],
               "own": d.own_component[k], "own_se": bse.get("own", [np.nan] * len(arms))[k],
               "contamination": d.contamination_component[k],
               "contamination_se": bse.get("contamination", [np.nan] * len(arms))[k]}
        if "worst_case" in res:
            row["worst_lower"] = res["worst_case"]["lower"][k]
            row["worst_upper"] = res["worst_case"]["upper"][k]
        rows.append(row)
    table = pd.DataFrame(rows)
    return res, warnings, fingerprint, table, dec.scatter_table(d)


def cmd_estimate(args):
    ds, fingerprint, warnings = _load(args)
    spec = DesignSpec.default_for(ds)
    kinds = {"ate": ["ATE_interacted"], "one_at_a_time": ["OneAtATime"],
             "common": ["CommonWeights"],
             "all": ["ATE_interacted", "OneAtATime", "CommonWeights"]}[args.which]
    res, rows = {"arms": list(ds.arm_names[1:]), "se_flavor": args.hc, "estimates": {}}, []
    for kind in kinds:
        e = est.ESTIMATORS[kind](ds, spec, flavor=args.hc)
        warnings += [f"{kind}: {w}" for w in e.warnings]
        res["estimates"][kind] = e.to_dict()
        for k, arm in enumerate(e.arm_names):
            rows.append({
                "estimator": kind, "arm": arm, "beta": e.beta[k], "se_robust": e.se_robust[k],
                "se_known_pscore": np.nan if e.se_known_pscore is None else e.se_known_pscore[k],
                "se_estimated_pscore": (np.nan if e.se_estimated_pscore is None
                                        else e.se_estimated_pscore[k]),
            })
    return res, warnings, fingerprint, pd.DataFrame(rows), None


def _oracle_results(spec: orc.PopulationSpec) -> dict:
    r = orc.population_beta(spec)
    K = spec.n_treatments
    res = {
        "strata": list(spec.labels),
        "lambda": {lab: lam for lab, lam in zip(spec.labels, r.lambda_)},
        "beta": r.beta, "own": r.own, "contamination": r.contamination,
        "estimands": orc.estimands(spec),
    }
    if r.phi is not None:
        res["phi"] = r.phi
    weights = {"all_pairs": orc.optimal_weights(spec, "all_pairs")}
    bounds = {}
    for k in range(1, K + 1):
        c = np.zeros(K + 1)
        c[0], c[k] = -1.0, 1.0
        wk = orc.optimal_weights(spec, "single", k)
        wstar = orc.optimal_weights(spec, c)
        weights[f"single_{k}"] = wk
        bounds[f"arm_{k}"] = {
            "unweighted": orc.efficiency_bound(spec, np.ones(spec.n_strata), c),
            "one_at_a_time": orc.efficiency_bound(spec, wk, c),
            "common": orc.efficiency_bound(spec, weights["all_pairs"], c),
            "optimal": orc.efficiency_bound(spec, wstar, c),
        }
    res["optimal_weights"] = weights
    res["efficiency_bounds"] = bounds
    return res


def cmd_oracle(args):
    warnings = []
    if args.random:
        spec, scale = orc.random_integral_spec(np.random.default_rng(args.seed))
        fingerprint = {"source": "random", "seed": args.seed}
    else:
        spec = orc.PopulationSpec.load(args.spec)
        scale = None
        fingerprint = {"path": str(args.spec), "sha256": _sha256(args.spec),
                       "strata": spec.n_strata, "arms": spec.n_treatments + 1}
    res = _oracle_results(spec)
    res["spec"] = spec.to_dict()
    if args.check:
        scale = args.cell_scale or scale or orc.cell_scale_for(spec)
        ds = orc.enumerate_exact(spec, scale)
        d = dec.decompose_beta(ds)
        r = orc.population_beta(spec)
        order = [d.strata.index(lab) for lab in spec.labels if lab in d.strata]
        diffs = {
            "beta": float(np.max(np.abs(d.beta_hat - r.beta))),
            "own": float(np.max(np.abs(d.own_component - r.own))),
            "contamination": float(np.max(np.abs(d.contamination_component - r.contamination))),
            "lambda": float(np.max(np.abs(d.lambda_per_stratum[order] - r.lambda_))),
        }
        res["check"] = {"cell_scale": scale, "rows": ds.n, "max_abs_diff": diffs,
                        "agree": bool(max(diffs.values()) <= 1e-9)}
    rows = []
    for s, lab in enumerate(spec.labels):
        lam = orc.population_lambda(spec)[s]
        for k in range(spec.n_treatments):
            for l in range(spec.n_treatments):
                rows.append({"stratum": lab, "k": k + 1, "l": l + 1, "lambda": lam[k, l]})
    return res, warnings, fingerprint, pd.DataFrame(rows), None


def cmd_simulate(args):
    spec = orc.PopulationSpec.load(args.spec)
    fingerprint = {"path": str(args.spec), "sha256": _sha256(args.spec)}
    mc = monte_carlo(spec, args.n, args.reps, seed=args.seed, n_jobs=args.jobs)
    warnings = []
    if mc.n_failed:
        warnings.append(f"{mc.n_failed} of {mc.reps} replicates failed and were skipped")
    res = {"n": mc.n, "reps": mc.reps, "failed": mc.n_failed, "noise": "normal",
           "estimators": {k: s.to_dict() for k, s in mc.summaries.items()}}
    rows = []
    for kind, s in mc.summaries.items():
        for k in range(spec.n_treatments):
            rows.append({"estimator": kind, "arm": k + 1, "estimand": s.estimand[k],
                         "mean": s.mean[k], "bias": s.bias[k], "mc_se": s.mc_se[k],
                         "sd": s.sd[k], "mean_se": s.mean_se[k], "coverage": s.coverage[k]})
    return res, warnings, fingerprint, pd.DataFrame(rows), None


COMMANDS = {"decompose": cmd_decompose, "estimate": cmd_estimate,
            "oracle": cmd_oracle, "simulate": cmd_simulate}


# -- output ----------------------------------------------------------------

def _print_decompose(res, table, out):
    print("Panel A: uninteracted regression", file=out)
    cols = [("beta", "Coefficient"), ("own", "Own effect"), ("contamination", "Contamination")]
    if "worst_lower" in table:
        cols += [("worst_lower", "Worst-case lower"), ("worst_upper", "Worst-case upper")]
    ses = {"beta": "beta_se", "own": "own_se", "contamination": "contamination_se"}
    width = max(16, *(len(a) + 2 for a in table["arm"]))
    print(" " * width + "".join(f"{h:>18}" for _, h in cols), file=out)
    for _, row in table.iterrows():
        print(f"{row['arm']:<{width}}" + "".join(f"{row[c]:>18.4f}" for c, _ in cols), file=out)
        se = "".join(
            f"{'(' + format(row[ses[c]], '.4f') + ')':>18}" if c in ses and np.isfinite(row[ses[c]])
            else " " * 18 for c, _ in cols)
        print(" " * width + se, file=out)
    h = res["heterogeneity_sd"]
    print(f"\nAdjusted SD of conditional effects: "
          + ", ".join(f"{a} {v:.4f}" for a, v in zip(res["arms"], h["adjusted"])), file=out)
    if "correlation" in res:
        print("Own-weight / effect correlation: "
              + ", ".join(f"{a} {v:.4f}" if np.isfinite(v) else f"{a} undefined"
                          for a, v in zip(res["arms"], res["correlation"]["own"])),
              file=out)


def _print_estimate(table, out):
    print("Panel B: treatment effect estimates", file=out)
    kinds = list(dict.fromkeys(table["estimator"]))
    arms = list(dict.fromkeys(table["arm"]))
    width = max(16, *(len(a) + 2 for a in arms))
    print(" " * width + "".join(f"{k:>18}" for k in kinds), file=out)
    for arm in arms:
        sub = table[table["arm"] == arm].set_index("estimator")
        print(f"{arm:<{width}}" + "".join(f"{sub.loc[k, 'beta']:>18.4f}" for k in kinds), file=out)
        print(" " * width + "".join(f"{'(' + format(sub.loc[k, 'se_robust'], '.4f') + ')':>18}"
                                    for k in kinds), file=out)
        known = "".join(f"{'[' + format(sub.loc[k, 'se_known_pscore'], '.4f') + ']':>18}"
                        if np.isfinite(sub.loc[k, "se_known_pscore"]) else " " * 18 for k in kinds)
        print(" " * width + known, file=out)
    print("(robust SE)  [known-propensity SE]", file=out)


def _print_table(command, res, table, out):
    if command == "decompose":
        _print_decompose(res, table, out)
    elif command == "estimate":
        _print_estimate(table, out)
    else:
        with pd.option_context("display.width", 120, "display.max_rows", 200):
            print(table.to_string(index=False, float_format=lambda v: f"{v:.6g}"), file=out)
    if command == "oracle" and "check" in res:
        c = res["check"]
        print(f"\nenumeration check ({c['rows']} rows): "
              f"{'agree' if c['agree'] else 'DISAGREE'}; max diffs {c['max_abs_diff']}", file=out)


def _command_echo(args) -> dict:
    skip = {"json", "csv", "quiet", "func"}
    return {"name": args.command,
            "options": {k: v for k, v in sorted(vars(args).items()) if k not in skip}}


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        res, warnings, fingerprint, table, scatter = COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    report = _jsonable({
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "contambias", "version": __version__},
        "command": _command_echo(args),
        "input": fingerprint,
        "seed": args.seed,
        "results": res,
        "warnings": warnings,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })
    jsonschema.validate(report, report_schema())
    if not args.quiet:
        _print_table(args.command, res, table, out)
        for w in warnings:
            print(f"warning: {w}", file=out)
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    if args.csv:
        table.to_csv(args.csv, index=False)
        if scatter is not None:
            p = Path(args.csv)
            scatter.to_csv(p.with_name(p.stem + "_strata" + p.suffix), index=False)
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
