"""Command-line front end: learn, simulate, sensitivity, validate.

Configuration comes from an optional YAML file plus flags; flags win. All
result files are written atomically (temp file + rename) and embed the seed
and a hash of the effective configuration, so a failed run leaves nothing
behind and a finished one is traceable.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile

import yaml

from .core import (
    DataError,
    DesignError,
    EstimationError,
    StudyDesign,
    UtilityConfig,
    baseline_policy,
    load_dataset,
)
from .idbounds import SmoothnessParams, build_bound_model
from .learner import (
    LearnerConfig,
    learn_from_components,
    objective_tables_csv,
    prepare_components,
    sensitivity_sweep,
    sweep_to_csv,
)
from .simlab import regret_experiment

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4


def _atomic_write(path: str, content: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _config_hash(cfg: dict) -> str:
    # hash only computation-relevant keys, not where results are written
    slim = {k: v for k, v in cfg.items() if k not in ("out", "command")}
    blob = json.dumps(slim, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_design(path: str) -> StudyDesign:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if isinstance(doc, dict) and "cutoffs" in doc:
        doc = doc["cutoffs"]
    if not isinstance(doc, dict):
        raise DataError(
            f"design file {path!r} must be a mapping of group label to cutoff"
        )
    return StudyDesign(doc)


def _merged_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise DataError(f"config file {args.config!r} must be a mapping")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("func", "config") or value is None:
            continue
        cfg[key] = value
    _validate_ranges(cfg)
    return cfg


def _validate_ranges(cfg: dict):
    checks = [
        ("folds", lambda v: v >= 2, "must be >= 2"),
        ("reps", lambda v: v >= 2, "must be >= 2"),
        ("clamp", lambda v: 0 < v < 0.5, "must be in (0, 0.5)"),
        ("cost", lambda v: v >= 0, "must be nonnegative"),
        ("threads", lambda v: v >= 1, "must be >= 1"),
        ("multiplier", lambda v: v >= 0, "must be nonnegative"),
    ]
    for key, ok, msg in checks:
        if key in cfg and cfg[key] is not None and not ok(cfg[key]):
            raise DataError(f"--{key} {msg}, got {cfg[key]}")
    for key in ("multipliers", "costs"):
        if key in cfg and cfg[key] is not None:
            vals = cfg[key]
            if not vals:
                raise DataError(f"--{key} needs at least one value")
            if any(v < 0 for v in vals):
                raise DataError(f"--{key} values must be nonnegative")


def _learner_config(cfg: dict) -> LearnerConfig:
    return LearnerConfig(
        n_folds=int(cfg.get("folds", 5)),
        seed=int(cfg.get("seed", 0)),
        grid_mode=str(cfg.get("grid", "observed")),
        multiplier=float(cfg.get("multiplier", 1.0)),
        utility=UtilityConfig(cost=float(cfg.get("cost", 0.0))),
        clamp_eps=float(cfg.get("clamp", 0.01)),
    )


def _provenance(cfg: dict) -> dict:
    return {"config_hash": _config_hash(cfg), "seed": int(cfg.get("seed", 0))}


def _csv_with_provenance(body: str, cfg: dict) -> str:
    prov = _provenance(cfg)
    return f"# config_hash={prov['config_hash']} seed={prov['seed']}\n" + body


def cmd_learn(args) -> int:
    cfg = _merged_config(args)
    design = _load_design(cfg["design"])
    dataset = load_dataset(cfg["input"], design)
    lcfg = _learner_config(cfg)
    components = prepare_components(dataset, lcfg)
    learned = learn_from_components(components, multiplier=lcfg.multiplier,
                                    utility=lcfg.utility)
    params = SmoothnessParams(lam=components.base_smoothness.lam,
                              multiplier=lcfg.multiplier)
    bounds = build_bound_model(dataset, components.nuisances, params,
                               curves=components.curves)
    base = baseline_policy(design)
    result = {
        "provenance": _provenance(cfg),
        "learned_cutoffs": {str(k): v for k, v in learned.policy.cutoffs.items()},
        "baseline_cutoffs": {str(k): v for k, v in base.cutoffs.items()},
        "changes": {str(k): learned.policy.cutoffs[k] - base.cutoffs[k]
                    for k in design.groups},
        "objective": {
            "learned": {"iden": learned.breakdown.iden, "dr": learned.breakdown.dr,
                        "xi2_worst": learned.breakdown.xi2_worst,
                        "total": learned.breakdown.total},
            "baseline": {"iden": learned.baseline_breakdown.iden,
                         "dr": learned.baseline_breakdown.dr,
                         "xi2_worst": learned.baseline_breakdown.xi2_worst,
                         "total": learned.baseline_breakdown.total},
            "gain": learned.objective_gain,
        },
        "diagnostics": {
            "multiplier": learned.diagnostics["multiplier"],
            "cost": learned.diagnostics["cost"],
            "lambda_base": {f"w={w},g={g},g'={gp}": v for (w, g, gp), v
                            in learned.diagnostics["lambda_base"].items()},
            "lipschitz_width": learned.diagnostics["lipschitz_width"],
        },
    }
    out = cfg["out"]
    _atomic_write(os.path.join(out, "learned_policy.json"),
                  json.dumps(result, indent=2, sort_keys=True) + "\n")
    _atomic_write(os.path.join(out, "objective_curves.csv"),
                  _csv_with_provenance(objective_tables_csv(learned, design), cfg))
    _atomic_write(os.path.join(out, "bound_curves.csv"),
                  _csv_with_provenance(bounds.export_curves_csv(), cfg))
    print(f"learned policy written to {out} "
          f"(objective gain {learned.objective_gain:.6g})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _merged_config(args)
    scenarios = cfg.get("scenarios", ["A"])
    for s in scenarios:
        if s not in ("A", "B"):
            raise DataError(f"unknown scenario {s!r}; choose from A, B")
    report = regret_experiment(
        scenarios=scenarios,
        n_list=cfg.get("sizes", [1000]),
        multipliers=cfg.get("multipliers", [1.0]),
        reps=int(cfg.get("reps", 10)),
        seed=int(cfg.get("seed", 0)),
    )
    out = cfg["out"]
    _atomic_write(os.path.join(out, "regret.csv"),
                  _csv_with_provenance(report.to_csv(), cfg))
    meta = json.loads(report.metadata())
    meta.update(_provenance(cfg))
    _atomic_write(os.path.join(out, "regret_meta.json"),
                  json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"regret report written to {out} ({len(report.cells)} cells)")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = _merged_config(args)
    design = _load_design(cfg["design"])
    dataset = load_dataset(cfg["input"], design)
    multipliers = cfg.get("multipliers") or [1.0]
    costs = cfg.get("costs") or [0.0]
    rows = sensitivity_sweep(dataset, multipliers, costs, _learner_config(cfg))
    out = cfg["out"]
    _atomic_write(os.path.join(out, "sweep.csv"),
                  _csv_with_provenance(sweep_to_csv(rows), cfg))
    print(f"sensitivity sweep written to {out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _merged_config(args)
    design = _load_design(cfg["design"])
    dataset = load_dataset(cfg["input"], design)
    counts = {str(label): int((dataset.rank == design.rank_of(label)).sum())
              for label in design.groups}
    print(f"ok: {len(dataset)} records, {design.q} groups {counts}, "
          f"cutoffs {[design.cutoff_of_rank(r) for r in range(1, design.q + 1)]}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file; flags override its keys")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int,
                   help="parallelism cap (accepted for interface stability; "
                        "computation is vectorized in-process)")


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--input", help="CSV data file with columns x,g,w,y")
    p.add_argument("--design", help="YAML mapping of group label to baseline cutoff")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdsafe",
        description="Safe threshold-policy learning from multi-cutoff "
                    "regression discontinuity data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="learn a safe threshold policy from data")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--folds", type=int, help="cross-fitting folds (default 5)")
    p.add_argument("--grid", help="candidate grid: observed | uniform:N")
    p.add_argument("--multiplier", type=float, help="smoothness multiplier M")
    p.add_argument("--cost", type=float, help="treatment cost C")
    p.add_argument("--clamp", type=float, help="propensity clamp epsilon")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("simulate", help="run Monte Carlo regret experiments")
    _add_common(p)
    p.add_argument("--scenarios", nargs="+", choices=["A", "B"])
    p.add_argument("--sizes", nargs="+", type=int, help="sample sizes")
    p.add_argument("--multipliers", nargs="+", type=float)
    p.add_argument("--reps", type=int, help="replications per cell (>= 2)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sensitivity",
                       help="sweep smoothness multipliers and treatment costs")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--grid", help="candidate grid: observed | uniform:N")
    p.add_argument("--multipliers", nargs="+", type=float)
    p.add_argument("--costs", nargs="+", type=float)
    p.add_argument("--clamp", type=float)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("validate", help="parse and check data against a design")
    _add_common(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for req in ("input", "design"):
            if hasattr(args, req) and getattr(args, req) is None:
                cfg_file = getattr(args, "config", None)
                if not cfg_file or req not in (yaml.safe_load(open(cfg_file)) or {}):
                    parser.error(f"--{req} is required (flag or config key)")
        if getattr(args, "out", None) is None and args.command != "validate":
            cfg_file = getattr(args, "config", None)
            if not cfg_file or "out" not in (yaml.safe_load(open(cfg_file)) or {}):
                parser.error("--out is required (flag or config key)")
        return args.func(args)
    except (DataError, DesignError) as exc:
        print(f"error (validation): {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"error (estimation): {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
