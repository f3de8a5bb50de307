"""Command-line entry points: synth, run, score, explain, report.

Exit codes: 0 success, 2 configuration error, 3 data/schema error,
4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import SynthSpec, synth_generate, write_base_csv
from .errors import (
    ConfigError,
    CredScoreError,
    IntegrityError,
    NotFoundError,
    NumericalError,
    SchemaError,
    UndefinedMetricError,
)
from .pipeline import RunConfig, aggregate_reports, explain_case, run, run_many, score


def _exit_code(exc: BaseException) -> int:
    seen = exc
    while seen is not None:
        if isinstance(seen, ConfigError):
            return 2
        if isinstance(seen, (SchemaError, IntegrityError, NotFoundError)):
            return 3
        if isinstance(seen, (NumericalError, UndefinedMetricError)):
            return 4
        seen = seen.__cause__
    return 2 if isinstance(exc, CredScoreError) else 1


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with p.open(encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e


def _cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.config)) if args.config else SynthSpec()
    ds = synth_generate(spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "base.csv"
    write_base_csv(ds, path)
    print(f"wrote {len(ds)} rows to {path}")
    return 0


def _cmd_run(args) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    config = RunConfig.from_dict(raw)
    if args.seeds > 1:
        agg = run_many(config, args.seeds, args.out)
        print(f"{args.seeds} runs complete; aggregate at {Path(args.out) / 'aggregate.json'}")
        for name, entry in agg["variants"].items():
            ap = entry["test_metrics"]["auc_pr"]
            print(f"  {name}: test AUC-PR {ap['mean']:.4f} +/- {ap['std']:.4f}")
    else:
        report = run(config, args.out)
        print(f"run complete; report at {Path(args.out) / 'report.json'}")
        for name, entry in report["variants"].items():
            print(f"  {name}: test AUC-PR {entry['test_metrics']['auc_pr']:.4f}")
    return 0


def _cmd_score(args) -> int:
    n = score(args.model_dir, args.input, args.out, aux_paths=args.aux)
    print(f"scored {n} rows to {args.out}")
    return 0


def _cmd_explain(args) -> int:
    result = explain_case(args.model_dir, args.input, args.case_id, args.top_k, aux_paths=args.aux)
    text = json.dumps(result, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote attribution to {args.out}")
    else:
        print(text)
    return 0


def _cmd_report(args) -> int:
    reports = []
    run_dir = Path(args.runs)
    if not run_dir.exists():
        raise NotFoundError(f"runs directory not found: {run_dir}")
    for path in sorted(run_dir.glob("seed_*/report.json")):
        with path.open(encoding="utf-8") as fh:
            reports.append(json.load(fh))
    if not reports:
        raise NotFoundError(f"no seed_*/report.json files under {run_dir}")
    agg = aggregate_reports(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        json.dump(agg, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"aggregated {len(reports)} reports into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="credscore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic base CSV")
    p.add_argument("--config", help="generator spec JSON (defaults apply if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="execute the full scoring pipeline")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--seeds", type=int, default=1, help="number of repeated runs (seed, seed+1, ...)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("score", help="score a base CSV with persisted models")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--input", required=True, help="base CSV to score")
    p.add_argument("--aux", action="append", default=[], help="auxiliary CSV (repeatable)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("explain", help="attribute one case's margin to features")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--aux", action="append", default=[])
    p.add_argument("--case-id", type=int, required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", help="output JSON path (stdout if omitted)")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("report", help="aggregate per-seed reports into mean/std tables")
    p.add_argument("--runs", required=True, help="directory holding seed_*/report.json")
    p.add_argument("--out", required=True, help="aggregate JSON path")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CredScoreError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
