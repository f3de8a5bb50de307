"""End-to-end orchestration: data, models, fusion, calibration, report.

A run executes the full scoring workflow in order -- load or generate, split
by week, fit preprocessing on train, train the Bayesian scorer and both the
fairness-constrained and unconstrained boosted ensembles, score drift, pick
the fusion weight on validation, temperature-calibrate, then audit metrics,
fairness gaps, stability and per-case attributions. Every artifact (report
JSON, model files, score CSVs, plot-data CSVs) is deterministic for a fixed
config and seed.
"""

from __future__ import annotations

import csv
import json
import math
import shutil
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import SCHEMA_VERSION, bnn, calibration, explain, fusion, gbdt, metrics, preprocess
from .data import Dataset, SynthSpec, TimeSplit, load_tables, split_by_week, synth_generate
from .errors import ConfigError, NotFoundError, SchemaError, StageError

VARIANTS = ("bnn", "gbdt_unconstrained", "gbdt_fair", "fused", "fused_calibrated")

MODEL_FILES = {
    "preprocessor": "preprocessor.json",
    "bnn": "bnn.json",
    "gbdt_fair": "gbdt_fair.json",
    "gbdt_unconstrained": "gbdt_unconstrained.json",
    "fusion": "fusion.json",
    "temperature": "temperature.json",
}

SCORE_COLUMNS = ("case_id", "mu_bnn", "u_epi", "u_ale", "mu_gbdt", "fused", "calibrated")


@dataclass
class BnnConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    sigma0: float = 1.0
    epochs: int = 100
    lr: float = 5e-5
    batch_size: int = 512
    s_train: int = 1
    s_predict: int = 30


@dataclass
class DriftConfig:
    tau: float = 0.10
    n_bins: int = 10


@dataclass
class MetricsConfig:
    target_fpr: float = 0.01
    ece_bins: int = 15
    delta: float = 0.5
    stability_split_week: Optional[int] = None  # None: midpoint of test weeks


@dataclass
class RunConfig:
    data: dict
    split: TimeSplit
    seed: int = 0
    group_column: str = "group"
    epsilon: float = 1e-8
    bnn: BnnConfig = field(default_factory=BnnConfig)
    gbdt: gbdt.GbdtParams = field(default_factory=lambda: gbdt.GbdtParams(lambda_fair=2.0))
    drift: DriftConfig = field(default_factory=DriftConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    explain_top_k: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        if "data" not in d or "split" not in d:
            raise ConfigError("config requires 'data' and 'split' sections")

        def build(klass, value, name, **defaults):
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError(f"'{name}' must be a JSON object")
            bad = set(value) - set(klass.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown {name} option(s): {sorted(bad)}")
            return klass(**{**defaults, **value})

        split = d["split"]
        if not isinstance(split, dict) or "cut_week" not in split or "val_weeks" not in split:
            raise ConfigError("'split' requires cut_week and val_weeks")
        cfg = cls(
            data=dict(d["data"]),
            split=TimeSplit(cut_week=int(split["cut_week"]), val_weeks=int(split["val_weeks"])),
            seed=int(d.get("seed", 0)),
            group_column=str(d.get("group_column", "group")),
            epsilon=float(d.get("epsilon", 1e-8)),
            bnn=build(BnnConfig, d.get("bnn"), "bnn"),
            # the run-level default enables the fairness constraint; the bare
            # GbdtParams default keeps the library class unconstrained
            gbdt=build(gbdt.GbdtParams, d.get("gbdt"), "gbdt", lambda_fair=2.0),
            drift=build(DriftConfig, d.get("drift"), "drift"),
            metrics=build(MetricsConfig, d.get("metrics"), "metrics"),
            explain_top_k=int(d.get("explain_top_k", 20)),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if "synth" in self.data:
            SynthSpec.from_dict(self.data["synth"]).validate()
        elif "base_csv" in self.data:
            base = Path(self.data["base_csv"])
            if not base.exists():
                raise ConfigError(f"base_csv path does not exist: {base}")
            for p in self.data.get("aux_csv", []):
                if not Path(p).exists():
                    raise ConfigError(f"aux_csv path does not exist: {p}")
        else:
            raise ConfigError("data section must provide either 'synth' or 'base_csv'")
        self.gbdt.validate()
        for name, v in (("drift.tau", self.drift.tau), ("metrics.target_fpr", self.metrics.target_fpr),
                        ("metrics.delta", self.metrics.delta), ("gbdt.delta", self.gbdt.delta)):
            if name.endswith("tau"):
                if v < 0:
                    raise ConfigError(f"{name} must be >= 0")
            elif not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.bnn.epochs < 0 or self.bnn.s_train < 1 or self.bnn.s_predict < 1:
            raise ConfigError("bnn epochs must be >= 0 and sample counts >= 1")
        if self.explain_top_k < 0:
            raise ConfigError("explain_top_k must be >= 0")

    def to_json_dict(self) -> dict:
        return {
            "data": self.data,
            "split": {"cut_week": self.split.cut_week, "val_weeks": self.split.val_weeks},
            "seed": self.seed,
            "group_column": self.group_column,
            "epsilon": self.epsilon,
            "bnn": asdict(self.bnn),
            "gbdt": asdict(self.gbdt),
            "drift": asdict(self.drift),
            "metrics": asdict(self.metrics),
            "explain_top_k": self.explain_top_k,
        }


def _seeds(config: RunConfig) -> dict:
    return {"data": config.seed, "bnn_train": config.seed + 1, "bnn_predict": config.seed + 2}


@dataclass
class RunResult:
    """In-memory outcome of one run: report dict plus artifacts to persist."""

    report: dict
    models: dict
    score_tables: dict  # partition -> list of row tuples
    plot_tables: dict  # filename -> (header, rows)


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, str(exc)) from exc
        return False


def _load_dataset(config: RunConfig) -> Dataset:
    if "synth" in config.data:
        spec = SynthSpec.from_dict(config.data["synth"])
        return synth_generate(spec, config.seed)
    return load_tables(
        config.data["base_csv"],
        config.data.get("aux_csv", []),
        group_column=config.group_column,
    )


def execute(config: RunConfig) -> RunResult:
    """Run every stage and return the report plus artifacts (nothing written)."""
    seeds = _seeds(config)

    with _Stage("load"):
        ds = _load_dataset(config)
    with _Stage("split"):
        train, val, test = split_by_week(ds, config.split)

    with _Stage("preprocess"):
        plan = preprocess.default_plan(train)
        state = preprocess.fit(train, plan, config.epsilon)
        X_tr, _ = preprocess.transform(state, train)
        X_va, _ = preprocess.transform(state, val)
        X_te, _ = preprocess.transform(state, test)
        feature_names = preprocess.model_feature_names(state)
        y_tr, y_va, y_te = train.labels(), val.labels(), test.labels()
        g_tr, g_va, g_te = train.groups(), val.groups(), test.groups()

    with _Stage("bnn"):
        layer_sizes = [X_tr.shape[1]] + list(config.bnn.hidden) + [1]
        net = bnn.init_model(layer_sizes, config.bnn.sigma0, seed=seeds["bnn_train"], mc_samples=config.bnn.s_predict)
        bnn.train(net, X_tr, y_tr, config.bnn.epochs, config.bnn.lr, config.bnn.batch_size, config.bnn.s_train)
        S, pseed = config.bnn.s_predict, seeds["bnn_predict"]
        bnn_tr = bnn.predict_mc(net, X_tr, S, pseed)
        bnn_va = bnn.predict_mc(net, X_va, S, pseed)
        bnn_te = bnn.predict_mc(net, X_te, S, pseed)

    with _Stage("gbdt"):
        if g_tr is None and config.gbdt.lambda_fair > 0:
            warnings.warn("no group labels: fairness constraint and audits are skipped")
        fair_model = gbdt.fit((X_tr, y_tr, g_tr), (X_va, y_va, g_va), config.gbdt)
        plain_params = replace(config.gbdt, lambda_fair=0.0)
        plain_model = gbdt.fit((X_tr, y_tr, g_tr), (X_va, y_va, g_va), plain_params)
        fair_tr, fair_va, fair_te = (gbdt.predict_proba(fair_model, X) for X in (X_tr, X_va, X_te))
        plain_te = gbdt.predict_proba(plain_model, X_te)

    with _Stage("drift"):
        pre_tr = 0.5 * fair_tr + 0.5 * bnn_tr[0]
        pre_va = 0.5 * fair_va + 0.5 * bnn_va[0]
        # the decision-date column is a clock: its PSI fires on any time split
        # regardless of distribution change, so it is left out of the scan
        drift_cols = [j for j, n in enumerate(feature_names) if "date_decision" not in n]
        drift_report = fusion.drift_test(
            (X_tr[:, drift_cols], pre_tr),
            (X_va[:, drift_cols], pre_va),
            config.drift.tau,
            config.drift.n_bins,
            [feature_names[j] for j in drift_cols],
        )

    with _Stage("fusion"):
        choice = fusion.select_weight(fair_va, bnn_va[0], y_va, val.weeks(), drift_report)
        fused_tr = fusion.fuse(fair_tr, bnn_tr[0], choice.beta)
        fused_va = fusion.fuse(fair_va, bnn_va[0], choice.beta)
        fused_te = fusion.fuse(fair_te, bnn_te[0], choice.beta)

    with _Stage("calibration"):
        temp = calibration.fit_temperature(fused_va, y_va)
        cal_tr = calibration.apply_temperature(fused_tr, temp.t_cal)
        cal_va = calibration.apply_temperature(fused_va, temp.t_cal)
        cal_te = calibration.apply_temperature(fused_te, temp.t_cal)

    with _Stage("metrics"):
        test_weeks = test.weeks()
        split_week = config.metrics.stability_split_week
        if split_week is None:
            split_week = (int(test_weeks.min()) + int(test_weeks.max())) // 2
        variant_scores_te = {
            "bnn": bnn_te[0],
            "gbdt_unconstrained": plain_te,
            "gbdt_fair": fair_te,
            "fused": fused_te,
            "fused_calibrated": cal_te,
        }
        variant_scores_va = {
            "bnn": bnn_va[0],
            "gbdt_unconstrained": gbdt.predict_proba(plain_model, X_va),
            "gbdt_fair": fair_va,
            "fused": fused_va,
            "fused_calibrated": cal_va,
        }
        variants = {}
        for name in VARIANTS:
            s_te = variant_scores_te[name]
            entry = {
                "test_metrics": metrics.compute_bundle(
                    s_te, y_te, config.metrics.target_fpr, config.metrics.ece_bins
                ).to_json_dict(),
                "stability_test": metrics.stability_report(s_te, y_te, test_weeks, split_week).to_json_dict(),
                "fairness_val": None,
                "fairness_test": None,
            }
            if g_te is not None and g_va is not None:
                entry["fairness_val"] = metrics.fairness_gaps(
                    variant_scores_va[name], y_va, g_va, config.metrics.delta
                ).to_json_dict()
                entry["fairness_test"] = metrics.fairness_gaps(
                    s_te, y_te, g_te, config.metrics.delta
                ).to_json_dict()
            variants[name] = entry

    with _Stage("explain"):
        order = np.argsort(-cal_te, kind="mergesort")[: config.explain_top_k]
        test_ids = test.case_ids()
        explanations = []
        for i in order:
            attr = explain.tree_shap(fair_model, X_te[i], feature_names)
            explanations.append(attr.to_json_dict(case_id=int(test_ids[i])))

    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_json_dict(),
        "seeds": _seeds(config),
        "n_rows": {"train": len(train), "val": len(val), "test": len(test)},
        "stability_split_week": split_week,
        "variants": variants,
        "drift": drift_report.to_json_dict(),
        "fusion": choice.to_json_dict(),
        "temperature": temp.to_json_dict(),
        "explanations": explanations,
    }

    fusion_artifact = {
        "schema_version": SCHEMA_VERSION,
        "beta": choice.beta,
        "objective": choice.objective,
        "objective_value": choice.objective_value,
        "used_recent_half": choice.used_recent_half,
        "s_predict": config.bnn.s_predict,
        "predict_seed": seeds["bnn_predict"],
    }

    def rows_for(part, bnn_out, gb, fs, cal):
        ids = part.case_ids()
        mu, epi, ale = bnn_out
        return [
            (int(ids[i]), mu[i], epi[i], ale[i], gb[i], fs[i], cal[i])
            for i in range(len(ids))
        ]

    score_tables = {
        "train": rows_for(train, bnn_tr, fair_tr, fused_tr, cal_tr),
        "val": rows_for(val, bnn_va, fair_va, fused_va, cal_va),
        "test": rows_for(test, bnn_te, fair_te, fused_te, cal_te),
    }

    plot_tables = _plot_tables(report, variant_scores_te, y_te)

    models = {
        "preprocessor": state,
        "bnn": net,
        "gbdt_fair": fair_model,
        "gbdt_unconstrained": plain_model,
        "fusion": fusion_artifact,
        "temperature": temp,
    }
    return RunResult(report=report, models=models, score_tables=score_tables, plot_tables=plot_tables)


def _plot_tables(report: dict, variant_scores_te: dict, y_te) -> dict:
    reliability_rows = []
    for name in VARIANTS:
        for lo, hi, count, mean_score, frac_pos in metrics.reliability_table(variant_scores_te[name], y_te):
            reliability_rows.append(
                (name, lo, hi, count, "" if mean_score is None else mean_score, "" if frac_pos is None else frac_pos)
            )
    week_rows = []
    gap_rows = []
    aucpr_rows = []
    for name in VARIANTS:
        entry = report["variants"][name]
        for wk, ap in entry["stability_test"]["week_series"]:
            week_rows.append((name, wk, ap))
        aucpr_rows.append((name, entry["test_metrics"]["auc_pr"]))
        if entry["fairness_test"] is not None:
            gap_rows.append((name, entry["fairness_test"]["dp_gap"], entry["test_metrics"]["auc_pr"]))
    return {
        "reliability_bins.csv": (("variant", "bin_lo", "bin_hi", "count", "mean_score", "frac_positive"), reliability_rows),
        "week_trend.csv": (("variant", "week", "auc_pr"), week_rows),
        "gap_vs_aucpr.csv": (("variant", "dp_gap_test", "auc_pr_test"), gap_rows),
        "variant_aucpr.csv": (("variant", "auc_pr_test"), aucpr_rows),
    }


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _dump_json(path: Path, obj: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run(config: RunConfig, out_dir) -> dict:
    """Execute the pipeline and persist report, models, scores and plot data.

    Partial artifacts are removed if any stage fails. Returns the report dict.
    """
    result = execute(config)
    out = Path(out_dir)
    written: list = []
    try:
        with _Stage("emit"):
            out.mkdir(parents=True, exist_ok=True)
            models_dir = out / "models"
            plots_dir = out / "plots"
            models_dir.mkdir(exist_ok=True)
            plots_dir.mkdir(exist_ok=True)

            for key, obj in result.models.items():
                path = models_dir / MODEL_FILES[key]
                if key == "fusion":
                    _dump_json(path, obj)
                else:
                    obj.save(path)
                written.append(path)
            for part, rows in result.score_tables.items():
                path = out / f"scores_{part}.csv"
                _write_csv(path, SCORE_COLUMNS, rows)
                written.append(path)
            for fname, (header, rows) in result.plot_tables.items():
                path = plots_dir / fname
                _write_csv(path, header, rows)
                written.append(path)
            report_path = out / "report.json"
            _dump_json(report_path, result.report)
            written.append(report_path)
    except StageError:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return result.report


def run_many(config: RunConfig, n_seeds: int, out_dir) -> dict:
    """Repeat the run under seeds seed..seed+n-1 and write an aggregate report."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    out = Path(out_dir)
    reports = []
    for k in range(n_seeds):
        cfg = replace(config, seed=config.seed + k)
        reports.append(run(cfg, out / f"seed_{cfg.seed}"))
    agg = aggregate_reports(reports)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "aggregate.json", agg)
    return agg


def aggregate_reports(reports: list) -> dict:
    """Per-metric mean/std (population) across per-seed reports."""
    if not reports:
        raise ConfigError("no reports to aggregate")
    seeds = [r["seeds"]["data"] for r in reports]

    def mean_std(values):
        arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
        if len(arr) == 0:
            return None
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    variants = {}
    metric_keys = ("auc_roc", "auc_pr", "recall_at_fpr", "brier", "ece")
    for name in VARIANTS:
        entry = {"test_metrics": {}, "stability_drop": None, "fairness_test": {}}
        for mk in metric_keys:
            entry["test_metrics"][mk] = mean_std(r["variants"][name]["test_metrics"][mk] for r in reports)
        entry["stability_drop"] = mean_std(r["variants"][name]["stability_test"]["drop"] for r in reports)
        for gk in ("dp_gap", "eo_gap", "tpr_gap", "fpr_gap"):
            entry["fairness_test"][gk] = mean_std(
                (r["variants"][name]["fairness_test"] or {}).get(gk) for r in reports
            )
        variants[name] = entry
    return {
        "schema_version": SCHEMA_VERSION,
        "n_runs": len(reports),
        "seeds": seeds,
        "variants": variants,
        "fusion_beta": mean_std(r["fusion"]["beta"] for r in reports),
        "temperature": mean_std(r["temperature"]["t_cal"] for r in reports),
        "drift_d_shift": mean_std(r["drift"]["d_shift"] for r in reports),
    }


def _load_artifacts(model_dir):
    model_dir = Path(model_dir)
    paths = {k: model_dir / v for k, v in MODEL_FILES.items()}
    for k, p in paths.items():
        if not p.exists():
            raise NotFoundError(f"missing model artifact: {p}")
    state = preprocess.PreprocessorState.load(paths["preprocessor"])
    net = bnn.BnnModel.load(paths["bnn"])
    fair_model = gbdt.GbdtModel.load(paths["gbdt_fair"])
    with paths["fusion"].open(encoding="utf-8") as fh:
        fusion_artifact = json.load(fh)
    temp = calibration.TemperatureModel.load(paths["temperature"])

    versions = {}
    for k, p in paths.items():
        if k == "gbdt_unconstrained":
            continue
        with p.open(encoding="utf-8") as fh:
            versions[k] = json.load(fh).get("schema_version")
    if len(set(versions.values())) > 1 or set(versions.values()) != {SCHEMA_VERSION}:
        raise SchemaError(f"schema_version mismatch across artifacts: {versions} (engine speaks {SCHEMA_VERSION})")
    return state, net, fair_model, fusion_artifact, temp


def score(model_dir, input_csv, out_csv, aux_paths=(), group_column: str = "group") -> int:
    """Score a base CSV with persisted artifacts; returns the row count."""
    state, net, fair_model, fusion_artifact, temp = _load_artifacts(model_dir)
    ds = load_tables(input_csv, aux_paths, group_column=group_column, require_label=False)
    X, _ = preprocess.transform(state, ds)
    mu, epi, ale = bnn.predict_mc(net, X, int(fusion_artifact["s_predict"]), int(fusion_artifact["predict_seed"]))
    gb = gbdt.predict_proba(fair_model, X)
    fused = fusion.fuse(gb, mu, float(fusion_artifact["beta"]))
    cal = calibration.apply_temperature(fused, temp.t_cal)
    ids = ds.case_ids()
    rows = [(int(ids[i]), mu[i], epi[i], ale[i], gb[i], fused[i], cal[i]) for i in range(len(ids))]
    _write_csv(Path(out_csv), SCORE_COLUMNS, rows)
    return len(rows)


def explain_case(model_dir, input_csv, case_id: int, top_k: int, aux_paths=(), group_column: str = "group") -> dict:
    """Top-k margin attributions for one case in a base CSV."""
    state, net, fair_model, fusion_artifact, temp = _load_artifacts(model_dir)
    ds = load_tables(input_csv, aux_paths, group_column=group_column, require_label=False)
    idx = None
    for i, row in enumerate(ds.rows):
        if row.case_id == case_id:
            idx = i
            break
    if idx is None:
        raise NotFoundError(f"case_id {case_id} not found in {input_csv}")
    X, _ = preprocess.transform(state, ds)
    attr = explain.tree_shap(fair_model, X[idx], preprocess.model_feature_names(state))
    return attr.to_json_dict(case_id=case_id, top_k=top_k)
