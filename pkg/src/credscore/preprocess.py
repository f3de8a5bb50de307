"""Train-fitted preprocessing: aggregation, imputation, encoding, scaling.

All statistics are estimated on the training partition only and then applied
unchanged to any partition, which keeps later weeks leakage-free. The numeric
path is median-impute then z-score with an epsilon-guarded denominator; the
categorical path is train-frequency encoding with unseen or missing values
mapped to 0.0. A binary missingness mask is returned for every feature and the
numeric mask columns are appended to the model input.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import date
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, SchemaError

AGGREGATORS = ("mean", "max", "min", "sum", "last")

_DAY_ZERO = date(1970, 1, 1).toordinal()


def _is_float(value) -> bool:
    if value is None:
        return False
    if isinstance(value, (int, float)):
        return True
    try:
        float(value)
        return True
    except (TypeError, ValueError):
        return False


def _to_float(value) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _date_to_days(value) -> Optional[float]:
    if value is None:
        return None
    try:
        return float(date.fromisoformat(str(value)).toordinal() - _DAY_ZERO)
    except ValueError:
        return None


@dataclass
class AggregationPlan:
    """Per aux table: ordered (field, aggregator) pairs, plus optional sort keys.

    Aggregators are exactly mean/max/min/sum/last. `last` takes the final
    observed value in table row order; when `order_by` names a column for a
    table, its rows are stably sorted by that column (dates or numbers) first.
    """

    per_table: dict = field(default_factory=dict)
    order_by: dict = field(default_factory=dict)

    def validate(self):
        for table, entries in self.per_table.items():
            for fname, agg in entries:
                if agg not in AGGREGATORS:
                    raise ConfigError(f"table '{table}' field '{fname}': unknown aggregator '{agg}'")


def default_plan(ds: Dataset) -> AggregationPlan:
    """All five aggregators for numeric aux fields, `last` for categorical ones."""
    per_table = {}
    for table in ds.aux_tables:
        fields: list = []
        for _, rec in table.rows:
            for k in rec:
                if k not in fields:
                    fields.append(k)
        numeric = []
        for f in fields:
            vals = [rec.get(f) for _, rec in table.rows]
            observed = [v for v in vals if v is not None]
            if observed and all(_is_float(v) for v in observed):
                numeric.append(f)
        entries = []
        for agg in AGGREGATORS:
            for f in fields:
                if f in numeric:
                    entries.append((f, agg))
                elif agg == "last":
                    entries.append((f, agg))
        per_table[table.name] = entries
    return AggregationPlan(per_table=per_table)


def _sort_key(value):
    days = _date_to_days(value)
    if days is not None:
        return days
    v = _to_float(value)
    return v if v is not None else float("-inf")


def aggregate_case(records: Sequence[dict], entries: Sequence[tuple], order_column: Optional[str] = None) -> list:
    """Pool one case's aux records into a fragment, one value per plan entry.

    Missing values are skipped per aggregator; a field with no observed value
    under an aggregator (or an empty record set) yields None at that position.
    """
    if order_column is not None and records:
        records = sorted(records, key=lambda r: _sort_key(r.get(order_column)))
    out = []
    for fname, agg in entries:
        raw = [r.get(fname) for r in records]
        if agg == "last":
            observed = [v for v in raw if v is not None]
            out.append(observed[-1] if observed else None)
            continue
        vals = [_to_float(v) for v in raw]
        vals = [v for v in vals if v is not None]
        if not vals:
            out.append(None)
        elif agg == "mean":
            out.append(float(np.mean(vals)))
        elif agg == "max":
            out.append(float(np.max(vals)))
        elif agg == "min":
            out.append(float(np.min(vals)))
        else:  # sum
            out.append(float(np.sum(vals)))
    return out


# base-table bookkeeping columns that never become model features; the
# decision date is bookkeeping by default (a clock input invites regime
# memorization and unstable extrapolation beyond the training weeks) but can
# be opted into as a days-since-epoch numeric via include_date
_NON_FEATURE_BASE = ("WEEK_NUM", "date_decision")


def _base_field_names(ds: Dataset, include_date: bool = False) -> list:
    names: list = []
    for row in ds.rows:
        for k in row.raw_base_fields:
            if k in names:
                continue
            if k == "date_decision":
                if include_date:
                    names.append(k)
            elif k not in _NON_FEATURE_BASE:
                names.append(k)
    return names


def assemble_raw(ds: Dataset, plan: AggregationPlan, base_fields: Optional[list] = None):
    """Raw (pre-imputation) value rows for every case: base fields then aux fragments.

    Returns (feature_names, rows) where rows is a list of value lists with
    None marking missing. Dates are converted to days-since-epoch numerics.
    """
    if base_fields is None:
        base_fields = _base_field_names(ds)
    names = list(base_fields)
    aux_index = {}
    for table in ds.aux_tables:
        if table.name not in plan.per_table:
            continue
        index: dict = {}
        for cid, rec in table.rows:
            index.setdefault(cid, []).append(rec)
        aux_index[table.name] = index
        for fname, agg in plan.per_table[table.name]:
            names.append(f"{table.name}__{agg}__{fname}")

    rows = []
    for row in ds.rows:
        values = []
        for f in base_fields:
            v = row.raw_base_fields.get(f)
            if f == "date_decision":
                values.append(_date_to_days(v))
            else:
                values.append(v)
        for table_name in plan.per_table:
            index = aux_index.get(table_name)
            records = index.get(row.case_id, []) if index else []
            values.extend(aggregate_case(records, plan.per_table[table_name], plan.order_by.get(table_name)))
        rows.append(values)
    return names, rows


@dataclass
class PreprocessorState:
    """Everything fitted on the training partition, immutable afterwards."""

    plan: AggregationPlan
    base_fields: list
    feature_order: list
    numeric_features: list
    categorical_features: list
    medians: dict
    freq_maps: dict
    means: dict
    stds: dict
    epsilon: float

    def to_json_dict(self) -> dict:
        from . import SCHEMA_VERSION

        return {
            "schema_version": SCHEMA_VERSION,
            "plan": {"per_table": {t: [list(e) for e in v] for t, v in self.plan.per_table.items()},
                     "order_by": dict(self.plan.order_by)},
            "base_fields": list(self.base_fields),
            "feature_order": list(self.feature_order),
            "numeric_features": list(self.numeric_features),
            "categorical_features": list(self.categorical_features),
            "medians": dict(self.medians),
            "freq_maps": {k: dict(v) for k, v in self.freq_maps.items()},
            "means": dict(self.means),
            "stds": dict(self.stds),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PreprocessorState":
        plan = AggregationPlan(
            per_table={t: [tuple(e) for e in v] for t, v in d["plan"]["per_table"].items()},
            order_by=dict(d["plan"].get("order_by", {})),
        )
        return cls(
            plan=plan,
            base_fields=list(d["base_fields"]),
            feature_order=list(d["feature_order"]),
            numeric_features=list(d["numeric_features"]),
            categorical_features=list(d["categorical_features"]),
            medians={k: float(v) for k, v in d["medians"].items()},
            freq_maps={k: {c: float(p) for c, p in v.items()} for k, v in d["freq_maps"].items()},
            means={k: float(v) for k, v in d["means"].items()},
            stds={k: float(v) for k, v in d["stds"].items()},
            epsilon=float(d["epsilon"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "PreprocessorState":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def median_of(values: Sequence[float]) -> float:
    """Median with the even-count rule: mean of the two middle values."""
    s = sorted(values)
    n = len(s)
    mid = n // 2
    if n % 2 == 1:
        return float(s[mid])
    return 0.5 * (s[mid - 1] + s[mid])


def fit(
    train: Dataset, plan: AggregationPlan, epsilon: float = 1e-8, include_date: bool = False
) -> PreprocessorState:
    """Fit medians, frequency maps and moments on the training partition only."""
    if len(train) == 0:
        raise ConfigError("cannot fit preprocessor on an empty training partition")
    plan.validate()
    base_fields = _base_field_names(train, include_date)
    names, rows = assemble_raw(train, plan, base_fields)
    n, d = len(rows), len(names)

    numeric, categorical = [], []
    for j, name in enumerate(names):
        observed = [rows[i][j] for i in range(n) if rows[i][j] is not None]
        if observed and all(_is_float(v) for v in observed):
            numeric.append(name)
        else:
            categorical.append(name)

    numeric_set = set(numeric)
    medians, means, stds, freq_maps = {}, {}, {}, {}
    for j, name in enumerate(names):
        col = [rows[i][j] for i in range(n)]
        if name in numeric_set:
            observed = [_to_float(v) for v in col if v is not None]
            if not observed:
                warnings.warn(f"numeric feature '{name}' has no observed training values; median defaults to 0")
                med = 0.0
            else:
                med = median_of(observed)
            medians[name] = med
            imputed = np.array([med if v is None else _to_float(v) for v in col], dtype=np.float64)
            means[name] = float(imputed.mean())
            stds[name] = float(imputed.std())  # population moment
        else:
            observed = [str(v) for v in col if v is not None]
            counts: dict = {}
            for v in observed:
                counts[v] = counts.get(v, 0) + 1
            total = len(observed)
            freq_maps[name] = {c: counts[c] / total for c in sorted(counts)} if total else {}

    return PreprocessorState(
        plan=plan,
        base_fields=base_fields,
        feature_order=names,
        numeric_features=numeric,
        categorical_features=categorical,
        medians=medians,
        freq_maps=freq_maps,
        means=means,
        stds=stds,
        epsilon=epsilon,
    )


def transform(state: PreprocessorState, ds: Dataset):
    """Map a Dataset to (X, mask) using train-fitted statistics.

    X holds the standardized numeric values and frequency-encoded categorical
    values in feature order, with the numeric mask columns appended; mask is
    the full n x d observation indicator (1 = observed).
    """
    for row in ds.rows:
        for k in row.raw_base_fields:
            if k in _NON_FEATURE_BASE:
                continue
            if k not in state.base_fields:
                raise SchemaError(f"unknown column '{k}' not seen at fit time")

    names, rows = assemble_raw(ds, state.plan, state.base_fields)
    if names != state.feature_order:
        raise SchemaError("assembled feature order does not match the fitted preprocessor")

    n, d = len(rows), len(names)
    numeric_set = set(state.numeric_features)
    values = np.zeros((n, d), dtype=np.float64)
    mask = np.zeros((n, d), dtype=np.float64)
    numeric_cols = [j for j, name in enumerate(names) if name in numeric_set]

    for j, name in enumerate(names):
        col = [rows[i][j] for i in range(n)]
        if name in numeric_set:
            mu, sd, med = state.means[name], state.stds[name], state.medians[name]
            denom = sd + state.epsilon
            raw = np.empty(n, dtype=np.float64)
            for i, v in enumerate(col):
                fv = _to_float(v) if v is not None else None
                if fv is None:
                    raw[i] = med
                else:
                    raw[i] = fv
                    mask[i, j] = 1.0
            values[:, j] = (raw - mu) / denom
        else:
            fmap = state.freq_maps.get(name, {})
            for i, v in enumerate(col):
                if v is not None:
                    mask[i, j] = 1.0
                    values[i, j] = fmap.get(str(v), 0.0)

    X = np.concatenate([values, mask[:, numeric_cols]], axis=1)
    return X, mask


def model_feature_names(state: PreprocessorState) -> list:
    """Column names of the model input X (features plus numeric mask columns)."""
    numeric_set = set(state.numeric_features)
    names = list(state.feature_order)
    names.extend(f"missing__{n}" for n in state.feature_order if n in numeric_set)
    return names
