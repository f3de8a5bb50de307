"""Datasets: CSV ingestion, chronological splitting, synthetic generation.

A dataset is a base table (one row per case: id, decision date, week index,
binary label, optional sensitive group, free-form base fields) plus any number
of auxiliary tables keyed by case id. Auxiliary sources split across numbered
files (``prev_0.csv``, ``prev_1.csv``) are unioned into one table.

The synthetic generator produces drift-and-bias data for desk-scale runs:
labels follow a logistic model whose coefficient vector rotates per week in a
fixed 2-D plane (concept drift), feature means move proportionally to the week
index (covariate drift), and one group carries both an intercept offset and a
feature-mean shift so that a group-blind scorer exhibits a measurable
demographic-parity gap.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, SchemaError

MISSING_TOKENS = ("", "NA")

_PART_SUFFIX = re.compile(r"_\d+$")


@dataclass
class CaseRow:
    """One loan application: identity, timing, label and raw base fields."""

    case_id: int
    decision_date: str
    week: int
    label: int
    group: Optional[str]
    raw_base_fields: dict

    def __post_init__(self):
        if self.label not in (0, 1):
            raise IntegrityError(f"case {self.case_id}: label must be 0 or 1, got {self.label!r}")
        if self.week < 0:
            raise IntegrityError(f"case {self.case_id}: week must be >= 0, got {self.week}")


@dataclass
class AuxTable:
    """An auxiliary source: named table with zero or more rows per case id."""

    name: str
    rows: list  # list of (case_id, {field: value-or-None})

    def rows_for(self, case_id: int) -> list:
        return [fields for cid, fields in self.rows if cid == case_id]


@dataclass
class Dataset:
    """Base rows plus auxiliary tables. Immutable after construction."""

    rows: list
    aux_tables: list = field(default_factory=list)
    feature_names: Optional[list] = None

    def __len__(self) -> int:
        return len(self.rows)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)

    def weeks(self) -> np.ndarray:
        return np.array([r.week for r in self.rows], dtype=np.int64)

    def groups(self) -> Optional[list]:
        """Group labels aligned with rows, or None when no row carries one."""
        gs = [r.group for r in self.rows]
        if all(g is None for g in gs):
            return None
        return gs

    def case_ids(self) -> np.ndarray:
        return np.array([r.case_id for r in self.rows], dtype=np.int64)


@dataclass
class TimeSplit:
    """Chronological split: train <= cut_week - val_weeks < val <= cut_week < test."""

    cut_week: int
    val_weeks: int


def _parse_cell(value: Optional[str]):
    if value is None or value.strip() in MISSING_TOKENS:
        return None
    return value.strip()


def _read_csv(path) -> tuple:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, header row required")
        header = list(reader.fieldnames)
        rows = [dict(r) for r in reader]
    return header, rows


def aux_table_name(path) -> str:
    """Source name for an aux file: stem with a trailing _<digits> part removed."""
    return _PART_SUFFIX.sub("", Path(path).stem)


def load_tables(
    base_path, aux_paths: Sequence = (), group_column: str = "group", require_label: bool = True
) -> Dataset:
    """Read the base CSV and any auxiliary CSVs into a Dataset.

    The base table must carry case_id, date_decision, WEEK_NUM and target
    columns; every other column (except the optional group column) becomes a
    raw base field. Aux files sharing a name prefix are unioned in path order.
    With require_label=False (scoring inputs) a missing target column is
    tolerated and labels default to 0.
    """
    base_path = Path(base_path)
    header, raw_rows = _read_csv(base_path)
    required = ["case_id", "date_decision", "WEEK_NUM"]
    if require_label or "target" in header:
        required.append("target")
    for col in required:
        if col not in header:
            raise SchemaError(f"{base_path}: missing required column '{col}'")
    has_group = group_column in header
    reserved = set(required) | {"target"} | ({group_column} if has_group else set())

    rows = []
    seen = set()
    for raw in raw_rows:
        cid_text = _parse_cell(raw["case_id"])
        if cid_text is None:
            raise IntegrityError(f"{base_path}: empty case_id")
        cid = int(cid_text)
        if cid in seen:
            raise IntegrityError(f"{base_path}: duplicate case_id {cid}")
        seen.add(cid)
        label_text = _parse_cell(raw["target"]) if "target" in header else None
        if label_text is None and not require_label:
            label_text = "0"
        week_text = _parse_cell(raw["WEEK_NUM"])
        date_text = _parse_cell(raw["date_decision"])
        if label_text is None or week_text is None or date_text is None:
            raise IntegrityError(f"{base_path}: case {cid}: date_decision, WEEK_NUM and target must be present")
        base_fields = {c: _parse_cell(raw[c]) for c in header if c not in reserved and c != "case_id"}
        # date_decision stays available to preprocessing as a base field
        base_fields["date_decision"] = date_text
        group_val = _parse_cell(raw[group_column]) if has_group else None
        rows.append(
            CaseRow(
                case_id=cid,
                decision_date=date_text,
                week=int(week_text),
                label=int(label_text),
                group=group_val,
                raw_base_fields=base_fields,
            )
        )

    grouped: dict = {}
    order: list = []
    for path in aux_paths:
        name = aux_table_name(path)
        if name not in grouped:
            grouped[name] = []
            order.append(name)
        aux_header, aux_rows = _read_csv(path)
        if "case_id" not in aux_header:
            raise SchemaError(f"{path}: missing required column 'case_id'")
        for raw in aux_rows:
            cid_text = _parse_cell(raw["case_id"])
            if cid_text is None:
                raise IntegrityError(f"{path}: empty case_id")
            fields = {c: _parse_cell(raw[c]) for c in aux_header if c != "case_id"}
            grouped[name].append((int(cid_text), fields))

    aux_tables = [AuxTable(name=n, rows=grouped[n]) for n in order]
    return Dataset(rows=rows, aux_tables=aux_tables)


def split_by_week(ds: Dataset, split: TimeSplit):
    """Partition by week index into train/val/test views (order-preserving)."""
    lo = split.cut_week - split.val_weeks
    train = [r for r in ds.rows if r.week <= lo]
    val = [r for r in ds.rows if lo < r.week <= split.cut_week]
    test = [r for r in ds.rows if r.week > split.cut_week]
    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part:
            raise ConfigError(
                f"time split cut_week={split.cut_week} val_weeks={split.val_weeks} leaves the {name} partition empty"
            )
    return (
        Dataset(rows=train, aux_tables=ds.aux_tables),
        Dataset(rows=val, aux_tables=ds.aux_tables),
        Dataset(rows=test, aux_tables=ds.aux_tables),
    )


@dataclass
class SynthSpec:
    """Configuration for the synthetic drift-and-bias generator."""

    n_rows: int = 20000
    n_features: int = 20
    n_weeks: int = 40
    n_categorical: int = 2
    missing_rate: float = 0.05
    drift_angle: float = 0.03  # radians of coefficient rotation per week
    drift_shift: float = 0.02  # per-week mean shift on the rotation-plane coords
    rule_strength: float = 1.5  # weight of the axis-aligned high-risk rule block
    rule_edge: float = 0.4  # week-0 indicator threshold of the rule block
    rule_drift: float = 0.02  # per-week outward shift of the rule threshold
    group_offset: float = 0.8  # intercept offset for group B in the label model
    group_feature_shift: float = 1.2  # feature-mean shift for group B (makes bias learnable)
    group_fraction: float = 0.5
    base_intercept: float = -2.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator option(s): {sorted(unknown)}")
        return cls(**dict(d))

    def validate(self):
        if not (0.0 <= self.drift_angle <= math.pi / 2):
            raise ConfigError(f"drift_angle must lie in [0, pi/2], got {self.drift_angle}")
        if self.n_rows < 1 or self.n_features < 8 or self.n_weeks < 1:
            raise ConfigError("n_rows >= 1, n_features >= 8 and n_weeks >= 1 required")
        for name in ("missing_rate", "group_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


CATEGORY_LEVELS = ("lv0", "lv1", "lv2", "lv3", "lv4")
_CATEGORY_PROBS = (0.40, 0.30, 0.15, 0.10, 0.05)
_EPOCH_MONDAY = date(2019, 1, 7)


def synth_coefficients(spec: SynthSpec, seed: int) -> np.ndarray:
    """True per-week coefficient matrix (n_weeks x n_features) for a spec+seed.

    Coordinates 0 and 1 span the rotation (concept-drift) plane, coordinates
    2..5 carry fixed coefficients (the group-shift directions) and the last
    two coordinates are pure noise.
    """
    rng = np.random.default_rng([seed, 0])
    d = spec.n_features
    w0 = np.zeros(d)
    w0[0] = 1.0
    w0[2:6] = 0.5  # fixed coefficients on the group-shift coordinates
    rest = rng.standard_normal(d - 8)
    norm = np.linalg.norm(rest)
    if norm > 0:
        w0[6 : d - 2] = 0.5 * rest / norm
    coef = np.tile(w0, (spec.n_weeks, 1))
    for wk in range(spec.n_weeks):
        theta = spec.drift_angle * wk
        coef[wk, 0] = math.cos(theta) * w0[0]
        coef[wk, 1] = math.sin(theta) * w0[0]
    return coef


def _std_normal_sf(z: float) -> float:
    """P(N(0,1) >= z)."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def synth_intercepts(spec: SynthSpec, seed: int) -> np.ndarray:
    """Per-week intercepts keeping the positive rate flat under drift.

    The week-w mean of the rotation-plane coordinates is drift_shift * w; the
    label model subtracts both its linear logit contribution and the expected
    activation of the rotating rule block, so early-to-late metric changes
    reflect model degradation rather than base-rate movement.
    """
    coef = synth_coefficients(spec, seed)
    wks = np.arange(spec.n_weeks)
    m = spec.drift_shift * wks
    linear = m * (coef[wks, 0] + coef[wks, 1])
    edges = spec.rule_edge + spec.rule_drift * wks
    rule = np.array([spec.rule_strength * _std_normal_sf(a) ** 2 for a in edges])
    return spec.base_intercept - linear - rule


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Generate a Dataset from the logistic drift-and-bias model.

    Pure function of (spec, seed): the same pair always yields an identical
    dataset. Labels are drawn from the true (pre-missingness) features.
    """
    spec.validate()
    n, d = spec.n_rows, spec.n_features

    coef = synth_coefficients(spec, seed)
    rng = np.random.default_rng([seed, 1])

    weeks = rng.integers(0, spec.n_weeks, size=n)
    is_b = rng.random(n) < spec.group_fraction
    X = rng.standard_normal((n, d))

    # covariate drift: the rotation-plane coordinates' means move with the
    # week index, pushing late rows beyond the training range; the per-week
    # intercept compensation keeps the label rate flat
    X[:, 0] += spec.drift_shift * weeks
    X[:, 1] += spec.drift_shift * weeks

    # group B feature shift on the fixed-coefficient coordinates 2..5, scaled
    # so its logit projection equals group_feature_shift exactly (those
    # coordinates do not rotate, so the visible bias is week-invariant)
    base_w = coef[0]
    proj = float(np.sum(base_w[2:6] ** 2))
    for j in range(2, 6):
        X[is_b, j] += spec.group_feature_shift * base_w[j] / proj

    # axis-aligned high-risk rule on coordinates 6 and 7 whose threshold moves
    # outward each week: sharp in-regime structure that tree models capture
    # exactly and then hold on to as the true boundary location drifts away
    edges = spec.rule_edge + spec.rule_drift * weeks
    rule = ((X[:, 6] >= edges) & (X[:, 7] >= edges)).astype(np.float64)

    intercepts = synth_intercepts(spec, seed)
    logits = np.einsum("ij,ij->i", X, coef[weeks]) + spec.rule_strength * rule + intercepts[weeks]
    logits[is_b] += spec.group_offset
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int64)

    missing = rng.random((n, d)) < spec.missing_rate

    cat_levels = np.array(CATEGORY_LEVELS)
    cats = rng.choice(len(cat_levels), size=(n, spec.n_categorical), p=_CATEGORY_PROBS)
    day_offsets = rng.integers(0, 7, size=n)

    num_names = [f"f{j:02d}" for j in range(d)]
    cat_names = [f"c{j}" for j in range(spec.n_categorical)]

    rows = []
    for i in range(n):
        fields = {}
        for j, name in enumerate(num_names):
            fields[name] = None if missing[i, j] else float(X[i, j])
        for j, name in enumerate(cat_names):
            fields[name] = str(cat_levels[cats[i, j]])
        iso = (_EPOCH_MONDAY + timedelta(days=int(weeks[i]) * 7 + int(day_offsets[i]))).isoformat()
        fields["date_decision"] = iso
        rows.append(
            CaseRow(
                case_id=i + 1,
                decision_date=iso,
                week=int(weeks[i]),
                label=int(y[i]),
                group="B" if is_b[i] else "A",
                raw_base_fields=fields,
            )
        )
    return Dataset(rows=rows)


def write_base_csv(ds: Dataset, path) -> None:
    """Write a Dataset's base table to CSV (missing cells become empty)."""
    path = Path(path)
    field_names: list = []
    for r in ds.rows:
        for k in r.raw_base_fields:
            if k != "date_decision" and k not in field_names:
                field_names.append(k)
    has_group = ds.groups() is not None
    header = ["case_id", "date_decision", "WEEK_NUM", "target"] + (["group"] if has_group else []) + field_names
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in ds.rows:
            row = [r.case_id, r.decision_date, r.week, r.label]
            if has_group:
                row.append("" if r.group is None else r.group)
            for name in field_names:
                v = r.raw_base_fields.get(name)
                row.append("" if v is None else (repr(v) if isinstance(v, float) else v))
            writer.writerow(row)
