"""Newton-boosted binary-logistic trees with a group-fairness constraint.

Boosting follows the second-order recipe: per round the per-row gradient is
p - y and the hessian p(1 - p), a regression tree is grown by exact greedy
split search maximizing

    gain = 1/2 [ GL^2/(HL+lambda) + GR^2/(HR+lambda) - (GL+GR)^2/(HL+HR+lambda) ] - gamma

and leaves take the closed-form value -G/(H+lambda). The fairness constraint
is enforced by adaptive group reweighting: whenever the validation gap exceeds
the tolerance after a round, the lower-decision-rate group's gradient/hessian
weight is multiplied by exp(lambda_fair * excess) and the higher-rate group's
by the reciprocal, clipped to [0.25, 4.0]. With lambda_fair = 0 the procedure
is exactly unconstrained Newton boosting.

Split search is exact (no histograms): thresholds are midpoints between
adjacent distinct sorted values and rows with a missing split feature follow
the gain-maximizing side. Among equal-gain splits the lowest feature index,
then the smallest threshold, then the left missing-direction wins.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SchemaError
from .metrics import fairness_gaps
from .numutil import logit, sigmoid

WEIGHT_CAP = 4.0
WEIGHT_FLOOR = 0.25


@dataclass
class Tree:
    """One regression tree as parallel node arrays (preorder ids, -1 feature = leaf)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    missing_left: np.ndarray
    value: np.ndarray
    cover: Optional[np.ndarray] = None  # training rows through each node

    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.nonzero(active)[0]
            nd = node[rows]
            f = self.feature[nd]
            x = X[rows, f]
            go_left = np.where(np.isnan(x), self.missing_left[nd], x < self.threshold[nd])
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_json_dict(self) -> dict:
        d = {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "missing_left": [bool(m) for m in self.missing_left],
            "value": self.value.tolist(),
        }
        if self.cover is not None:
            d["cover"] = self.cover.tolist()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            missing_left=np.asarray(d["missing_left"], dtype=bool),
            value=np.asarray(d["value"], dtype=np.float64),
            cover=np.asarray(d["cover"], dtype=np.float64) if "cover" in d else None,
        )


@dataclass
class GbdtParams:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 4
    min_child_rows: int = 20
    lambda_reg: float = 1.0
    gamma: float = 0.0
    lambda_fair: float = 0.0
    gap_max: float = 0.05
    delta: float = 0.5
    gap_metric: str = "dp"  # "dp" or "eo"

    def validate(self):
        if self.n_rounds < 0:
            raise ConfigError("n_rounds must be >= 0")
        if not (0.0 <= self.gap_max <= 1.0):
            raise ConfigError("gap_max must lie in [0, 1]")
        if self.gap_metric not in ("dp", "eo"):
            raise ConfigError(f"unknown gap_metric '{self.gap_metric}'")
        if self.max_depth < 1 or self.min_child_rows < 1:
            raise ConfigError("max_depth and min_child_rows must be >= 1")


class _TreeBuilder:
    """Grows one tree from fixed gradients/hessians using presorted columns."""

    def __init__(self, X, g, h, params: GbdtParams):
        self.X = X
        self.g = g
        self.h = h
        self.p = params
        self.feature: list = []
        self.threshold: list = []
        self.left: list = []
        self.right: list = []
        self.missing_left: list = []
        self.value: list = []
        self.cover: list = []
        self.train_pred = np.zeros(X.shape[0], dtype=np.float64)

    def _new_node(self) -> int:
        for arr in (self.feature, self.left, self.right):
            arr.append(-1)
        self.threshold.append(0.0)
        self.missing_left.append(True)
        self.value.append(0.0)
        self.cover.append(0.0)
        return len(self.feature) - 1

    def build(self, rows, sorted_obs) -> int:
        node = self._grow(rows, sorted_obs, depth=0)
        return node

    def _leaf(self, node: int, rows) -> None:
        g_sum = float(self.g[rows].sum())
        h_sum = float(self.h[rows].sum())
        val = -g_sum / (h_sum + self.p.lambda_reg)
        self.value[node] = val
        self.train_pred[rows] = val

    def _grow(self, rows, sorted_obs, depth: int) -> int:
        node = self._new_node()
        self.cover[node] = float(len(rows))
        n_node = len(rows)
        if depth >= self.p.max_depth or n_node < 2 * self.p.min_child_rows:
            self._leaf(node, rows)
            return node

        g_tot = float(self.g[rows].sum())
        h_tot = float(self.h[rows].sum())
        lam, gamma, min_child = self.p.lambda_reg, self.p.gamma, self.p.min_child_rows
        parent_term = g_tot * g_tot / (h_tot + lam)

        best = None  # (gain, feat, pos, threshold, missing_left)
        for j, idx in enumerate(sorted_obs):
            n_obs = len(idx)
            if n_obs < 2:
                continue
            v = self.X[idx, j]
            gc = np.cumsum(self.g[idx])
            hc = np.cumsum(self.h[idx])
            g_miss = g_tot - gc[-1]
            h_miss = h_tot - hc[-1]
            n_miss = n_node - n_obs

            valid = v[:-1] != v[1:]
            if not np.any(valid):
                continue
            gl = gc[:-1]
            hl = hc[:-1]
            n_left = np.arange(1, n_obs)

            def _gains(gL, hL, nL):
                gR = g_tot - gL
                hR = h_tot - hL
                nR = n_node - nL
                gain = 0.5 * (gL * gL / (hL + lam) + gR * gR / (hR + lam) - parent_term) - gamma
                gain[~(valid & (nL >= min_child) & (nR >= min_child))] = -np.inf
                return gain

            if n_miss == 0:
                gain = _gains(gl, hl, n_left)
                to_left = None
            else:
                gain_ml = _gains(gl + g_miss, hl + h_miss, n_left + n_miss)
                gain_mr = _gains(gl, hl, n_left)
                gain = np.maximum(gain_ml, gain_mr)
                to_left = gain_ml >= gain_mr  # equal gain sends missing left
            # tie-breaks: argmax picks the first (smallest) threshold and the
            # strict > across features keeps the lowest feature index
            pos = int(np.argmax(gain))
            gn = float(gain[pos])
            if gn > 0.0 and np.isfinite(gn) and (best is None or gn > best[0]):
                missing_left = True if to_left is None else bool(to_left[pos])
                best = (gn, j, pos, 0.5 * (v[pos] + v[pos + 1]), missing_left)

        if best is None:
            self._leaf(node, rows)
            return node

        _, feat, pos, thr, missing_left = best
        goes_left = np.zeros(self.X.shape[0], dtype=bool)
        goes_left[sorted_obs[feat][: pos + 1]] = True
        if missing_left:
            miss_rows = rows[np.isnan(self.X[rows, feat])]
            goes_left[miss_rows] = True

        rows_left = rows[goes_left[rows]]
        rows_right = rows[~goes_left[rows]]
        sorted_left = [idx[goes_left[idx]] for idx in sorted_obs]
        sorted_right = [idx[~goes_left[idx]] for idx in sorted_obs]

        self.feature[node] = feat
        self.threshold[node] = thr
        self.missing_left[node] = missing_left
        self.left[node] = self._grow(rows_left, sorted_left, depth + 1)
        self.right[node] = self._grow(rows_right, sorted_right, depth + 1)
        return node

    def to_tree(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            missing_left=np.asarray(self.missing_left, dtype=bool),
            value=np.asarray(self.value, dtype=np.float64),
            cover=np.asarray(self.cover, dtype=np.float64),
        )


def fit_tree(gradients, hessians, X, params: GbdtParams) -> Tree:
    """Grow one regression tree by exact greedy search (missing-aware)."""
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    if len(g) != X.shape[0] or len(h) != X.shape[0]:
        raise ValueError("gradients and hessians must align with X rows")
    builder = _TreeBuilder(X, g, h, params)
    rows = np.arange(X.shape[0], dtype=np.int64)
    sorted_obs = _presort(X)
    builder.build(rows, sorted_obs)
    return builder.to_tree()


def _presort(X: np.ndarray) -> list:
    """Per feature: row indices of observed values in ascending value order."""
    out = []
    for j in range(X.shape[1]):
        col = X[:, j]
        obs = np.nonzero(~np.isnan(col))[0]
        out.append(obs[np.argsort(col[obs], kind="mergesort")])
    return out


@dataclass
class GbdtModel:
    """Boosted ensemble: probability = sigmoid(base_logit + lr * sum of trees)."""

    base_logit: float
    trees: list
    learning_rate: float
    n_features: int
    params: GbdtParams
    group_weight_history: list = field(default_factory=list)  # (round, {group: weight})

    def to_json_dict(self) -> dict:
        from . import SCHEMA_VERSION

        return {
            "schema_version": SCHEMA_VERSION,
            "base_logit": self.base_logit,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "params": {
                "n_rounds": self.params.n_rounds,
                "learning_rate": self.params.learning_rate,
                "max_depth": self.params.max_depth,
                "min_child_rows": self.params.min_child_rows,
                "lambda_reg": self.params.lambda_reg,
                "gamma": self.params.gamma,
                "lambda_fair": self.params.lambda_fair,
                "gap_max": self.params.gap_max,
                "delta": self.params.delta,
                "gap_metric": self.params.gap_metric,
            },
            "group_weight_history": [[r, {str(k): v for k, v in w.items()}] for r, w in self.group_weight_history],
            "trees": [t.to_json_dict() for t in self.trees],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GbdtModel":
        return cls(
            base_logit=float(d["base_logit"]),
            trees=[Tree.from_json_dict(t) for t in d["trees"]],
            learning_rate=float(d["learning_rate"]),
            n_features=int(d["n_features"]),
            params=GbdtParams(**d["params"]),
            group_weight_history=[(int(r), dict(w)) for r, w in d["group_weight_history"]],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "GbdtModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def predict_margin(model: GbdtModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise SchemaError(f"expected {model.n_features} features, got {X.shape[1] if X.ndim == 2 else 'non-matrix'}")
    margin = np.full(X.shape[0], model.base_logit, dtype=np.float64)
    for tree in model.trees:
        margin += model.learning_rate * tree.predict(X)
    return margin


def predict_proba(model: GbdtModel, X) -> np.ndarray:
    return sigmoid(predict_margin(model, X))


def _clamped_rate_logit(y: np.ndarray) -> float:
    rate = float(np.mean(y))
    rate = min(max(rate, 1e-6), 1.0 - 1e-6)
    return float(logit(rate))


def fit(train, val, params: GbdtParams) -> GbdtModel:
    """Boost on the training partition; audit the fairness gap on validation.

    train and val are (X, y, groups) triples; groups may be None, which
    disables the constraint (with a warning when lambda_fair > 0).
    """
    params.validate()
    X, y, groups = train
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ConfigError("cannot fit on an empty training partition")
    X_val, y_val, groups_val = val if val is not None else (None, None, None)

    base_logit = _clamped_rate_logit(y)
    model = GbdtModel(
        base_logit=base_logit,
        trees=[],
        learning_rate=params.learning_rate,
        n_features=X.shape[1],
        params=params,
    )
    if params.n_rounds == 0 or len(np.unique(y)) == 1:
        return model

    constrained = params.lambda_fair > 0.0
    if constrained and (groups is None or groups_val is None or X_val is None):
        warnings.warn("lambda_fair > 0 but group labels are unavailable; fairness constraint disabled")
        constrained = False

    group_names: list = []
    group_weights: dict = {}
    row_group_idx = None
    if constrained:
        group_names = sorted(set(groups), key=str)
        group_weights = {g: 1.0 for g in group_names}
        gmap = {g: i for i, g in enumerate(group_names)}
        row_group_idx = np.array([gmap[g] for g in groups], dtype=np.int64)

    sorted_obs = _presort(X)
    rows = np.arange(X.shape[0], dtype=np.int64)
    margin = np.full(X.shape[0], base_logit, dtype=np.float64)
    margin_val = np.full(X_val.shape[0], base_logit, dtype=np.float64) if X_val is not None else None
    yf = y.astype(np.float64)

    for t in range(params.n_rounds):
        p = sigmoid(margin)
        g = p - yf
        h = p * (1.0 - p)
        if constrained:
            w = np.array([group_weights[g_] for g_ in group_names])[row_group_idx]
            g = g * w
            h = h * w
        builder = _TreeBuilder(X, g, h, params)
        builder.build(rows, sorted_obs)
        tree = builder.to_tree()
        model.trees.append(tree)
        margin += params.learning_rate * builder.train_pred

        if margin_val is not None:
            margin_val += params.learning_rate * tree.predict(X_val)

        if constrained:
            gaps = fairness_gaps(sigmoid(margin_val), y_val, groups_val, params.delta)
            gap = gaps.dp_gap if params.gap_metric == "dp" else gaps.eo_gap
            if gap > params.gap_max:
                rates = {g_: gaps.per_group_rates[g_]["positive_rate"] for g_ in group_names}
                low = min(group_names, key=lambda g_: (rates[g_], str(g_)))
                high = max(group_names, key=lambda g_: (rates[g_], str(g_)))
                if low != high:
                    factor = float(np.exp(params.lambda_fair * (gap - params.gap_max)))
                    group_weights[low] = min(group_weights[low] * factor, WEIGHT_CAP)
                    group_weights[high] = max(group_weights[high] / factor, WEIGHT_FLOOR)
                    model.group_weight_history.append((t, dict(group_weights)))
    return model
