"""Per-case additive attributions for the boosted tree component.

Attributions are exact Shapley values of the path-dependent value function:
conditioning on absent features averages the two branches weighted by their
training cover counts. `tree_shap` runs the polynomial-time extended-path
recursion per tree; `shapley_bruteforce` enumerates all feature subsets with
the same value function and serves as the testing oracle. Both work in margin
(pre-sigmoid) space, where additivity is exact:

    base_value + sum of contributions = prediction margin
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gbdt import GbdtModel, Tree, predict_margin

BRUTEFORCE_MAX_FEATURES = 12


@dataclass
class Attribution:
    base_value: float
    per_feature: dict
    prediction_margin: float

    def to_json_dict(self, case_id=None, top_k=None) -> dict:
        items = sorted(self.per_feature.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
        if top_k is not None:
            items = items[:top_k]
        d = {
            "base_value": self.base_value,
            "contributions": [{"feature": k, "value": v} for k, v in items],
            "margin": self.prediction_margin,
        }
        if case_id is not None:
            d = {"case_id": int(case_id), **d}
        return d


def _require_covers(model: GbdtModel) -> None:
    for t in model.trees:
        if t.cover is None:
            raise ConfigError("model lacks per-node cover counts; re-fit with covers enabled")


def _names(model: GbdtModel, feature_names) -> list:
    if feature_names is None:
        return [f"f{j}" for j in range(model.n_features)]
    if len(feature_names) != model.n_features:
        raise ConfigError("feature_names length must match the model's feature count")
    return list(feature_names)


def _hot_child(tree: Tree, node: int, x: np.ndarray) -> int:
    f = tree.feature[node]
    xv = x[f]
    if np.isnan(xv):
        return tree.left[node] if tree.missing_left[node] else tree.right[node]
    return tree.left[node] if xv < tree.threshold[node] else tree.right[node]


def _cond_exp(tree: Tree, node: int, present: frozenset, x: np.ndarray) -> float:
    """Cover-weighted conditional expectation given the present feature set."""
    f = tree.feature[node]
    if f < 0:
        return float(tree.value[node])
    if f in present:
        return _cond_exp(tree, _hot_child(tree, node, x), present, x)
    l, r = tree.left[node], tree.right[node]
    wl, wr = tree.cover[l], tree.cover[r]
    return (wl * _cond_exp(tree, l, present, x) + wr * _cond_exp(tree, r, present, x)) / (wl + wr)


def _extend(path: list, pz: float, po: float, pi: int) -> list:
    out = [el.copy() for el in path]
    l = len(out)
    out.append([pi, pz, po, 1.0 if l == 0 else 0.0])
    for i in range(l - 1, -1, -1):
        out[i + 1][3] += po * out[i][3] * (i + 1) / (l + 1)
        out[i][3] = pz * out[i][3] * (l - i) / (l + 1)
    return out


def _unwound_sum(path: list, i: int) -> float:
    l = len(path) - 1
    zero, one = path[i][1], path[i][2]
    total = 0.0
    if one != 0.0:
        next_one = path[l][3]
        for j in range(l - 1, -1, -1):
            tmp = next_one * (l + 1) / ((j + 1) * one)
            total += tmp
            next_one = path[j][3] - tmp * zero * (l - j) / (l + 1)
    else:
        for j in range(l - 1, -1, -1):
            total += path[j][3] * (l + 1) / (zero * (l - j))
    return total


def _unwind(path: list, i: int) -> list:
    l = len(path) - 1
    zero, one = path[i][1], path[i][2]
    out = [el.copy() for el in path]
    next_one = out[l][3]
    if one != 0.0:
        for j in range(l - 1, -1, -1):
            tmp = out[j][3]
            out[j][3] = next_one * (l + 1) / ((j + 1) * one)
            next_one = tmp - out[j][3] * zero * (l - j) / (l + 1)
    else:
        for j in range(l - 1, -1, -1):
            out[j][3] = out[j][3] * (l + 1) / (zero * (l - j))
    for j in range(i, l):
        out[j][0], out[j][1], out[j][2] = out[j + 1][0], out[j + 1][1], out[j + 1][2]
    return out[:-1]


def _shap_one_tree(tree: Tree, x: np.ndarray, phi: np.ndarray, scale: float) -> None:
    def recurse(node: int, path: list, pz: float, po: float, pi: int) -> None:
        path = _extend(path, pz, po, pi)
        f = tree.feature[node]
        if f < 0:
            v = tree.value[node] * scale
            for i in range(1, len(path)):
                w = _unwound_sum(path, i)
                phi[path[i][0]] += w * (path[i][2] - path[i][1]) * v
            return
        hot = _hot_child(tree, node, x)
        cold = tree.right[node] if hot == tree.left[node] else tree.left[node]
        w_node = tree.cover[node]
        iz, io = 1.0, 1.0
        k = next((i for i in range(1, len(path)) if path[i][0] == f), None)
        if k is not None:
            iz, io = path[k][1], path[k][2]
            path = _unwind(path, k)
        recurse(hot, path, iz * tree.cover[hot] / w_node, io, int(f))
        recurse(cold, path, iz * tree.cover[cold] / w_node, 0.0, int(f))

    recurse(0, [], 1.0, 1.0, -1)


def tree_shap(model: GbdtModel, x, feature_names=None) -> Attribution:
    """Exact path-dependent Shapley attribution of the ensemble margin."""
    _require_covers(model)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ConfigError(f"x must be a vector of {model.n_features} features")
    names = _names(model, feature_names)
    phi = np.zeros(model.n_features, dtype=np.float64)
    base = model.base_logit
    for tree in model.trees:
        _shap_one_tree(tree, x, phi, model.learning_rate)
        base += model.learning_rate * _cond_exp(tree, 0, frozenset(), x)
    margin = float(predict_margin(model, x[None, :])[0])
    return Attribution(
        base_value=float(base),
        per_feature={names[j]: float(phi[j]) for j in range(model.n_features)},
        prediction_margin=margin,
    )


def shapley_bruteforce(model: GbdtModel, x, feature_names=None) -> Attribution:
    """Subset-enumeration Shapley values with the same path-dependent value
    function as tree_shap; the agreement of the two is the oracle test."""
    _require_covers(model)
    x = np.asarray(x, dtype=np.float64)
    d = model.n_features
    if x.shape != (d,):
        raise ConfigError(f"x must be a vector of {d} features")
    if d > BRUTEFORCE_MAX_FEATURES:
        raise ConfigError(f"brute-force Shapley enumerates 2^d subsets; d={d} exceeds {BRUTEFORCE_MAX_FEATURES}")
    names = _names(model, feature_names)

    values = np.empty(1 << d, dtype=np.float64)
    for mask in range(1 << d):
        present = frozenset(j for j in range(d) if mask >> j & 1)
        total = model.base_logit
        for tree in model.trees:
            total += model.learning_rate * _cond_exp(tree, 0, present, x)
        values[mask] = total

    fact = [math.factorial(k) for k in range(d + 1)]
    phi = np.zeros(d, dtype=np.float64)
    for j in range(d):
        bit = 1 << j
        for mask in range(1 << d):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            weight = fact[s] * fact[d - s - 1] / fact[d]
            phi[j] += weight * (values[mask | bit] - values[mask])

    margin = float(predict_margin(model, x[None, :])[0])
    return Attribution(
        base_value=float(values[0]),
        per_feature={names[j]: float(phi[j]) for j in range(d)},
        prediction_margin=margin,
    )
