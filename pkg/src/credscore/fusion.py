"""Train/validation drift scoring and convex fusion of the two scorers.

Drift is summarized by per-feature population stability indices over train
decile bins plus a Kolmogorov-Smirnov statistic on score distributions,
aggregated as max(mean PSI, KS). The fusion weight beta is picked by exact
grid search on validation negative log-likelihood; when drift is flagged the
objective uses only the most recent half of the validation weeks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import nll

PSI_FLOOR = 1e-6
BETA_GRID = [round(0.05 * i, 2) for i in range(21)]


@dataclass
class DriftReport:
    per_feature_psi: dict
    score_ks: float
    d_shift: float
    shifted: bool
    tau: float

    def to_json_dict(self) -> dict:
        return {
            "per_feature_psi": dict(self.per_feature_psi),
            "score_ks": self.score_ks,
            "d_shift": self.d_shift,
            "shifted": self.shifted,
            "tau": self.tau,
        }


@dataclass
class FusionChoice:
    beta: float
    objective: str
    objective_value: float
    search_grid: list
    used_recent_half: bool

    def to_json_dict(self) -> dict:
        return {
            "beta": self.beta,
            "objective": self.objective,
            "objective_value": self.objective_value,
            "search_grid": list(self.search_grid),
            "used_recent_half": self.used_recent_half,
        }


def psi(train_col, val_col, n_bins: int = 10) -> float:
    """Population stability index over train-quantile bins, floored proportions."""
    a = np.asarray(train_col, dtype=np.float64)
    b = np.asarray(val_col, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("psi requires non-empty columns")
    if np.min(a) == np.max(a):  # constant train column: one degenerate bin
        return 0.0
    edges = np.unique(np.quantile(a, np.linspace(0.0, 1.0, n_bins + 1)[1:-1]))
    p = np.bincount(np.searchsorted(edges, a, side="right"), minlength=len(edges) + 1) / len(a)
    q = np.bincount(np.searchsorted(edges, b, side="right"), minlength=len(edges) + 1) / len(b)
    p = np.maximum(p, PSI_FLOOR)
    q = np.maximum(q, PSI_FLOOR)
    return float(np.sum((p - q) * np.log(p / q)))


def ks_statistic(a, b) -> float:
    """Sup distance between the empirical CDFs of two samples."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("ks_statistic requires non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def drift_test(train, val, tau: float = 0.10, n_bins: int = 10, feature_names=None) -> DriftReport:
    """Aggregate drift between train and validation: max(mean PSI, score KS).

    train and val are (X, scores) pairs over the same standardized columns.
    """
    X_tr, s_tr = train
    X_va, s_va = val
    X_tr = np.asarray(X_tr, dtype=np.float64)
    X_va = np.asarray(X_va, dtype=np.float64)
    if X_tr.shape[1] != X_va.shape[1]:
        raise ConfigError("drift_test requires matching feature counts")
    names = feature_names if feature_names is not None else [f"f{j}" for j in range(X_tr.shape[1])]
    per_feature = {}
    for j in range(X_tr.shape[1]):
        per_feature[str(names[j])] = psi(X_tr[:, j], X_va[:, j], n_bins)
    score_ks = ks_statistic(s_tr, s_va)
    mean_psi = float(np.mean(list(per_feature.values()))) if per_feature else 0.0
    d_shift = max(mean_psi, score_ks)
    return DriftReport(
        per_feature_psi=per_feature,
        score_ks=score_ks,
        d_shift=d_shift,
        shifted=d_shift > tau,
        tau=tau,
    )


def fuse(mu_gbdt, mu_bnn, beta: float) -> np.ndarray:
    """Convex combination beta * mu_gbdt + (1 - beta) * mu_bnn."""
    if not (0.0 <= beta <= 1.0):
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    a = np.asarray(mu_gbdt, dtype=np.float64)
    b = np.asarray(mu_bnn, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError("fuse requires aligned score sequences")
    return beta * a + (1.0 - beta) * b


def select_weight(mu_gbdt_val, mu_bnn_val, y_val, weeks_val, report: DriftReport) -> FusionChoice:
    """Grid-search beta by validation NLL; recent-half weeks only under shift.

    Exactly tied objectives resolve toward the beta nearest 0.5, then the
    smaller beta.
    """
    mu_g = np.asarray(mu_gbdt_val, dtype=np.float64)
    mu_b = np.asarray(mu_bnn_val, dtype=np.float64)
    y = np.asarray(y_val)
    weeks = np.asarray(weeks_val)
    if not (len(mu_g) == len(mu_b) == len(y) == len(weeks)):
        raise ConfigError("select_weight requires aligned sequences")

    used_recent = False
    sel = np.ones(len(y), dtype=bool)
    if report is not None and report.shifted:
        distinct = sorted(set(int(w) for w in weeks))
        recent = set(distinct[len(distinct) // 2 :])  # later ceil(k/2) weeks
        sel = np.array([int(w) in recent for w in weeks])
        used_recent = True

    if len(np.unique(y[sel])) < 2:
        warnings.warn("validation slice has a single class; falling back to beta = 0.5")
        half = fuse(mu_g, mu_b, 0.5)
        return FusionChoice(
            beta=0.5,
            objective="val_nll",
            objective_value=nll(half[sel], y[sel]),
            search_grid=list(BETA_GRID),
            used_recent_half=used_recent,
        )

    best_beta, best_obj = None, None
    for beta in BETA_GRID:
        obj = nll(fuse(mu_g[sel], mu_b[sel], beta), y[sel])
        if (
            best_obj is None
            or obj < best_obj
            or (obj == best_obj and (abs(beta - 0.5), beta) < (abs(best_beta - 0.5), best_beta))
        ):
            best_beta, best_obj = beta, obj
    return FusionChoice(
        beta=best_beta,
        objective="val_nll",
        objective_value=best_obj,
        search_grid=list(BETA_GRID),
        used_recent_half=used_recent,
    )
