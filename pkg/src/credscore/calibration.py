"""Post-hoc temperature scaling of probability scores.

A single temperature T rescales score logits, s -> sigmoid(logit(s) / T),
which is strictly rank-preserving. T is fitted by golden-section search on
mean validation NLL over log T in [log 0.05, log 20]; the objective is convex
in 1/T, hence unimodal in log T, so the search attains the global minimum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .numutil import bernoulli_nll_from_margin, logit, sigmoid

T_MIN = 0.05
T_MAX = 20.0
CLAMP_EPS = 1e-6
LOG_T_TOL = 1e-6

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class TemperatureModel:
    t_cal: float
    val_nll_before: float
    val_nll_after: float
    clamp_eps: float = CLAMP_EPS

    def to_json_dict(self) -> dict:
        from . import SCHEMA_VERSION

        return {
            "schema_version": SCHEMA_VERSION,
            "t_cal": self.t_cal,
            "val_nll_before": self.val_nll_before,
            "val_nll_after": self.val_nll_after,
            "clamp_eps": self.clamp_eps,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TemperatureModel":
        return cls(
            t_cal=float(d["t_cal"]),
            val_nll_before=float(d["val_nll_before"]),
            val_nll_after=float(d["val_nll_after"]),
            clamp_eps=float(d.get("clamp_eps", CLAMP_EPS)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "TemperatureModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _clamped_logits(scores) -> np.ndarray:
    s = np.clip(np.asarray(scores, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    return logit(s)


def _mean_nll_at(logits: np.ndarray, y: np.ndarray, t: float) -> float:
    return float(np.mean(bernoulli_nll_from_margin(logits / t, y)))


def fit_temperature(scores, labels) -> TemperatureModel:
    """Golden-section fit of T on mean NLL; requires both label classes."""
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise UndefinedMetricError("fit_temperature needs both classes present")
    z = _clamped_logits(scores)

    lo, hi = math.log(T_MIN), math.log(T_MAX)
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc = _mean_nll_at(z, y, math.exp(c))
    fd = _mean_nll_at(z, y, math.exp(d))
    while hi - lo > LOG_T_TOL:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_PHI * (hi - lo)
            fc = _mean_nll_at(z, y, math.exp(c))
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_PHI * (hi - lo)
            fd = _mean_nll_at(z, y, math.exp(d))
    t = math.exp(0.5 * (lo + hi))
    return TemperatureModel(
        t_cal=t,
        val_nll_before=_mean_nll_at(z, y, 1.0),
        val_nll_after=_mean_nll_at(z, y, t),
    )


def apply_temperature(scores, t: float) -> np.ndarray:
    """Calibrated scores sigmoid(logit(s) / T); strictly increasing in s."""
    if t <= 0:
        raise ConfigError(f"temperature must be positive, got {t}")
    return sigmoid(_clamped_logits(scores) / t)
