"""Mean-field variational Bayesian MLP for binary risk scoring.

Every weight and bias carries a posterior mean and a raw scale; the positive
scale is softplus(rho). Training minimizes the negative evidence lower bound
with reparameterized sampling (W = mu + softplus(rho) * eps) and the data term
scaled by N/|batch| so the KL to the N(0, sigma0^2 I) prior is counted once
per epoch-equivalent. Prediction draws S weight samples shared across all rows
of a call and reports the predictive mean, the across-sample variance
(epistemic) and the mean Bernoulli variance (aleatoric).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalError, SchemaError
from .numutil import bernoulli_nll_from_margin, sigmoid, softplus

INIT_MU_SD = 0.05
INIT_RHO = -5.0
LOSS_DIVERGE_LIMIT = 1e8


@dataclass
class LayerParams:
    w_mu: np.ndarray
    w_rho: np.ndarray
    b_mu: np.ndarray
    b_rho: np.ndarray

    def shapes(self):
        return self.w_mu.shape, self.b_mu.shape


@dataclass
class BnnModel:
    """Layer sizes plus per-parameter variational means and raw scales."""

    layer_sizes: list
    layers: list
    sigma0: float
    rng_seed: int
    mc_samples: int = 30

    def n_params(self) -> int:
        return sum(l.w_mu.size + l.b_mu.size for l in self.layers)

    def to_json_dict(self) -> dict:
        from . import SCHEMA_VERSION

        return {
            "schema_version": SCHEMA_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "sigma0": self.sigma0,
            "rng_seed": self.rng_seed,
            "mc_samples": self.mc_samples,
            "layers": [
                {
                    "w_mu": l.w_mu.ravel().tolist(),
                    "w_rho": l.w_rho.ravel().tolist(),
                    "b_mu": l.b_mu.tolist(),
                    "b_rho": l.b_rho.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BnnModel":
        sizes = [int(s) for s in d["layer_sizes"]]
        layers = []
        for i, ld in enumerate(d["layers"]):
            n_in, n_out = sizes[i], sizes[i + 1]
            layers.append(
                LayerParams(
                    w_mu=np.asarray(ld["w_mu"], dtype=np.float64).reshape(n_in, n_out),
                    w_rho=np.asarray(ld["w_rho"], dtype=np.float64).reshape(n_in, n_out),
                    b_mu=np.asarray(ld["b_mu"], dtype=np.float64),
                    b_rho=np.asarray(ld["b_rho"], dtype=np.float64),
                )
            )
        return cls(
            layer_sizes=sizes,
            layers=layers,
            sigma0=float(d["sigma0"]),
            rng_seed=int(d["rng_seed"]),
            mc_samples=int(d.get("mc_samples", 30)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "BnnModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def init_model(layer_sizes, sigma0: float = 1.0, seed: int = 0, mc_samples: int = 30) -> BnnModel:
    """Fresh model: mu ~ N(0, 0.05^2), rho = -5 (scale ~ 6.7e-3)."""
    if sigma0 <= 0:
        raise ConfigError("sigma0 must be positive")
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or sizes[-1] != 1:
        raise ConfigError("layer_sizes must run from the input width to a single output logit")
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        layers.append(
            LayerParams(
                w_mu=rng.normal(0.0, INIT_MU_SD, size=(n_in, n_out)),
                w_rho=np.full((n_in, n_out), INIT_RHO),
                b_mu=rng.normal(0.0, INIT_MU_SD, size=n_out),
                b_rho=np.full(n_out, INIT_RHO),
            )
        )
    return BnnModel(layer_sizes=sizes, layers=layers, sigma0=sigma0, rng_seed=seed, mc_samples=mc_samples)


def kl_mean_field(layers, sigma0: float) -> float:
    """Closed-form KL(q || N(0, sigma0^2 I)) for the factorized Gaussian posterior."""
    if sigma0 <= 0:
        raise ConfigError("sigma0 must be positive")
    total = 0.0
    for l in layers:
        for mu, rho in ((l.w_mu, l.w_rho), (l.b_mu, l.b_rho)):
            sig = softplus(rho)
            total += float(np.sum(np.log(sigma0 / sig) + (sig**2 + mu**2) / (2.0 * sigma0**2) - 0.5))
    return total


def draw_noises(model: BnnModel, rng) -> list:
    """One standard-normal draw per parameter, shaped like the layers."""
    return [
        (rng.standard_normal(l.w_mu.shape), rng.standard_normal(l.b_mu.shape))
        for l in model.layers
    ]


def _sampled_weights(model: BnnModel, noises):
    ws, bs = [], []
    for l, (eps_w, eps_b) in zip(model.layers, noises):
        ws.append(l.w_mu + softplus(l.w_rho) * eps_w)
        bs.append(l.b_mu + softplus(l.b_rho) * eps_b)
    return ws, bs


def _forward(ws, bs, X):
    """Pre-activations and activations; tanh hidden units, raw final logit."""
    acts = [X]
    a = X
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericalError(
                f"non-finite pre-activation at layer {i}, max |z| = {np.max(np.abs(z[np.isfinite(z)])) if np.any(np.isfinite(z)) else 'nan'}"
            )
        a = np.tanh(z) if i < len(ws) - 1 else z
        acts.append(a)
    return acts


def elbo_parts(model: BnnModel, X, y, n_total: int, noises_per_sample) -> tuple:
    """Loss and per-parameter gradients for explicit noise draws.

    Returns (loss, grads) with grads a list of (d_w_mu, d_w_rho, d_b_mu,
    d_b_rho) per layer. The loss is (N/|batch|) * sum of sample-averaged
    per-row NLL plus the closed-form KL.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ConfigError("elbo requires a non-empty batch")
    n_batch = X.shape[0]
    S = len(noises_per_sample)
    scale = (n_total / n_batch) / S

    grads = [
        (np.zeros_like(l.w_mu), np.zeros_like(l.w_rho), np.zeros_like(l.b_mu), np.zeros_like(l.b_rho))
        for l in model.layers
    ]
    nll_total = 0.0
    for noises in noises_per_sample:
        ws, bs = _sampled_weights(model, noises)
        acts = _forward(ws, bs, X)
        z_out = acts[-1][:, 0]
        nll_total += float(np.sum(bernoulli_nll_from_margin(z_out, y)))

        delta = (sigmoid(z_out) - y)[:, None] * scale  # dLoss/dz_out
        for i in range(len(ws) - 1, -1, -1):
            a_prev = acts[i]
            d_w = a_prev.T @ delta
            d_b = delta.sum(axis=0)
            l = model.layers[i]
            eps_w, eps_b = noises[i]
            g_wmu, g_wrho, g_bmu, g_brho = grads[i]
            g_wmu += d_w
            g_wrho += d_w * eps_w * sigmoid(l.w_rho)
            g_bmu += d_b
            g_brho += d_b * eps_b * sigmoid(l.b_rho)
            if i > 0:
                delta = (delta @ ws[i].T) * (1.0 - acts[i] ** 2)  # tanh'

    for i, l in enumerate(model.layers):
        g_wmu, g_wrho, g_bmu, g_brho = grads[i]
        sig_w, sig_b = softplus(l.w_rho), softplus(l.b_rho)
        g_wmu += l.w_mu / model.sigma0**2
        g_bmu += l.b_mu / model.sigma0**2
        g_wrho += (-1.0 / sig_w + sig_w / model.sigma0**2) * sigmoid(l.w_rho)
        g_brho += (-1.0 / sig_b + sig_b / model.sigma0**2) * sigmoid(l.b_rho)

    loss = scale * nll_total + kl_mean_field(model.layers, model.sigma0)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite ELBO loss (magnitude {abs(loss)})")
    return loss, grads


def elbo_loss(model: BnnModel, X, y, n_total: int, S: int, rng) -> float:
    """Monte-Carlo negative ELBO of one batch with S reparameterized samples."""
    noises = [draw_noises(model, rng) for _ in range(S)]
    loss, _ = elbo_parts(model, X, y, n_total, noises)
    return loss


def train(
    model: BnnModel,
    X,
    y,
    epochs: int,
    lr: float,
    batch_size: int = 512,
    s_train: int = 1,
    seed: Optional[int] = None,
) -> BnnModel:
    """SGD on the negative ELBO over shuffled mini-batches, in place.

    Deterministic for a fixed seed (defaults to the model's rng_seed).
    Returns the same model object after `epochs` sweeps.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.layer_sizes[0]:
        raise SchemaError(f"expected {model.layer_sizes[0]} input features, got {X.shape}")
    n = X.shape[0]
    rng = np.random.default_rng(model.rng_seed if seed is None else seed)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            noises = [draw_noises(model, rng) for _ in range(s_train)]
            loss, grads = elbo_parts(model, X[idx], y[idx], n, noises)
            if loss > LOSS_DIVERGE_LIMIT:
                raise NumericalError(f"ELBO loss diverged beyond {LOSS_DIVERGE_LIMIT:g} (got {loss:g})")
            for l, (g_wmu, g_wrho, g_bmu, g_brho) in zip(model.layers, grads):
                l.w_mu -= lr * g_wmu
                l.w_rho -= lr * g_wrho
                l.b_mu -= lr * g_bmu
                l.b_rho -= lr * g_brho
    return model


def predict_mc(model: BnnModel, X, S: int, seed: int):
    """Predictive mean plus epistemic/aleatoric uncertainty from S weight draws.

    The same S weight samples are reused for every row of the call, so any
    subset of rows scores identically to the full matrix.
    """
    if S < 1:
        raise ConfigError("S must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.layer_sizes[0]:
        raise SchemaError(f"expected {model.layer_sizes[0]} input features, got {X.shape}")
    rng = np.random.default_rng(seed)
    probs = np.empty((S, X.shape[0]), dtype=np.float64)
    for s in range(S):
        ws, bs = _sampled_weights(model, draw_noises(model, rng))
        probs[s] = sigmoid(_forward(ws, bs, X)[-1][:, 0])
    mu = probs.mean(axis=0)
    m2 = (probs**2).mean(axis=0)
    u_epi = np.maximum(m2 - mu**2, 0.0)
    u_ale = mu - m2
    return mu, u_epi, u_ale
