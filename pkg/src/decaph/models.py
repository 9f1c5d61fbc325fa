"""Small supervised models with exact per-example gradients.

Everything is a fully connected net with ReLU hidden layers over a flat
float64 parameter vector; the four output heads cover the tasks the
simulator trains:

* ``sigmoid_bce``       -- binary classification, sigmoid + BCE
* ``softmax_ce``        -- multiclass, softmax + cross-entropy
* ``multi_margin``      -- one-vs-rest margins, multi-margin hinge loss
                           (margin 1, loss averaged over the class count)
* ``multilabel_bce``    -- per-output sigmoid + BCE averaged over outputs,
                           multi-hot labels

Per-example losses include the l2 penalty (wd/2)*||W||^2 and per-example
gradients include the matching wd*W term, so (a) finite differences of the
loss reproduce the gradient and (b) clipping a row bounds that example's
full contribution, regularizer included.

Parameters are laid out layer by layer as [W1, b1, W2, b2, ...] with W
stored row-major as (fan_out, fan_in).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import Prng

__all__ = [
    "HEADS",
    "Arch",
    "ModelState",
    "init_model",
    "per_example_grads",
    "predict",
    "apply_update",
    "save_model",
    "load_model",
]

HEADS = ("sigmoid_bce", "softmax_ce", "multi_margin", "multilabel_bce")


@dataclass(frozen=True)
class Arch:
    """Layer widths (input ... output) plus the output head."""

    widths: tuple[int, ...]
    head: str

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid layer widths {self.widths}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head == "sigmoid_bce" and self.widths[-1] != 1:
            raise ValueError("sigmoid_bce head requires a single output unit")

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths, self.widths[1:]))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class ModelState:
    params: np.ndarray
    arch: Arch
    l2_weight_decay: float = 0.0
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.params.shape != (self.arch.n_params,):
            raise ValueError(
                f"params length {self.params.shape} does not match "
                f"architecture ({self.arch.n_params} parameters)"
            )
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite model parameters")
        if self.l2_weight_decay < 0:
            raise ValueError("l2_weight_decay must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def _layer_slices(arch: Arch):
    """Yield (W_slice, b_slice, fan_in, fan_out) per layer into the flat vector."""
    off = 0
    for fan_in, fan_out in zip(arch.widths, arch.widths[1:]):
        w = slice(off, off + fan_in * fan_out)
        off += fan_in * fan_out
        b = slice(off, off + fan_out)
        off += fan_out
        yield w, b, fan_in, fan_out


def init_model(
    arch: Arch,
    prng: Prng,
    learning_rate: float = 0.1,
    l2_weight_decay: float = 0.0,
) -> ModelState:
    """Uniform fan-in initialization: W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    gen = prng.derive("model-init").generator()
    params = np.empty(arch.n_params, dtype=np.float64)
    for w, b, fan_in, fan_out in _layer_slices(arch):
        bound = 1.0 / np.sqrt(fan_in)
        params[w] = gen.uniform(-bound, bound, fan_in * fan_out)
        params[b] = gen.uniform(-bound, bound, fan_out)
    return ModelState(params, arch, l2_weight_decay, learning_rate)


def _forward(model: ModelState, x: np.ndarray):
    """Forward pass; returns (logit matrix, post-activation list, pre-activation list)."""
    acts = [x]
    pre = []
    a = x
    layers = list(_layer_slices(model.arch))
    for i, (w, b, fan_in, fan_out) in enumerate(layers):
        z = a @ model.params[w].reshape(fan_out, fan_in).T + model.params[b]
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(a)
    return a, acts, pre


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def _head_loss_and_grad(head: str, logits: np.ndarray, labels: np.ndarray):
    """Per-example losses and dL/dlogits for each head."""
    n, k = logits.shape
    if head == "sigmoid_bce":
        y = labels.astype(np.float64).reshape(n, 1)
        losses = (_softplus(logits) - y * logits).ravel()
        dz = _sigmoid(logits) - y
    elif head == "softmax_ce":
        y = labels.astype(np.int64)
        lse = np.log(np.sum(np.exp(logits - np.max(logits, axis=1, keepdims=True)), axis=1))
        lse += np.max(logits, axis=1)
        losses = lse - logits[np.arange(n), y]
        dz = _softmax(logits)
        dz[np.arange(n), y] -= 1.0
    elif head == "multi_margin":
        y = labels.astype(np.int64)
        true_scores = logits[np.arange(n), y][:, None]
        margins = 1.0 - true_scores + logits
        margins[np.arange(n), y] = 0.0
        active = margins > 0
        losses = np.sum(np.where(active, margins, 0.0), axis=1) / k
        dz = active.astype(np.float64) / k
        dz[np.arange(n), y] = -np.sum(active, axis=1) / k
    elif head == "multilabel_bce":
        y = labels.astype(np.float64)
        if y.shape != logits.shape:
            raise ValueError("multilabel head requires multi-hot labels matching outputs")
        losses = np.mean(_softplus(logits) - y * logits, axis=1)
        dz = (_sigmoid(logits) - y) / k
    else:  # pragma: no cover - guarded by Arch
        raise ValueError(f"unknown head {head!r}")
    return losses, dz


def per_example_grads(model: ModelState, features: np.ndarray, labels: np.ndarray):
    """Per-example gradients of the regularized loss.

    Returns (G, losses) where G[i] is the flat gradient of
    L(W, x_i) + (wd/2)*||W||^2 and losses[i] the matching loss value.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.n_in:
        raise ValueError(
            f"features shape {x.shape} incompatible with input width {model.arch.n_in}"
        )
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    n = x.shape[0]
    logits, acts, pre = _forward(model, x)
    losses, delta = _head_loss_and_grad(model.arch.head, logits, np.asarray(labels))

    grads = np.empty((n, model.arch.n_params), dtype=np.float64)
    layers = list(_layer_slices(model.arch))
    for i in range(len(layers) - 1, -1, -1):
        w, b, fan_in, fan_out = layers[i]
        grads[:, w] = np.einsum("no,ni->noi", delta, acts[i]).reshape(n, -1)
        grads[:, b] = delta
        if i > 0:
            delta = (delta @ model.params[w].reshape(fan_out, fan_in)) * (pre[i - 1] > 0)

    wd = model.l2_weight_decay
    if wd > 0.0:
        grads += wd * model.params
        losses = losses + 0.5 * wd * float(model.params @ model.params)
    return grads, losses


def predict(model: ModelState, features: np.ndarray) -> np.ndarray:
    """Scores as an (n, n_out) matrix.

    Probabilities for the sigmoid/softmax/multilabel heads; raw margins for
    multi_margin.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.n_in:
        raise ValueError(
            f"features shape {x.shape} incompatible with input width {model.arch.n_in}"
        )
    logits, _, _ = _forward(model, x)
    head = model.arch.head
    if head == "sigmoid_bce" or head == "multilabel_bce":
        return _sigmoid(logits)
    if head == "softmax_ce":
        return _softmax(logits)
    return logits


def apply_update(model: ModelState, grad: np.ndarray) -> ModelState:
    """One SGD step: W' = W - learning_rate * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ValueError(f"gradient length {grad.shape} != params {model.params.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient entries (training diverged?)")
    return replace(model, params=model.params - model.learning_rate * grad)


def save_model(model: ModelState, path_prefix: str | Path) -> None:
    """Checkpoint: raw little-endian float64 vector + JSON descriptor."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    model.params.astype("<f8").tofile(f"{prefix}.params.bin")
    desc = {
        "widths": list(model.arch.widths),
        "head": model.arch.head,
        "l2_weight_decay": model.l2_weight_decay,
        "learning_rate": model.learning_rate,
        "n_params": model.arch.n_params,
        "dtype": "<f8",
    }
    Path(f"{prefix}.arch.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")


def load_model(path_prefix: str | Path) -> ModelState:
    desc = json.loads(Path(f"{path_prefix}.arch.json").read_text())
    arch = Arch(widths=tuple(desc["widths"]), head=desc["head"])
    params = np.fromfile(f"{path_prefix}.params.bin", dtype="<f8")
    return ModelState(params, arch, desc["l2_weight_decay"], desc["learning_rate"])
