"""Dense numeric core: embedding lookup, field-broadcast masking, MLP
forward, hand-derived reverse-mode backward, and Adam.

All gradients are exact reverse-mode derivatives of the *summed* batch
loss; dL/dz aggregates over the embedding slots of each field and over
the batch. Arithmetic is float32 by default with a float64 mode for
finite-difference testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Batch, FieldSchema


class ShapeError(Exception):
    pass


class NumericalError(Exception):
    pass


class TapeError(Exception):
    pass


DEFAULT_HIDDEN = (400, 400, 200)


class BackboneModel:
    """Per-field embedding tables plus an MLP ending in a single logit.

    Continuous fields hold a single learnable vector scaled by the raw
    value, so every field occupies exactly `embed_dim` input slots and
    field-level pruning is uniform.
    """

    def __init__(self, schema: FieldSchema, embed_dim: int = 10,
                 hidden_sizes: Sequence[int] = DEFAULT_HIDDEN,
                 seed: int = 0, dtype=np.float32):
        self.schema = schema
        self.embed_dim = embed_dim
        self.hidden_sizes = tuple(hidden_sizes)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 0x0e1])
        self.embeddings: list[np.ndarray] = []
        for spec in schema.fields:
            rows = spec.cardinality if spec.kind == "categorical" else 1
            self.embeddings.append(
                rng.normal(0.0, 0.01, size=(rows, embed_dim)).astype(self.dtype))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        fan_in = schema.m * embed_dim
        for width in list(self.hidden_sizes) + [1]:
            bound = np.sqrt(6.0 / (fan_in + width))
            self.weights.append(
                rng.uniform(-bound, bound, size=(fan_in, width)).astype(self.dtype))
            self.biases.append(np.zeros(width, dtype=self.dtype))
            fan_in = width

    @property
    def m(self) -> int:
        return self.schema.m

    @property
    def input_width(self) -> int:
        return self.m * self.embed_dim

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for j, t in enumerate(self.embeddings):
            out[f"emb.{j}"] = t
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"mlp.{i}.W"] = w
            out[f"mlp.{i}.b"] = b
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name.startswith("emb."):
            self.embeddings[int(name.split(".")[1])] = value
        else:
            _, i, which = name.split(".")
            if which == "W":
                self.weights[int(i)] = value
            else:
                self.biases[int(i)] = value

    def astype(self, dtype) -> "BackboneModel":
        clone = object.__new__(BackboneModel)
        clone.schema = self.schema
        clone.embed_dim = self.embed_dim
        clone.hidden_sizes = self.hidden_sizes
        clone.dtype = np.dtype(dtype)
        clone.embeddings = [t.astype(dtype) for t in self.embeddings]
        clone.weights = [w.astype(dtype) for w in self.weights]
        clone.biases = [b.astype(dtype) for b in self.biases]
        return clone

    def check_finite(self) -> None:
        for name, p in self.params().items():
            if not np.all(np.isfinite(p)):
                raise NumericalError(f"non-finite parameter: {name}")


@dataclass
class ForwardTape:
    """Cached activations for one backward call over one batch."""

    model_id: int
    batch: Batch
    e: np.ndarray                     # (B, mD) pre-mask embeddings
    z: Optional[np.ndarray]           # (m,) mask applied, or None
    layer_inputs: list = field(default_factory=list)   # input to each affine
    preacts: list = field(default_factory=list)        # pre-activation of each affine
    consumed: bool = False


def embed_forward(model: BackboneModel, batch: Batch) -> tuple[np.ndarray, ForwardTape]:
    """Row i is the concatenation of the field embeddings of example i."""
    B = len(batch)
    D = model.embed_dim
    e = np.empty((B, model.m * D), dtype=model.dtype)
    for j, spec in enumerate(model.schema.fields):
        col = batch.x[:, j]
        if spec.kind == "categorical":
            idx = col.astype(np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= model.embeddings[j].shape[0]):
                raise ShapeError(f"embedding index out of range for field {spec.name!r}")
            e[:, j * D:(j + 1) * D] = model.embeddings[j][idx]
        else:
            e[:, j * D:(j + 1) * D] = col[:, None].astype(model.dtype) * model.embeddings[j][0]
    return e, ForwardTape(model_id=id(model), batch=batch, e=e, z=None)


def apply_mask(e: np.ndarray, z: np.ndarray, embed_dim: int,
               tape: Optional[ForwardTape] = None) -> np.ndarray:
    """Multiply field block j of every row by z_j."""
    m = e.shape[1] // embed_dim
    if z.shape != (m,):
        raise ShapeError(f"mask length {z.shape} does not match field count {m}")
    out = e * np.repeat(z, embed_dim)[None, :].astype(e.dtype)
    if tape is not None:
        tape.z = np.asarray(z)
    return out


def mlp_forward(model: BackboneModel, x: np.ndarray,
                tape: Optional[ForwardTape] = None) -> np.ndarray:
    """Logits = affine_L(ReLU(... affine_1(x) ...)); sigmoid is applied
    downstream by the loss / inference code."""
    if x.shape[1] != model.weights[0].shape[0]:
        raise ShapeError(f"input width {x.shape[1]} != first layer {model.weights[0].shape[0]}")
    a = x
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        if tape is not None:
            tape.layer_inputs.append(a)
        pre = a @ w + b
        if tape is not None:
            tape.preacts.append(pre)
        a = pre if i == n_layers - 1 else np.maximum(pre, 0)
    return a  # (B, 1) logits


def forward(model: BackboneModel, batch: Batch,
            z: Optional[np.ndarray] = None) -> tuple[np.ndarray, ForwardTape]:
    """Full forward pass: embed, optionally mask, then MLP."""
    e, tape = embed_forward(model, batch)
    h = apply_mask(e, z, model.embed_dim, tape) if z is not None else e
    logits = mlp_forward(model, h, tape)
    return logits, tape


def backward(model: BackboneModel, tape: ForwardTape,
             dlogits: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Exact gradients of the summed batch loss w.r.t. all parameters, the
    mask vector (summed over batch and embedding slots), and the raw
    embeddings. The tape is single-use."""
    if tape.model_id != id(model):
        raise TapeError("tape was produced by a different model")
    if tape.consumed:
        raise TapeError("tape already consumed")
    tape.consumed = True

    grads: dict[str, np.ndarray] = {}
    grad = np.asarray(dlogits, dtype=model.dtype)
    if grad.ndim == 1:
        grad = grad[:, None]
    n_layers = len(model.weights)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            grad = grad * (tape.preacts[i] > 0)
        grads[f"mlp.{i}.W"] = tape.layer_inputs[i].T @ grad
        grads[f"mlp.{i}.b"] = grad.sum(axis=0)
        grad = grad @ model.weights[i].T

    D = model.embed_dim
    # grad is now dL/d(masked input)
    if tape.z is not None:
        d_masked = grad
        dz = (tape.e * d_masked).reshape(len(tape.batch), model.m, D).sum(axis=(0, 2))
        de = d_masked * np.repeat(tape.z, D)[None, :].astype(model.dtype)
    else:
        dz = np.zeros(model.m, dtype=model.dtype)
        de = grad

    for j, spec in enumerate(model.schema.fields):
        block = de[:, j * D:(j + 1) * D]
        g = np.zeros_like(model.embeddings[j])
        if spec.kind == "categorical":
            np.add.at(g, tape.batch.x[:, j].astype(np.int64), block)
        else:
            g[0] = (tape.batch.x[:, j].astype(model.dtype)[:, None] * block).sum(axis=0)
        grads[f"emb.{j}"] = g
    return grads, dz.astype(np.float64), de


class AdamState:
    """Adam with bias correction; L2 decay is added to the gradients of
    embedding tables and affine weights only (not biases, not gates)."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    @staticmethod
    def decayed(name: str) -> bool:
        return name.startswith("emb.") or name.endswith(".W")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update over every parameter present in `grads`; returns the
    updated parameter dict (arrays are replaced, not mutated)."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = dict(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"NaN/Inf gradient for parameter {name}")
        p = params[name]
        g = g.astype(np.float64)
        if state.weight_decay and AdamState.decayed(name):
            g = g + state.weight_decay * p.astype(np.float64)
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = (p.astype(np.float64) - update).astype(p.dtype)
    return out
