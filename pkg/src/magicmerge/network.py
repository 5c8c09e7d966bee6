"""MLP evaluation, task features, metrics and a plain-SGD trainer.

Weights are stored as float32 but every forward/backward pass here runs in
float64; traces and task features are returned as float64 arrays.  The
weight matrix of a layer has shape ``[out_dim, in_dim]`` and a layer computes
``act(a @ W.T + b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .checkpoint import ModelManifest, ModelWeights, load_safetensors, save_safetensors
from .errors import DivergedLoss, MissingLabels, ShapeMismatch

METRICS = ("accuracy", "neg_xent", "neg_entropy")
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class FeatureTrace:
    per_layer: list
    logits: np.ndarray


@dataclass
class TaskFeature:
    per_layer: list
    input_id: str = ""


@dataclass
class LabeledBatch:
    """Inputs with optional integer labels.

    ``head`` optionally restricts scoring and training to the logit slice
    ``[start, stop)``; labels are then relative to ``start``.
    """

    inputs: np.ndarray
    labels: Optional[np.ndarray] = None
    task_id: str = ""
    head: Optional[tuple] = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float32))
        if self.head is not None:
            self.head = (int(self.head[0]), int(self.head[1]))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if self.labels.shape[0] != self.inputs.shape[0]:
                raise ShapeMismatch(
                    f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs"
                )

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "LabeledBatch":
        labels = None if self.labels is None else self.labels[idx]
        return LabeledBatch(self.inputs[idx], labels, self.task_id, self.head)

    def unlabeled(self) -> "LabeledBatch":
        return LabeledBatch(self.inputs, None, self.task_id, self.head)

    def global_labels(self):
        if self.labels is None or self.head is None:
            return self.labels
        return self.labels + self.head[0]

    def validate(self, num_classes: int) -> None:
        n = num_classes if self.head is None else self.head[1] - self.head[0]
        if self.head is not None and not 0 <= self.head[0] < self.head[1] <= num_classes:
            raise ValueError(f"head {self.head} outside [0, {num_classes})")
        if self.labels is not None and (self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= n):
            raise ValueError(f"labels must lie in [0, {n})")


def save_batch(batch: LabeledBatch, path) -> None:
    """Store a batch as a checkpoint with ``inputs`` and optional ``labels`` tensors.

    Labels are written as float32 values holding integers.
    """
    tensors = {"inputs": batch.inputs}
    if batch.labels is not None:
        tensors["labels"] = batch.labels.astype(np.float32)
    meta = {"task_id": batch.task_id} if batch.task_id else {}
    if batch.head is not None:
        meta["head"] = f"{batch.head[0]}:{batch.head[1]}"
    save_safetensors(ModelWeights(tensors, metadata=meta), path)


def load_batch(path) -> LabeledBatch:
    w = load_safetensors(path)
    labels = w.tensors.get("labels")
    if labels is not None:
        labels = np.rint(labels).astype(np.int64)
    head = w.metadata.get("head")
    if head is not None:
        head = tuple(int(v) for v in head.split(":"))
    return LabeledBatch(w["inputs"], labels, w.metadata.get("task_id", ""), head)


# -- activations ------------------------------------------------------------


def activate(z, kind: str):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "gelu":
        return 0.5 * z * (1.0 + erf(z / _SQRT2))
    return z


def activate_grad(z, kind: str):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "gelu":
        return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)
    return np.ones_like(z)


def _params(w: ModelWeights, layer):
    W = np.asarray(w[layer.weight_name], dtype=np.float64)
    b = None if not layer.bias_name else np.asarray(w[layer.bias_name], dtype=np.float64)
    return W, b


def layer_forward(w: ModelWeights, layer, a: np.ndarray, return_pre=False):
    W, b = _params(w, layer)
    if a.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"layer {layer.index} expects {W.shape[1]} inputs, got {a.shape[-1]}")
    z = a @ W.T
    if b is not None:
        z = z + b
    out = activate(z, layer.activation)
    return (out, z) if return_pre else out


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeMismatch(f"inputs must be rank 1 or 2, got shape {x.shape}")
    return x, False


def forward_with_trace(w: ModelWeights, m: ModelManifest, x) -> FeatureTrace:
    a, squeeze = _as_batch(x)
    if a.shape[1] != m.input_dim:
        raise ShapeMismatch(f"inputs have {a.shape[1]} features, manifest expects {m.input_dim}")
    per_layer = []
    for layer in m.layers:
        a = layer_forward(w, layer, a)
        per_layer.append(a)
    if squeeze:
        per_layer = [p[0] for p in per_layer]
    return FeatureTrace(per_layer, per_layer[-1])


def logits(w: ModelWeights, m: ModelManifest, x) -> np.ndarray:
    return forward_with_trace(w, m, x).logits


def task_feature(pre: ModelWeights, variant: ModelWeights, m: ModelManifest, x, input_id="") -> TaskFeature:
    """Per-layer activation difference ``f^l(x; variant) - f^l(x; pre)``.

    Both models run their own complete forward pass from the raw input.
    """
    ft = forward_with_trace(variant, m, x)
    fp = forward_with_trace(pre, m, x)
    return TaskFeature([a - b for a, b in zip(ft.per_layer, fp.per_layer)], input_id)


# -- first-order check of task features --------------------------------------


def _shifted(pre: ModelWeights, delta: dict, t: float) -> ModelWeights:
    tensors = {}
    for name, v in pre.tensors.items():
        v = np.asarray(v, dtype=np.float64)
        if name in delta:
            v = v + t * np.asarray(delta[name], dtype=np.float64)
        tensors[name] = v
    return ModelWeights(tensors)


def linearised_task_feature(pre: ModelWeights, delta: dict, m: ModelManifest, x, h=1e-5) -> list:
    """Directional derivative of every layer's feature along ``delta``, by central differences.

    ``delta`` maps tensor names to weight offsets.  The result approximates
    ``J(x) @ delta`` per layer without forming the Jacobian.
    """
    plus = forward_with_trace(_shifted(pre, delta, h), m, x).per_layer
    minus = forward_with_trace(_shifted(pre, delta, -h), m, x).per_layer
    return [(p - q) / (2.0 * h) for p, q in zip(plus, minus)]


def linearisation_residual(pre: ModelWeights, delta: dict, m: ModelManifest, x, t: float, layer=-1, lin=None) -> float:
    """``||dh(t * delta) - t * dh_lin|| / t`` at one layer; shrinks linearly in ``t``."""
    if lin is None:
        lin = linearised_task_feature(pre, delta, m, x)
    base = forward_with_trace(_shifted(pre, {}, 0.0), m, x).per_layer[layer]
    moved = forward_with_trace(_shifted(pre, delta, t), m, x).per_layer[layer]
    return float(np.linalg.norm((moved - base) - t * lin[layer]) / t)


# -- metrics ----------------------------------------------------------------


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def metric_from_logits(z: np.ndarray, labels, kind: str, head=None) -> float:
    if kind not in METRICS:
        raise ValueError(f"unknown metric {kind!r}; expected one of {METRICS}")
    z = np.atleast_2d(z)
    if head is not None:
        z = z[:, head[0] : head[1]]
    if kind == "neg_entropy":
        logp = log_softmax(z)
        return float(np.mean(np.sum(np.exp(logp) * logp, axis=-1)))
    if labels is None:
        raise MissingLabels(f"metric {kind!r} needs labels")
    labels = np.asarray(labels)
    if kind == "accuracy":
        return float(np.mean(np.argmax(z, axis=-1) == labels))
    logp = log_softmax(z)
    return float(np.mean(logp[np.arange(len(labels)), labels]))


def performance_metric(w: ModelWeights, m: ModelManifest, batch: LabeledBatch, kind: str = "neg_entropy") -> float:
    if kind in ("accuracy", "neg_xent") and batch.labels is None:
        raise MissingLabels(f"metric {kind!r} needs a labelled batch")
    return metric_from_logits(logits(w, m, batch.inputs), batch.labels, kind, batch.head)


# -- training ---------------------------------------------------------------


def init_mlp(m: ModelManifest, seed: int = 0) -> ModelWeights:
    """He-initialised weights for a manifest whose layers declare their dims."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in m.layers:
        if layer.in_dim is None or layer.out_dim is None:
            raise ValueError("init_mlp needs a manifest with in_dim/out_dim on every layer")
        scale = np.sqrt(2.0 / layer.in_dim)
        tensors[layer.weight_name] = (rng.standard_normal((layer.out_dim, layer.in_dim)) * scale).astype(np.float32)
        if layer.bias_name:
            tensors[layer.bias_name] = np.zeros(layer.out_dim, dtype=np.float32)
    return ModelWeights(tensors)


def _loss_and_grads(params, m, x, y, need_grad=True, head=None):
    acts = [x]
    pres = []
    a = x
    for layer in m.layers:
        W, b = params[layer.weight_name], params.get(layer.bias_name) if layer.bias_name else None
        z = a @ W.T
        if b is not None:
            z = z + b
        pres.append(z)
        a = activate(z, layer.activation)
        acts.append(a)
    lo, hi = (0, a.shape[1]) if head is None else head
    logp = log_softmax(a[:, lo:hi])
    n = x.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))
    if not need_grad:
        return loss, None
    grads = {}
    d = np.zeros_like(a)
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    d[:, lo:hi] = g / n
    for i in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[i]
        dz = d * activate_grad(pres[i], layer.activation)
        grads[layer.weight_name] = dz.T @ acts[i]
        if layer.bias_name:
            grads[layer.bias_name] = dz.sum(axis=0)
        d = dz @ params[layer.weight_name]
    return loss, grads


def _concat(data) -> LabeledBatch:
    if isinstance(data, LabeledBatch):
        return data
    batches = list(data)
    if not batches:
        raise ValueError("no training batches")
    if any(b.labels is None for b in batches):
        raise MissingLabels("training data must be labelled")
    heads = {b.head for b in batches}
    if len(heads) == 1:
        return LabeledBatch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
            batches[0].task_id,
            batches[0].head,
        )
    # mixed heads: pool under one softmax over all logits
    return LabeledBatch(
        np.concatenate([b.inputs for b in batches]),
        np.concatenate([b.global_labels() for b in batches]),
        "pooled",
    )


def train_specialist(
    pre: ModelWeights,
    m: ModelManifest,
    data: Union[LabeledBatch, Iterable[LabeledBatch]],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: Optional[int] = 64,
    history: Optional[list] = None,
) -> ModelWeights:
    """Fine-tune ``pre`` with cross-entropy and plain SGD (no momentum, no decay).

    Each epoch visits the data in a seeded random order in mini-batches of
    ``batch_size`` (``None`` means full batch).  If ``history`` is given, the
    full-data loss after every epoch is appended to it.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return pre.copy()
    batch = _concat(data)
    if batch.labels is None:
        raise MissingLabels("training data must be labelled")
    batch.validate(m.num_classes)
    rng = np.random.default_rng(seed)
    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in pre.tensors.items()}
    x = batch.inputs.astype(np.float64)
    y = batch.labels
    n = len(batch)
    bs = n if not batch_size else min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            loss, grads = _loss_and_grads(params, m, x[idx], y[idx], head=batch.head)
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss}")
            for name, g in grads.items():
                params[name] -= lr * g
        if history is not None:
            full, _ = _loss_and_grads(params, m, x, y, need_grad=False, head=batch.head)
            if not np.isfinite(full):
                raise DivergedLoss(f"loss became {full}")
            history.append(full)
    return ModelWeights({k: v.astype(np.float32) for k, v in params.items()}, metadata=dict(pre.metadata))


def dataset_loss(w: ModelWeights, m: ModelManifest, batch: LabeledBatch) -> float:
    params = {k: np.asarray(v, dtype=np.float64) for k, v in w.tensors.items()}
    return _loss_and_grads(params, m, batch.inputs.astype(np.float64), batch.labels, need_grad=False, head=batch.head)[0]
