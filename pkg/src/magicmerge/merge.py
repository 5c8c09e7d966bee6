"""Task vectors and the merge operators: averaging, task arithmetic, TIES, DARE.

A task vector holds, per manifest layer, the flattened weight delta followed
by the bias delta.  Deltas are kept in float64 so ``pre + delta`` reproduces
the fine-tuned float32 weights exactly.  Merge operators return an unscaled
merged vector; the global coefficient is applied only by :func:`recompose`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import ModelManifest, ModelWeights
from .errors import BaseMismatch, EmptyInput, ShapeMismatch

METHODS = ("average", "task_arithmetic", "ties", "dare")


def fingerprint(w: ModelWeights) -> str:
    h = hashlib.sha256()
    for name in sorted(w.tensors):
        arr = np.ascontiguousarray(w.tensors[name], dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(repr(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class TaskVector:
    per_layer: dict
    base_fingerprint: str
    manifest: ModelManifest = field(repr=False)

    @property
    def layers(self):
        return sorted(self.per_layer)

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.per_layer[layer]

    def replace_layers(self, new: dict) -> "TaskVector":
        per_layer = dict(self.per_layer)
        for l, v in new.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.per_layer[l].shape:
                raise ShapeMismatch(f"layer {l}: shape {v.shape} != {self.per_layer[l].shape}")
            per_layer[l] = v
        return TaskVector(per_layer, self.base_fingerprint, self.manifest)

    def scale(self, c: float) -> "TaskVector":
        return TaskVector({l: c * v for l, v in self.per_layer.items()}, self.base_fingerprint, self.manifest)

    def scale_layers(self, coefs) -> "TaskVector":
        return TaskVector(
            {l: coefs[l] * v for l, v in self.per_layer.items()}, self.base_fingerprint, self.manifest
        )

    def norms(self, p: int = 2) -> list:
        return [float(np.linalg.norm(self.per_layer[l], ord=p)) for l in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.per_layer[l] for l in self.layers])


def _layer_vector(w: ModelWeights, layer) -> np.ndarray:
    parts = [np.asarray(w[layer.weight_name], dtype=np.float64).ravel()]
    if layer.bias_name:
        parts.append(np.asarray(w[layer.bias_name], dtype=np.float64).ravel())
    return np.concatenate(parts)


def task_vector(pre: ModelWeights, tuned: ModelWeights, m: ModelManifest) -> TaskVector:
    """Per-layer ``tuned - pre``."""
    if sorted(pre.tensors) != sorted(tuned.tensors):
        raise ShapeMismatch("pretrained and fine-tuned checkpoints hold different tensor names")
    for name, v in pre.tensors.items():
        if np.shape(v) != np.shape(tuned.tensors[name]):
            raise ShapeMismatch(f"tensor {name!r}: {np.shape(v)} vs {np.shape(tuned.tensors[name])}")
    fp = fingerprint(pre)
    claimed = tuned.metadata.get("base_fingerprint")
    if claimed is not None and claimed != fp:
        raise BaseMismatch("fine-tuned checkpoint records a different pretrained base")
    m = m.bind(pre)
    per_layer = {layer.index: _layer_vector(tuned, layer) - _layer_vector(pre, layer) for layer in m.layers}
    return TaskVector(per_layer, fp, m)


def recompose(pre: ModelWeights, merged_tv: TaskVector, lam: float = 1.0) -> ModelWeights:
    """``pre + lam * merged_tv`` per layer, returned as float32 weights."""
    if fingerprint(pre) != merged_tv.base_fingerprint:
        raise BaseMismatch("task vector was built against a different pretrained checkpoint")
    tensors = {k: np.array(v, dtype=np.float32, copy=True) for k, v in pre.tensors.items()}
    for layer in merged_tv.manifest.layers:
        delta = lam * merged_tv.per_layer[layer.index]
        W = np.asarray(pre[layer.weight_name], dtype=np.float64)
        nw = W.size
        tensors[layer.weight_name] = (W + delta[:nw].reshape(W.shape)).astype(np.float32)
        if layer.bias_name:
            b = np.asarray(pre[layer.bias_name], dtype=np.float64)
            tensors[layer.bias_name] = (b + delta[nw:].reshape(b.shape)).astype(np.float32)
    return ModelWeights(tensors, metadata=dict(pre.metadata))


def _check(tvs: Sequence[TaskVector]):
    if not tvs:
        raise EmptyInput("no task vectors to merge")
    base = tvs[0].base_fingerprint
    layers = tvs[0].layers
    for tv in tvs[1:]:
        if tv.base_fingerprint != base:
            raise BaseMismatch("task vectors come from different pretrained checkpoints")
        if tv.layers != layers:
            raise ShapeMismatch("task vectors cover different layers")
        for l in layers:
            if tv.per_layer[l].shape != tvs[0].per_layer[l].shape:
                raise ShapeMismatch(f"layer {l} shapes differ between task vectors")
    return tvs[0], layers


def _stack(tvs, l):
    return np.stack([tv.per_layer[l] for tv in tvs])


def merge_average(tvs: Sequence[TaskVector]) -> TaskVector:
    ref, layers = _check(tvs)
    k = len(tvs)
    return TaskVector({l: _stack(tvs, l).sum(axis=0) / k for l in layers}, ref.base_fingerprint, ref.manifest)


def merge_task_arithmetic(tvs: Sequence[TaskVector]) -> TaskVector:
    ref, layers = _check(tvs)
    return TaskVector({l: _stack(tvs, l).sum(axis=0) for l in layers}, ref.base_fingerprint, ref.manifest)


def keep_count(n: int, keep_fraction: float) -> int:
    # rounding guards against products such as 0.7 * 10 = 7.000000000000001
    return min(n, int(math.ceil(round(keep_fraction * n, 9))))


def trim(v: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ``ceil(keep_fraction * n)`` largest-magnitude entries.

    Equal magnitudes are resolved in favour of the lower flat index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    v = np.asarray(v)
    k = keep_count(v.size, keep_fraction)
    out = np.zeros_like(v)
    if k == 0:
        return out
    order = np.argsort(-np.abs(v.ravel()), kind="stable")[:k]
    out.ravel()[order] = v.ravel()[order]
    return out


def elect_sign(stacked: np.ndarray) -> np.ndarray:
    return np.sign(stacked.sum(axis=0))


def disjoint_mean(stacked: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Mean over the tasks whose entry agrees with the elected sign (0 where none do)."""
    agree = (np.sign(stacked) == signs) & (stacked != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stacked, 0.0).sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def merge_ties(tvs: Sequence[TaskVector], keep_fraction: float = 0.2) -> TaskVector:
    ref, layers = _check(tvs)
    out = {}
    for l in layers:
        trimmed = np.stack([trim(tv.per_layer[l], keep_fraction) for tv in tvs])
        out[l] = disjoint_mean(trimmed, elect_sign(trimmed))
    return TaskVector(out, ref.base_fingerprint, ref.manifest)


def dare_drop(v: np.ndarray, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must lie in [0, 1), got {drop_prob}")
    if drop_prob == 0.0:
        return np.array(v, copy=True)
    keep = rng.random(v.shape) >= drop_prob
    return np.where(keep, v / (1.0 - drop_prob), 0.0)


def merge_dare(tvs: Sequence[TaskVector], drop_prob: float = 0.9, seed: int = 0) -> TaskVector:
    """Drop-and-rescale each task vector, then sum.

    Randomness for task ``k`` and layer ``l`` comes from a generator seeded by
    ``(seed, k, l)``, so the result does not depend on evaluation order.
    """
    ref, layers = _check(tvs)
    out = {}
    for l in layers:
        dropped = [
            dare_drop(tv.per_layer[l], drop_prob, np.random.default_rng([seed, k, l]))
            for k, tv in enumerate(tvs)
        ]
        out[l] = np.stack(dropped).sum(axis=0)
    return TaskVector(out, ref.base_fingerprint, ref.manifest)


@dataclass(frozen=True)
class MergeConfig:
    method: str = "task_arithmetic"
    lam: float = 0.3
    ties_keep_fraction: float = 0.2
    dare_drop_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.ties_keep_fraction <= 1.0:
            raise ValueError("ties_keep_fraction must lie in (0, 1]")
        if not 0.0 <= self.dare_drop_prob < 1.0:
            raise ValueError("dare_drop_prob must lie in [0, 1)")


def merge(tvs: Sequence[TaskVector], cfg: MergeConfig) -> TaskVector:
    """Dispatch to the configured operator; the result is still unscaled."""
    if cfg.method == "average":
        return merge_average(tvs)
    if cfg.method == "task_arithmetic":
        return merge_task_arithmetic(tvs)
    if cfg.method == "ties":
        return merge_ties(tvs, cfg.ties_keep_fraction)
    return merge_dare(tvs, cfg.dare_drop_prob, cfg.seed)


def effective_lambda(cfg: MergeConfig) -> float:
    # averaging already divides by K, so it recomposes at unit scale
    return 1.0 if cfg.method == "average" else cfg.lam
