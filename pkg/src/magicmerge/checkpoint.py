"""Checkpoint files and the layer manifest.

Checkpoints use the safetensors layout restricted to little-endian float32::

    [u64 LE header length N][N bytes of UTF-8 JSON header][raw data buffer]

The header maps each tensor name to ``{"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]}`` with offsets relative to the start of the data
buffer, plus an optional ``"__metadata__"`` string map.  Files written here are
deterministic: tensors are laid out in name order, the header is compact JSON
with sorted keys, padded with spaces to a multiple of 8 bytes.

The manifest is a JSON sidecar describing the MLP layer order, so one
manifest serves the pretrained model and every fine-tuned variant.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    IoFailure,
    MalformedHeader,
    MissingTensor,
    OffsetOverlap,
    UnknownActivation,
    UnsupportedDtype,
)

ACTIVATIONS = ("relu", "gelu", "tanh", "none")
_HEADER_ALIGN = 8


@dataclass
class ModelWeights:
    """Ordered mapping of tensor name to array; one checkpoint."""

    tensors: dict = field(default_factory=dict)
    source_path: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            {k: np.array(v, copy=True) for k, v in self.tensors.items()},
            self.source_path,
            dict(self.metadata),
        )

    def equals(self, other: "ModelWeights") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self.tensors) != list(other.tensors):
            return False
        for k, v in self.tensors.items():
            o = other.tensors[k]
            if v.shape != o.shape or v.dtype != o.dtype:
                return False
            if v.tobytes() != o.tobytes():
                return False
        return True


# -- safetensors ------------------------------------------------------------


def _header_bytes(entries: dict, metadata: dict) -> bytes:
    header = dict(entries)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pad = (-len(raw)) % _HEADER_ALIGN
    return raw + b" " * pad


def to_bytes(w: ModelWeights) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(w.tensors):
        arr = np.asarray(w.tensors[name])
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {
            "dtype": "F32",
            "shape": [int(s) for s in arr.shape],
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    header = _header_bytes(entries, w.metadata)
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_safetensors(w: ModelWeights, path) -> None:
    payload = to_bytes(w)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"could not write {path}: {exc}") from exc


def from_bytes(buf: bytes, source_path=None) -> ModelWeights:
    if len(buf) < 8:
        raise MalformedHeader(f"file is {len(buf)} bytes, shorter than the 8-byte length prefix")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > len(buf) - 8:
        raise MalformedHeader(f"header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    data = memoryview(buf)[8 + n :]
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    spans = []
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= set(info):
            raise MalformedHeader(f"entry {name!r} lacks dtype/shape/data_offsets")
        if info["dtype"] != "F32":
            raise UnsupportedDtype(f"tensor {name!r} has dtype {info['dtype']!r}; only F32 is supported")
        shape = info["shape"]
        offsets = info["data_offsets"]
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise MalformedHeader(f"tensor {name!r} has invalid shape {shape!r}")
        if not (
            isinstance(offsets, list)
            and len(offsets) == 2
            and all(isinstance(o, int) and o >= 0 for o in offsets)
        ):
            raise MalformedHeader(f"tensor {name!r} has invalid data_offsets {offsets!r}")
        begin, end = offsets
        if begin > end or end > len(data):
            raise OffsetOverlap(
                f"tensor {name!r} spans [{begin}, {end}) outside a {len(data)}-byte buffer"
            )
        numel = int(np.prod(shape, dtype=np.int64))
        if end - begin != 4 * numel:
            raise MalformedHeader(
                f"tensor {name!r}: {end - begin} bytes for {numel} float32 values"
            )
        spans.append((begin, end, name, shape))

    spans.sort()
    for (b0, e0, n0, _), (b1, e1, n1, _) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OffsetOverlap(f"tensors {n0!r} and {n1!r} overlap")

    tensors = {}
    for begin, end, name, shape in spans:
        arr = np.frombuffer(data[begin:end], dtype="<f4").astype(np.float32)
        tensors[name] = arr.reshape(shape)
    return ModelWeights(tensors, None if source_path is None else str(source_path), dict(metadata))


def load_safetensors(path) -> ModelWeights:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(f"could not read {path}: {exc}") from exc
    return from_bytes(buf, source_path=os.fspath(path))


# -- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    index: int
    weight_name: str
    bias_name: Optional[str] = None
    activation: str = "none"
    in_dim: Optional[int] = None
    out_dim: Optional[int] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise UnknownActivation(
                f"layer {self.index}: unknown activation {self.activation!r} (expected one of {ACTIVATIONS})"
            )


@dataclass(frozen=True)
class ModelManifest:
    layers: tuple
    input_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DimensionMismatch("a manifest needs at least one layer")
        if self.input_dim < 1 or self.num_classes < 1:
            raise DimensionMismatch("input_dim and num_classes must be positive")
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise DimensionMismatch(f"layer at position {i} carries index {layer.index}")
        self._check_composition()

    @property
    def L(self) -> int:
        return len(self.layers)

    def _check_composition(self):
        prev = self.input_dim
        for layer in self.layers:
            if layer.in_dim is not None and prev is not None and layer.in_dim != prev:
                raise DimensionMismatch(
                    f"layer {layer.index} expects input dim {layer.in_dim}, previous output is {prev}"
                )
            prev = layer.out_dim
        last = self.layers[-1].out_dim
        if last is not None and last != self.num_classes:
            raise DimensionMismatch(f"last layer outputs {last}, manifest declares {self.num_classes} classes")

    def tensor_names(self):
        names = []
        for layer in self.layers:
            names.append(layer.weight_name)
            if layer.bias_name:
                names.append(layer.bias_name)
        return names

    def bind(self, w: ModelWeights) -> "ModelManifest":
        """Check the manifest against concrete weights; returns a copy with dims filled in."""
        bound = []
        for layer in self.layers:
            if layer.weight_name not in w:
                raise MissingTensor(f"layer {layer.index}: weight {layer.weight_name!r} not in checkpoint")
            W = w[layer.weight_name]
            if W.ndim != 2:
                raise DimensionMismatch(f"layer {layer.index}: weight must be rank-2, got shape {W.shape}")
            out_dim, in_dim = W.shape
            if layer.bias_name:
                if layer.bias_name not in w:
                    raise MissingTensor(f"layer {layer.index}: bias {layer.bias_name!r} not in checkpoint")
                b = w[layer.bias_name]
                if b.shape != (out_dim,):
                    raise DimensionMismatch(
                        f"layer {layer.index}: bias shape {b.shape} does not match output dim {out_dim}"
                    )
            for declared, actual, what in ((layer.in_dim, in_dim, "in"), (layer.out_dim, out_dim, "out")):
                if declared is not None and declared != actual:
                    raise DimensionMismatch(
                        f"layer {layer.index}: manifest {what}_dim {declared} but tensor gives {actual}"
                    )
            bound.append(replace(layer, in_dim=in_dim, out_dim=out_dim))
        return ModelManifest(tuple(bound), self.input_dim, self.num_classes)

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"weight": layer.weight_name, "bias": layer.bias_name, "activation": layer.activation}
            if layer.in_dim is not None:
                d["in_dim"] = layer.in_dim
            if layer.out_dim is not None:
                d["out_dim"] = layer.out_dim
            layers.append(d)
        return {"input_dim": self.input_dim, "num_classes": self.num_classes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelManifest":
        try:
            layers = [
                LayerSpec(
                    index=i,
                    weight_name=spec["weight"],
                    bias_name=spec.get("bias"),
                    activation=spec.get("activation", "none"),
                    in_dim=spec.get("in_dim"),
                    out_dim=spec.get("out_dim"),
                )
                for i, spec in enumerate(d["layers"])
            ]
            return cls(tuple(layers), int(d["input_dim"]), int(d["num_classes"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from exc


def load_manifest(path, weights: Optional[ModelWeights] = None) -> ModelManifest:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = ModelManifest.from_dict(json.load(fh))
    if weights is not None:
        manifest = manifest.bind(weights)
    return manifest


def save_manifest(m: ModelManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(m.to_dict(), fh, indent=2)
        fh.write("\n")


def mlp_manifest(dims, activation="relu", prefix="fc") -> ModelManifest:
    """Manifest for a plain MLP with layer sizes ``dims`` (input first, classes last).

    Hidden layers use ``activation``; the output layer has none.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise DimensionMismatch("need at least input and output dims")
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = activation if i < len(dims) - 2 else "none"
        layers.append(LayerSpec(i, f"{prefix}{i}.weight", f"{prefix}{i}.bias", act, a, b))
    return ModelManifest(tuple(layers), dims[0], dims[-1])
