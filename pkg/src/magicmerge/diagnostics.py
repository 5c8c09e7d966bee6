"""Analysis reports: magnitude ratios, the disentanglement heatmap, coefficient
spread and single-task target enhancement.

Every report serialises to CSV (with a header row) and to JSON, and reads
back from either losslessly.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibrate import DEGENERATE_NORM, CalibrationPlan, feature_ratios, fsc_coefficients
from .checkpoint import ModelManifest, ModelWeights
from .errors import BaseMismatch, DegenerateFeature
from .merge import (
    TaskVector,
    disjoint_mean,
    elect_sign,
    merge_task_arithmetic,
    recompose,
    task_vector,
    trim,
)
from .network import LabeledBatch, task_feature


def _inputs(batches) -> np.ndarray:
    if isinstance(batches, (LabeledBatch, np.ndarray)):
        batches = [batches]
    xs = [b.inputs if isinstance(b, LabeledBatch) else np.atleast_2d(b) for b in batches]
    return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs])


def _write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _save(text: str, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# -- norm instability ---------------------------------------------------------------


def fusion_norms(vectors, p: int = 2) -> tuple:
    """``(||mean_k v_k||_p, mean_k ||v_k||_p)`` for a stack of flat vectors.

    The first never exceeds the second; equality needs collinear inputs.
    """
    V = np.asarray([np.ravel(v) for v in vectors], dtype=np.float64)
    return float(np.linalg.norm(V.mean(axis=0), ord=p)), float(np.mean(np.linalg.norm(V, ord=p, axis=1)))


# -- magnitude ratios ---------------------------------------------------------------


@dataclass
class RatioReport:
    rows: list = field(default_factory=list)

    def weight_ratios(self):
        return [r["weight_ratio"] for r in self.rows]

    def feature_ratios(self):
        return [r["feature_ratio"] for r in self.rows]

    def to_csv(self) -> str:
        return _write_csv(
            ["layer", "weight_ratio", "feature_ratio", "operation_name"],
            [[r["layer"], repr(r["weight_ratio"]), repr(r["feature_ratio"]), r["operation_name"]] for r in self.rows],
        )

    @classmethod
    def from_csv(cls, text: str) -> "RatioReport":
        rows = [
            {
                "layer": int(r["layer"]),
                "weight_ratio": float(r["weight_ratio"]),
                "feature_ratio": float(r["feature_ratio"]),
                "operation_name": r["operation_name"],
            }
            for r in csv.DictReader(io.StringIO(text))
        ]
        return cls(rows)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RatioReport":
        return cls(json.loads(text)["rows"])

    def save(self, path):
        _save(self.to_csv() if str(path).endswith(".csv") else self.to_json(), path)


def _safe_ratio(num, den, what):
    if den < DEGENERATE_NORM:
        warnings.warn(f"{what}: reference norm below {DEGENERATE_NORM}; ratio set to 1", DegenerateFeature, stacklevel=3)
        return 1.0
    return float(num / den)


def magnitude_ratio_report(
    before: TaskVector,
    after: TaskVector,
    pre: ModelWeights,
    m: ModelManifest,
    probe_batches,
    operation_name: str = "",
) -> RatioReport:
    """Per layer, how much an operation changed weight and feature magnitude.

    ``weight_ratio`` compares L2 norms of the layer deltas; ``feature_ratio``
    is the per-input ratio of task-feature L2 norms, averaged over the probe
    inputs.  Both task vectors are applied at unit scale.
    """
    if before.base_fingerprint != after.base_fingerprint:
        raise BaseMismatch("before and after come from different pretrained checkpoints")
    x = _inputs(probe_batches)
    # after relative to before: feature_ratios computes ||dh_first|| / ||dh_second||
    fr, degenerate = feature_ratios(after, recompose(pre, before, 1.0), pre, m, x)
    rows = []
    for l in before.layers:
        wr = _safe_ratio(np.linalg.norm(after[l]), np.linalg.norm(before[l]), f"layer {l} weights")
        if degenerate[:, l].any():
            warnings.warn(f"layer {l}: feature norm below {DEGENERATE_NORM}; ratio set to 1", DegenerateFeature, stacklevel=2)
            f = 1.0
        else:
            f = float(fr[:, l].mean())
        rows.append({"layer": int(l), "weight_ratio": wr, "feature_ratio": f, "operation_name": operation_name})
    return RatioReport(rows)


def trim_operation(tv: TaskVector, keep_fraction: float = 0.2) -> TaskVector:
    return tv.replace_layers({l: trim(tv[l], keep_fraction) for l in tv.layers})


def disjoint_operation(tvs: Sequence[TaskVector]) -> TaskVector:
    """Elect a sign per entry and average only the agreeing tasks (no trimming)."""
    out = {}
    for l in tvs[0].layers:
        stacked = np.stack([tv[l] for tv in tvs])
        out[l] = disjoint_mean(stacked, elect_sign(stacked))
    return tvs[0].replace_layers(out)


def operation_reports(
    tvs: Sequence[TaskVector],
    pre: ModelWeights,
    m: ModelManifest,
    task_batches: Sequence,
    lam: float = 0.3,
    keep_fraction: float = 0.2,
) -> dict:
    """Ratio reports for TRIM, Arithmetic and Disjoint, one per task.

    Each task's own vector is the reference and its own inputs are the probe.
    """
    arithmetic = merge_task_arithmetic(tvs).scale(lam)
    disjoint = disjoint_operation(tvs)
    out = {"trim": [], "arithmetic": [], "disjoint": []}
    for tv, batch in zip(tvs, task_batches):
        out["trim"].append(magnitude_ratio_report(tv, trim_operation(tv, keep_fraction), pre, m, batch, "trim"))
        out["arithmetic"].append(magnitude_ratio_report(tv, arithmetic, pre, m, batch, "arithmetic"))
        out["disjoint"].append(magnitude_ratio_report(tv, disjoint, pre, m, batch, "disjoint"))
    return out


# -- disentanglement heatmap -----------------------------------------------------------


@dataclass
class HeatmapReport:
    cells: list
    layer: int

    @property
    def K(self) -> int:
        return len(self.cells)

    def to_csv(self) -> str:
        return _write_csv(
            ["layer", "task_i", "task_j", "increase"],
            [[self.layer, i, j, repr(v)] for i, row in enumerate(self.cells) for j, v in enumerate(row)],
        )

    @classmethod
    def from_csv(cls, text: str) -> "HeatmapReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        K = int(round(np.sqrt(len(rows))))
        cells = [[0.0] * K for _ in range(K)]
        for r in rows:
            cells[int(r["task_i"])][int(r["task_j"])] = float(r["increase"])
        return cls(cells, int(rows[0]["layer"]) if rows else 0)

    def to_json(self) -> str:
        return json.dumps({"layer": self.layer, "cells": self.cells}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "HeatmapReport":
        d = json.loads(text)
        return cls(d["cells"], d["layer"])

    def save(self, path):
        _save(self.to_csv() if str(path).endswith(".csv") else self.to_json(), path)


def disentanglement_heatmap(
    merged_tv: TaskVector,
    specialist_tvs: Sequence[TaskVector],
    pre: ModelWeights,
    m: ModelManifest,
    task_batches: Sequence,
    layer: int,
) -> HeatmapReport:
    """Cell ``[i][j]``: growth of the layer's L1 task-feature norm on task ``i``
    inputs when the merged layer is swapped for task ``j``'s delta.

    ``merged_tv`` is applied at unit scale, so pass it already scaled.
    """
    if not 0 <= layer < m.L:
        raise ValueError(f"layer {layer} outside [0, {m.L})")
    merged = recompose(pre, merged_tv, 1.0)
    swapped = [recompose(pre, merged_tv.replace_layers({layer: tv[layer]}), 1.0) for tv in specialist_tvs]
    cells = []
    for batch in task_batches:
        x = _inputs(batch)
        base = np.abs(task_feature(pre, merged, m, x).per_layer[layer]).sum(axis=1)
        row = []
        for w in swapped:
            alt = np.abs(task_feature(pre, w, m, x).per_layer[layer]).sum(axis=1)
            row.append(float(np.mean(alt - base)))
        cells.append(row)
    return HeatmapReport(cells, int(layer))


# -- calibration coefficients ------------------------------------------------------------


@dataclass
class CoefficientReport:
    """Per-layer weight/feature coefficient pairs and per-dataset feature spread."""

    rows: list
    spread: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        out = _write_csv(
            ["layer", "xi_weight", "xi_feature", "gap"],
            [[r["layer"], repr(r["xi_weight"]), repr(r["xi_feature"]), repr(r["gap"])] for r in self.rows],
        )
        return out

    def spread_csv(self) -> str:
        rows = []
        for name, s in self.spread.items():
            for l in range(len(s["min"])):
                rows.append([name, l, repr(s["min"][l]), repr(s["max"][l]), repr(s["std"][l])])
        return _write_csv(["dataset", "layer", "min", "max", "std"], rows)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "spread": self.spread}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CoefficientReport":
        d = json.loads(text)
        return cls(d["rows"], d["spread"])


def xi_samples(specialist_tv: TaskVector, merged: ModelWeights, pre: ModelWeights, m: ModelManifest, x) -> np.ndarray:
    """Ungated single-input feature coefficients, shape ``[n_inputs, L]``."""
    ratios, degenerate = feature_ratios(specialist_tv, merged, pre, m, _inputs(x))
    return np.where(degenerate, 1.0, ratios)


def dataset_spread(samples: dict) -> dict:
    """Per dataset and layer: min, max and population std of repeated estimates."""
    out = {}
    for name, s in samples.items():
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        out[name] = {
            "min": s.min(axis=0).tolist(),
            "max": s.max(axis=0).tolist(),
            "std": s.std(axis=0).tolist(),
            "mean": s.mean(axis=0).tolist(),
        }
    return out


def spread_ratio(samples: dict) -> float:
    """Mean within-dataset std divided by the std of the per-dataset means.

    Small values mean repeated estimates agree within a dataset while
    datasets differ from each other.
    """
    arrs = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in samples.values()]
    within = np.mean([a.std(axis=0).mean() for a in arrs])
    across = np.stack([a.mean(axis=0) for a in arrs]).std(axis=0).mean()
    return float(within / across) if across > 0 else float("inf")


def coefficient_comparison(plan: CalibrationPlan, samples: Optional[dict] = None) -> CoefficientReport:
    """Pair each layer's weight and feature coefficients.

    ``samples`` optionally maps a dataset name to repeated per-input
    coefficient estimates (see :func:`xi_samples`) for the spread table.
    """
    if plan.xi_weight is None or plan.xi_feature is None:
        raise ValueError("coefficient comparison needs both weight and feature coefficients")
    rows = [
        {"layer": l, "xi_weight": float(w), "xi_feature": float(f), "gap": float(f - w)}
        for l, (w, f) in enumerate(zip(plan.xi_weight, plan.xi_feature))
    ]
    return CoefficientReport(rows, dataset_spread(samples) if samples else {})


def target_enhancement(
    merged: ModelWeights,
    specialist_k,
    pre: ModelWeights,
    m: ModelManifest,
    batch_k,
    A=frozenset(),
    gating: bool = True,
) -> CalibrationPlan:
    """Feature coefficients aimed at one task: no averaging over tasks."""
    if isinstance(specialist_k, ModelWeights):
        specialist_k = task_vector(pre, specialist_k, m)
    return fsc_coefficients([(specialist_k, batch_k)], merged, pre, m, A, gating=gating)
