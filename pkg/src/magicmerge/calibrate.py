"""Layer-wise magnitude calibration of merged models.

Three variants share one coefficient-per-layer form ``delta_hat = xi * delta``:

* weight space: rescale each layer of the merged task vector so it lands on
  the hyperellipsoid whose principal axes are the specialists' task vectors;
* feature space: rescale each layer's task feature by the mean ratio of
  specialist to merged task-feature norms on a few unlabeled samples;
* dual space: weight space first, then feature space on the result.

Coefficients pass through a conservative gate: a layer in the
magnitude-sensitive set may only shrink, any other layer may only grow.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import ModelManifest, ModelWeights
from .errors import DegenerateFeature, DegenerateInput, ShapeMismatch, ZeroAxis, ZeroMerged
from .merge import TaskVector, merge_average, recompose
from .network import (
    FeatureTrace,
    LabeledBatch,
    forward_with_trace,
    layer_forward,
    metric_from_logits,
    performance_metric,
    task_feature,
)

DEFAULT_ALPHA = 10
DEFAULT_EPSILON = 1.1
DEFAULT_LAMBDA = 0.3
DEGENERATE_NORM = 1e-12


# -- sensitivity --------------------------------------------------------------


@dataclass
class SensitivityReport:
    per_layer_s: list
    epsilon: float
    metric_kind: str
    probe_batch_id: str = ""

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "metric_kind": self.metric_kind,
            "probe_batch_id": self.probe_batch_id,
            "per_layer_s": list(self.per_layer_s),
        }


def layer_sensitivity(
    tv: TaskVector,
    pre: ModelWeights,
    m: ModelManifest,
    probe: LabeledBatch,
    epsilon: float = DEFAULT_EPSILON,
    metric: str = "neg_entropy",
    lam: float = 1.0,
) -> SensitivityReport:
    """Change in ``metric`` when one layer's task vector is multiplied by ``epsilon``.

    ``s[l] = P(pre + lam * tv with layer l scaled) - P(pre + lam * tv)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    base = performance_metric(recompose(pre, tv, lam), m, probe, metric)
    s = []
    for l in tv.layers:
        coefs = {j: 1.0 for j in tv.layers}
        coefs[l] = epsilon
        perturbed = recompose(pre, tv.scale_layers(coefs), lam)
        s.append(performance_metric(perturbed, m, probe, metric) - base)
    return SensitivityReport(s, float(epsilon), metric, probe.task_id)


def select_sensitive_layers(report, alpha: int) -> frozenset:
    """Layers with fewer than ``alpha`` layers ranked below them by sensitivity.

    Lower sensitivity (bigger drop under amplification) ranks first; equal
    values rank by layer index, so exactly ``min(alpha, L)`` layers are chosen.
    """
    s = report.per_layer_s if isinstance(report, SensitivityReport) else list(report)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    chosen = set()
    for l, sl in enumerate(s):
        below = sum(1 for k, sk in enumerate(s) if sk < sl or (sk == sl and k < l))
        if below < alpha:
            chosen.add(l)
    return frozenset(chosen)


def gate(xi: float, layer_in_A: bool) -> float:
    """Keep ``xi`` only when ``(xi > 1) XOR layer_in_A``; otherwise return 1."""
    return xi if (xi > 1.0) != bool(layer_in_A) else 1.0


# -- plan ---------------------------------------------------------------------


@dataclass
class CalibrationPlan:
    num_layers: int
    sensitive_set: frozenset = frozenset()
    alpha: int = 0
    xi_weight: Optional[list] = None
    xi_feature: Optional[list] = None
    raw_xi_weight: Optional[list] = None
    raw_xi_feature: Optional[list] = None
    gated_weight: Optional[list] = None
    gated_feature: Optional[list] = None
    gating: bool = True

    @property
    def gating_applied(self) -> dict:
        return {"weight": self.gated_weight, "feature": self.gated_feature}

    def combine(self, other: "CalibrationPlan") -> "CalibrationPlan":
        """Fill the spaces this plan lacks from ``other``."""
        out = CalibrationPlan(self.num_layers, self.sensitive_set, self.alpha, gating=self.gating)
        for name in ("xi_weight", "raw_xi_weight", "gated_weight", "xi_feature", "raw_xi_feature", "gated_feature"):
            mine = getattr(self, name)
            setattr(out, name, mine if mine is not None else getattr(other, name))
        return out

    def check(self) -> None:
        """Raise ``AssertionError`` if the plan breaks its invariants."""
        assert len(self.sensitive_set) <= max(self.alpha, 0)
        for xi in (self.xi_weight, self.xi_feature):
            if xi is None:
                continue
            assert len(xi) == self.num_layers
            for l, v in enumerate(xi):
                assert v > 0
                if self.gating:
                    assert v == 1.0 or ((v > 1.0) != (l in self.sensitive_set))

    def rows(self) -> list:
        out = []
        for l in range(self.num_layers):
            def pick(xs):
                return None if xs is None else xs[l]

            out.append(
                {
                    "layer": l,
                    "xi_weight": pick(self.xi_weight),
                    "xi_feature": pick(self.xi_feature),
                    "in_A": l in self.sensitive_set,
                    "gated": {"weight": pick(self.gated_weight), "feature": pick(self.gated_feature)},
                    "raw_xi_weight": pick(self.raw_xi_weight),
                    "raw_xi_feature": pick(self.raw_xi_feature),
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "alpha": self.alpha,
            "sensitive_set": sorted(self.sensitive_set),
            "gating": self.gating,
            "layers": self.rows(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationPlan":
        rows = sorted(d["layers"], key=lambda r: r["layer"])

        def column(key, sub=None):
            vals = [r[key] if sub is None else r[key][sub] for r in rows]
            return None if all(v is None for v in vals) else vals

        return cls(
            num_layers=d["num_layers"],
            sensitive_set=frozenset(d["sensitive_set"]),
            alpha=d["alpha"],
            xi_weight=column("xi_weight"),
            xi_feature=column("xi_feature"),
            raw_xi_weight=column("raw_xi_weight"),
            raw_xi_feature=column("raw_xi_feature"),
            gated_weight=column("gated", "weight"),
            gated_feature=column("gated", "feature"),
            gating=d.get("gating", True),
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibrationPlan":
        return cls.from_dict(json.loads(text))


def _gate_all(raw, A, enabled=True):
    if not enabled:
        return list(raw), [False] * len(raw)
    xi = [gate(v, l in A) for l, v in enumerate(raw)]
    return xi, [x != r for x, r in zip(xi, raw)]


# -- feature space --------------------------------------------------------------


def feature_ratios(
    specialist_tv: TaskVector,
    merged: ModelWeights,
    pre: ModelWeights,
    m: ModelManifest,
    x,
) -> tuple:
    """Per-sample, per-layer ``||dh_k|| / ||dh_merge||`` on inputs ``x``.

    Returns ``(ratios, degenerate)`` where both have shape ``[n_samples, L]``
    and ``degenerate`` flags merged task features below the numerical floor.
    """
    specialist = recompose(pre, specialist_tv, 1.0)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dk = task_feature(pre, specialist, m, x).per_layer
    dm = task_feature(pre, merged, m, x).per_layer
    num = np.stack([np.linalg.norm(a, axis=1) for a in dk], axis=1)
    den = np.stack([np.linalg.norm(a, axis=1) for a in dm], axis=1)
    degenerate = den < DEGENERATE_NORM
    ratios = np.divide(num, den, out=np.ones_like(num), where=~degenerate)
    return ratios, degenerate


def fsc_coefficients(
    specialists: Sequence,
    merged: ModelWeights,
    pre: ModelWeights,
    m: ModelManifest,
    A=frozenset(),
    alpha: Optional[int] = None,
    gating: bool = True,
) -> CalibrationPlan:
    """Feature-space coefficients from ``(task_vector, batch)`` pairs, one per task.

    Each task contributes the mean of its per-sample norm ratios; the layer
    coefficient is the mean over tasks, then gated against ``A``.
    """
    if not specialists:
        raise ValueError("need at least one specialist")
    per_task = []
    dead = np.zeros(m.L, dtype=bool)
    for tv, batch in specialists:
        x = batch.inputs if isinstance(batch, LabeledBatch) else batch
        ratios, degenerate = feature_ratios(tv, merged, pre, m, x)
        per_task.append(ratios.mean(axis=0))
        dead |= degenerate.any(axis=0)
    raw = np.mean(per_task, axis=0)
    for l in np.flatnonzero(dead):
        warnings.warn(
            f"layer {l}: merged task feature norm below {DEGENERATE_NORM}; left uncalibrated",
            DegenerateFeature,
            stacklevel=2,
        )
        raw[l] = 1.0
    raw = [float(v) for v in raw]
    A = frozenset(A)
    xi, gated = _gate_all(raw, A, gating)
    return CalibrationPlan(
        m.L,
        A,
        len(A) if alpha is None else alpha,
        xi_feature=xi,
        raw_xi_feature=raw,
        gated_feature=gated,
        gating=gating,
    )


def forward_fsc(
    pre: ModelWeights, merged: ModelWeights, m: ModelManifest, plan: CalibrationPlan, x
) -> FeatureTrace:
    """Forward pass with feature-space coefficients integrated.

    One calibrated stream: each layer runs both the pretrained and the merged
    parameters on the calibrated incoming activation and emits
    ``h_pre + xi * (h_merge - h_pre)``.
    """
    if plan.xi_feature is None:
        raise ValueError("plan carries no feature-space coefficients")
    if len(plan.xi_feature) != m.L:
        raise ShapeMismatch(f"plan has {len(plan.xi_feature)} coefficients for {m.L} layers")
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != m.input_dim:
        raise ShapeMismatch(f"inputs have {a.shape[1]} features, manifest expects {m.input_dim}")
    per_layer = []
    for layer, xi in zip(m.layers, plan.xi_feature):
        h_mrg = layer_forward(merged, layer, a)
        if xi == 1.0:
            a = h_mrg
        else:
            h_pre = layer_forward(pre, layer, a)
            a = h_pre + xi * (h_mrg - h_pre)
        per_layer.append(a)
    if squeeze:
        per_layer = [p[0] for p in per_layer]
    return FeatureTrace(per_layer, per_layer[-1])


def calibrated_logits(pre, weights, m, plan, x) -> np.ndarray:
    """Logits of a (possibly) calibrated model; plain forward when no feature plan is attached."""
    if plan is not None and plan.xi_feature is not None:
        return forward_fsc(pre, weights, m, plan, x).logits
    return forward_with_trace(weights, m, x).logits


def calibrated_metric(pre, weights, m, plan, batch: LabeledBatch, kind="accuracy") -> float:
    return metric_from_logits(calibrated_logits(pre, weights, m, plan, batch.inputs), batch.labels, kind, batch.head)


# -- weight space ---------------------------------------------------------------


def _ellipsoid_terms(merged_layer, task_layers):
    v = np.asarray(merged_layer, dtype=np.float64).ravel()
    axes = [np.asarray(t, dtype=np.float64).ravel() for t in task_layers]
    if not axes:
        raise ValueError("need at least one task layer")
    for a in axes:
        if a.shape != v.shape:
            raise ShapeMismatch(f"task layer shape {a.shape} != merged layer shape {v.shape}")
    sq = [float(np.dot(a, a)) for a in axes]
    if any(s == 0.0 for s in sq):
        raise ZeroAxis("a task vector layer is zero")
    coefs = [float(np.dot(v, a)) / s for a, s in zip(axes, sq)]
    residual = v - sum(c * a for c, a in zip(coefs, axes))
    m_bar = float(np.mean(np.sqrt(sq)))
    # ||proj_k||^2 / ||axis_k||^2 equals coef_k^2
    axial = sum(c * c for c in coefs)
    return axial, float(np.dot(residual, residual)) / (m_bar * m_bar)


def hyperellipsoid_value(merged_layer, task_layers) -> float:
    """Left-hand side of the weight-space constraint for ``merged_layer``; 1 means on the ellipsoid."""
    axial, radial = _ellipsoid_terms(merged_layer, task_layers)
    return axial + radial


def wsc_coefficient(merged_layer, task_layers) -> float:
    """Scale that places ``merged_layer`` on the task-vector hyperellipsoid."""
    S = hyperellipsoid_value(merged_layer, task_layers)
    if S == 0.0:
        warnings.warn("merged layer is zero; weight-space coefficient set to 1", ZeroMerged, stacklevel=2)
        return 1.0
    return float(1.0 / np.sqrt(S))


def apply_wsc(
    merged_tv: TaskVector,
    specialist_tvs: Sequence[TaskVector],
    A=frozenset(),
    alpha: Optional[int] = None,
    gating: bool = True,
):
    """Rescale each layer of the (already lambda-scaled) merged task vector.

    Returns ``(calibrated_task_vector, plan)``.
    """
    for tv in specialist_tvs:
        if tv.base_fingerprint != merged_tv.base_fingerprint:
            from .errors import BaseMismatch

            raise BaseMismatch("specialist and merged task vectors use different bases")
    raw = [wsc_coefficient(merged_tv[l], [tv[l] for tv in specialist_tvs]) for l in merged_tv.layers]
    A = frozenset(A)
    xi, gated = _gate_all(raw, A, gating)
    plan = CalibrationPlan(
        len(raw),
        A,
        len(A) if alpha is None else alpha,
        xi_weight=xi,
        raw_xi_weight=raw,
        gated_weight=gated,
        gating=gating,
    )
    coefs = {l: xi[i] for i, l in enumerate(merged_tv.layers)}
    return merged_tv.scale_layers(coefs), plan


# -- dual space -----------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: int = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    lam: float = DEFAULT_LAMBDA
    metric: str = "neg_entropy"
    gating: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


def sensitive_set_from_average(
    pre: ModelWeights,
    specialist_tvs: Sequence[TaskVector],
    probe: LabeledBatch,
    cfg: CalibrationConfig,
):
    """Magnitude-sensitive layers of the weight-averaged merge, measured on ``probe``."""
    if cfg.alpha == 0:
        return frozenset(), None
    avg = merge_average(specialist_tvs)
    report = layer_sensitivity(avg, pre, avg.manifest, probe, cfg.epsilon, cfg.metric, lam=1.0)
    return select_sensitive_layers(report, cfg.alpha), report


def apply_dsc(
    pre: ModelWeights,
    merged_tv: TaskVector,
    specialist_tvs: Sequence[TaskVector],
    specialist_batches: Sequence,
    probe: LabeledBatch,
    cfg: CalibrationConfig = CalibrationConfig(),
):
    """Sensitivity selection, then weight-space, then feature-space calibration.

    ``merged_tv`` is the unscaled output of a merge operator; ``cfg.lam`` turns
    it into the merged model's task vector.  The feature coefficients are
    estimated on the weight-calibrated model.  Returns the weight-calibrated
    checkpoint and a plan holding both spaces; evaluate it with
    :func:`forward_fsc` (or :func:`calibrated_logits`).
    """
    if len(probe) == 0:
        raise ValueError("probe batch is empty")
    m = merged_tv.manifest
    A, _ = sensitive_set_from_average(pre, specialist_tvs, probe, cfg)
    wsc_tv, wplan = apply_wsc(merged_tv.scale(cfg.lam), specialist_tvs, A, cfg.alpha, cfg.gating)
    weights = recompose(pre, wsc_tv, 1.0)
    fplan = fsc_coefficients(list(zip(specialist_tvs, specialist_batches)), weights, pre, m, A, cfg.alpha, cfg.gating)
    return weights, wplan.combine(fplan)


def calibrate(
    mode: str,
    pre: ModelWeights,
    merged_tv: TaskVector,
    specialist_tvs: Sequence[TaskVector],
    specialist_batches: Optional[Sequence] = None,
    probe: Optional[LabeledBatch] = None,
    cfg: CalibrationConfig = CalibrationConfig(),
):
    """Run one calibration mode (``none``, ``wsc``, ``fsc``, ``dsc``).

    Returns ``(weights, plan)``; ``plan`` is ``None`` for ``none``.  Feature
    batches are whatever the caller supplies, so task-agnostic calibration is
    ``dsc`` fed with task-agnostic batches.
    """
    m = merged_tv.manifest
    if mode == "none":
        return recompose(pre, merged_tv, cfg.lam), None
    if mode == "dsc":
        return apply_dsc(pre, merged_tv, specialist_tvs, specialist_batches, probe, cfg)
    A = frozenset()
    if probe is not None:
        A, _ = sensitive_set_from_average(pre, specialist_tvs, probe, cfg)
    if mode == "wsc":
        wsc_tv, plan = apply_wsc(merged_tv.scale(cfg.lam), specialist_tvs, A, cfg.alpha, cfg.gating)
        return recompose(pre, wsc_tv, 1.0), plan
    if mode == "fsc":
        weights = recompose(pre, merged_tv, cfg.lam)
        plan = fsc_coefficients(list(zip(specialist_tvs, specialist_batches)), weights, pre, m, A, cfg.alpha, cfg.gating)
        return weights, plan
    raise ValueError(f"unknown calibration mode {mode!r}")


# -- closed form ------------------------------------------------------------------


def optimal_scale_closed_form(dh_k, eta: float, eps_vec) -> float:
    """Minimiser over ``xi`` of ``||xi * (eta * dh_k + eps_vec) - dh_k||^2``.

    With a residual orthogonal to ``dh_k`` this reduces to
    ``eta ||dh_k||^2 / (eta^2 ||dh_k||^2 + ||eps_vec||^2)``, and to ``1 / eta``
    as the residual vanishes.
    """
    d = np.asarray(dh_k, dtype=np.float64).ravel()
    e = np.asarray(eps_vec, dtype=np.float64).ravel()
    if d.shape != e.shape:
        raise ShapeMismatch("dh_k and eps_vec must have the same shape")
    dd = float(np.dot(d, d))
    ee = float(np.dot(e, e))
    if dd == 0.0 and ee == 0.0:
        raise DegenerateInput("both the task feature and the residual are zero")
    de = float(np.dot(d, e))
    denom = eta * eta * dd + 2.0 * eta * de + ee
    if denom == 0.0:
        # merged feature eta * dh_k + eps_vec is exactly zero; no scale helps
        raise DegenerateInput("merged task feature is zero")
    return (eta * dd + de) / denom
