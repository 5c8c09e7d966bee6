"""Synthetic multi-task benchmark.

Every task is a Gaussian-cluster classification problem in a shared input
space: the class means of task ``k`` sit around a task-specific centre, in a
task-specific random orientation.  A small MLP is pretrained briefly on the
pooled data, then one specialist per task is fine-tuned from it.

By default each task owns a slice of ``num_classes`` output logits and is
scored only on that slice, the way a shared backbone carries one head per
dataset.  The hidden layers are shared, so task vectors still conflict there.
"""

from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .calibrate import CalibrationConfig, CalibrationPlan, calibrate, calibrated_metric
from .checkpoint import ModelManifest, ModelWeights, mlp_manifest
from .merge import MergeConfig, TaskVector, effective_lambda, fingerprint, merge, task_vector
from .network import LabeledBatch, init_mlp, metric_from_logits, performance_metric, train_specialist

CALIBRATIONS = ("none", "wsc", "fsc", "dsc", "dsc_a")


@dataclass(frozen=True)
class BenchmarkSpec:
    K: int = 4
    input_dim: int = 16
    num_classes: int = 4
    samples_per_task: int = 500
    hidden: tuple = (32, 32)
    seed: int = 0
    epochs: int = 200
    lr: float = 0.1
    batch_size: int = 64
    activation: str = "relu"
    pretrain_epochs: int = 3
    pretrain_lr: float = 0.05
    test_samples: int = 500
    calib_samples: int = 32
    probe_samples: int = 256
    task_spread: float = 6.0
    class_spread: float = 1.5
    noise: float = 1.0
    separate_heads: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown benchmark keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def deep_spec(seed: int = 0, **overrides) -> BenchmarkSpec:
    """Thirteen-layer variant used for the end-to-end calibration checks.

    With only three layers, the default sensitive-set size of 10 covers the
    whole network and no layer can ever be amplified.  Fine-tuning is gentler
    so the deeper specialists stay close to the pretrained weights.
    """
    kw = dict(hidden=(32,) * 12, epochs=50, lr=0.02, seed=seed)
    kw.update(overrides)
    return BenchmarkSpec(**kw)


@dataclass
class SyntheticTask:
    task_id: str
    specialist: ModelWeights
    train: LabeledBatch
    test: LabeledBatch
    calib: LabeledBatch


@dataclass
class SyntheticSetup:
    spec: BenchmarkSpec
    manifest: ModelManifest
    pretrained: ModelWeights
    tasks: list
    probe: LabeledBatch
    _tvs: Optional[list] = field(default=None, repr=False)

    def __iter__(self):
        # unpacks as (pretrained, [(specialist, train, test), ...])
        yield self.pretrained
        yield [(t.specialist, t.train, t.test) for t in self.tasks]

    @property
    def task_vectors(self) -> list:
        if self._tvs is None:
            self._tvs = [task_vector(self.pretrained, t.specialist, self.manifest) for t in self.tasks]
        return self._tvs


def _task_geometry(spec: BenchmarkSpec, rng):
    tasks = []
    for _ in range(spec.K):
        centre = rng.standard_normal(spec.input_dim)
        centre *= spec.task_spread / np.linalg.norm(centre)
        q, _ = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.input_dim)))
        offsets = rng.standard_normal((spec.num_classes, spec.input_dim)) * spec.class_spread
        tasks.append(centre + offsets @ q.T)
    return tasks


def _sample(means, n, noise, rng, task_id, head):
    labels = rng.integers(0, len(means), size=n)
    x = means[labels] + noise * rng.standard_normal((n, means.shape[1]))
    return LabeledBatch(x.astype(np.float32), labels, task_id, head)


def make_synthetic_tasks(spec: BenchmarkSpec = BenchmarkSpec()) -> SyntheticSetup:
    """Pretrained model plus one fine-tuned specialist and data splits per task.

    Deterministic for a fixed ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    means = _task_geometry(spec, rng)
    data = []
    C = spec.num_classes
    for k, mu in enumerate(means):
        tid = f"task{k}"
        head = (k * C, (k + 1) * C) if spec.separate_heads else None
        data.append(
            (
                _sample(mu, spec.samples_per_task, spec.noise, rng, tid, head),
                _sample(mu, spec.test_samples, spec.noise, rng, tid, head),
                _sample(mu, spec.calib_samples, spec.noise, rng, tid, head).unlabeled(),
            )
        )
    # task-agnostic probe: broad isotropic inputs around the origin covering every task region
    all_x = np.concatenate([d[0].inputs for d in data])
    scale = float(np.sqrt(np.mean(all_x.astype(np.float64) ** 2)))
    probe = LabeledBatch(
        (scale * rng.standard_normal((spec.probe_samples, spec.input_dim))).astype(np.float32),
        None,
        "agnostic",
    )

    outputs = spec.K * C if spec.separate_heads else C
    manifest = mlp_manifest([spec.input_dim, *spec.hidden, outputs], spec.activation)
    base = init_mlp(manifest, seed=spec.seed)
    pooled = [d[0] for d in data]
    pretrained = train_specialist(base, manifest, pooled, spec.pretrain_epochs, spec.pretrain_lr, spec.seed, spec.batch_size)
    fp = fingerprint(pretrained)
    tasks = []
    for k, (train, test, calib) in enumerate(data):
        spec_w = train_specialist(pretrained, manifest, train, spec.epochs, spec.lr, spec.seed * 1000 + k + 1, spec.batch_size)
        spec_w.metadata["base_fingerprint"] = fp
        spec_w.metadata["task_id"] = train.task_id
        tasks.append(SyntheticTask(train.task_id, spec_w, train, test, calib))
    return SyntheticSetup(spec, manifest, pretrained, tasks, probe)


def accuracy(w: ModelWeights, m: ModelManifest, batch: LabeledBatch) -> float:
    return performance_metric(w, m, batch, "accuracy")


@dataclass
class BenchmarkResult:
    method: str
    calibration: str
    tasks: tuple
    per_task: dict
    plan: Optional[CalibrationPlan] = None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_task.values())))

    def to_dict(self):
        return {
            "method": self.method,
            "calibration": self.calibration,
            "tasks": list(self.tasks),
            "per_task": dict(self.per_task),
            "mean": self.mean,
            "plan": None if self.plan is None else self.plan.to_dict(),
        }


def calibration_batches(setup: SyntheticSetup, tasks, calibration: str, n_calib: int = 1, agnostic_per_task: int = 16):
    """Unlabeled inputs used to estimate feature-space coefficients, one batch per task slot."""
    if calibration == "dsc_a":
        probe = setup.probe.inputs
        out = []
        for slot in range(len(tasks)):
            idx = np.arange(slot * agnostic_per_task, (slot + 1) * agnostic_per_task) % len(probe)
            out.append(LabeledBatch(probe[idx], None, f"agnostic{slot}"))
        return out
    return [setup.tasks[k].calib.subset(slice(0, n_calib)) for k in tasks]


def run_benchmark(
    setup: SyntheticSetup,
    method: str = "task_arithmetic",
    calibration: str = "none",
    probe: Optional[LabeledBatch] = None,
    cfg: Optional[CalibrationConfig] = None,
    merge_cfg: Optional[MergeConfig] = None,
    tasks: Optional[Sequence[int]] = None,
    n_calib: int = 1,
    lam: Optional[float] = None,
) -> BenchmarkResult:
    """Merge the chosen specialists, calibrate, and score each task's test split.

    ``lam`` overrides the merge coefficient (defaults: 0.3, or 1 for averaging).
    ``dsc_a`` is dual-space calibration whose feature coefficients come from
    the task-agnostic probe (16 inputs per task slot) instead of task samples.
    """
    if calibration not in CALIBRATIONS:
        raise ValueError(f"unknown calibration {calibration!r}; expected one of {CALIBRATIONS}")
    tasks = tuple(range(len(setup.tasks))) if tasks is None else tuple(tasks)
    merge_cfg = merge_cfg or MergeConfig(method=method)
    if merge_cfg.method != method:
        merge_cfg = MergeConfig(method, merge_cfg.lam, merge_cfg.ties_keep_fraction, merge_cfg.dare_drop_prob, merge_cfg.seed)
    cfg = cfg or CalibrationConfig()
    if lam is None:
        lam = effective_lambda(merge_cfg) if method == "average" else cfg.lam
    cfg = CalibrationConfig(cfg.alpha, cfg.epsilon, lam, cfg.metric, cfg.gating)
    probe = setup.probe if probe is None else probe

    tvs = [setup.task_vectors[k] for k in tasks]
    merged_tv = merge(tvs, merge_cfg)
    mode = "dsc" if calibration == "dsc_a" else calibration
    batches = None
    if mode in ("fsc", "dsc"):
        batches = calibration_batches(setup, tasks, calibration, n_calib)
    weights, plan = calibrate(mode, setup.pretrained, merged_tv, tvs, batches, probe, cfg)
    per_task = {
        setup.tasks[k].task_id: calibrated_metric(setup.pretrained, weights, setup.manifest, plan, setup.tasks[k].test)
        for k in tasks
    }
    return BenchmarkResult(method, calibration, tasks, per_task, plan)


# -- combination sweep --------------------------------------------------------------


def paired_t_test(after: Sequence[float], before: Sequence[float]) -> tuple:
    """Two-sided Student's paired t-test on ``after - before``; returns ``(t, p)``.

    Zero spread with a non-zero mean difference gives ``t = +-inf, p = 0``;
    identical samples give ``t = 0, p = 1``.
    """
    d = np.asarray(after, dtype=np.float64) - np.asarray(before, dtype=np.float64)
    n = d.size
    if n < 2:
        return float("nan"), float("nan")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, mean)), 0.0
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(p)


@dataclass
class SweepResult:
    rows: list
    t_statistic: float
    p_value: float

    @property
    def mean_before(self):
        return float(np.mean([r["before"] for r in self.rows]))

    @property
    def mean_after(self):
        return float(np.mean([r["after"] for r in self.rows]))

    def to_dict(self):
        return {
            "rows": self.rows,
            "t_statistic": self.t_statistic,
            "p_value": self.p_value,
            "mean_before": self.mean_before,
            "mean_after": self.mean_after,
        }

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "method", "lambda", "before", "after"])
            for r in self.rows:
                w.writerow(["+".join(map(str, r["subset"])), r["method"], r["lambda"], r["before"], r["after"]])


def subsets(K: int) -> list:
    return [c for size in range(1, K + 1) for c in itertools.combinations(range(K), size)]


def max_workers() -> int:
    env = os.environ.get("MAGIC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def combo_sweep(
    setup: SyntheticSetup,
    method: str = "task_arithmetic",
    calibration: str = "dsc",
    lam_mode: str = "fixed",
    cfg: Optional[CalibrationConfig] = None,
    workers: Optional[int] = None,
    **kwargs,
) -> SweepResult:
    """Merge every non-empty subset of specialists, before and after calibration.

    ``lam_mode="fixed"`` keeps the configured coefficient for every subset size;
    ``"normalised"`` uses ``1 / |subset|``.  Subsets run concurrently but rows
    come back in subset order, so the result is deterministic.
    """
    if len(setup.tasks) > 8:
        raise ValueError("combination sweep is limited to K <= 8")
    if lam_mode not in ("fixed", "normalised"):
        raise ValueError("lam_mode must be 'fixed' or 'normalised'")
    cfg = cfg or CalibrationConfig()

    def one(sub):
        lam = 1.0 / len(sub) if lam_mode == "normalised" else None
        before = run_benchmark(setup, method, "none", cfg=cfg, tasks=sub, lam=lam, **kwargs)
        after = run_benchmark(setup, method, calibration, cfg=cfg, tasks=sub, lam=lam, **kwargs)
        used = lam if lam is not None else (1.0 if method == "average" else cfg.lam)
        return {"subset": list(sub), "method": method, "lambda": used, "before": before.mean, "after": after.mean}

    setup.task_vectors  # build once before fanning out
    with ThreadPoolExecutor(max_workers=workers or max_workers()) as pool:
        rows = list(pool.map(one, subsets(len(setup.tasks))))
    t, p = paired_t_test([r["after"] for r in rows], [r["before"] for r in rows])
    return SweepResult(rows, t, p)
