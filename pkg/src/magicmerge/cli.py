"""``magic`` command line: merge, calibrate, sensitivity, diagnose, bench, inspect.

A JSON config names the checkpoints and hyperparameters; flags override
config keys.  Relative paths in a config resolve against the config file's
directory.  Every run prints the resolved config first, and refuses to
overwrite existing outputs unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .calibrate import (
    DEFAULT_ALPHA,
    DEFAULT_EPSILON,
    DEFAULT_LAMBDA,
    CalibrationConfig,
    calibrate,
    layer_sensitivity,
    select_sensitive_layers,
)
from .checkpoint import ModelWeights, load_manifest, load_safetensors, save_safetensors
from .errors import MagicError, MissingRequired, OutOfRange, UnknownKey
from .merge import METHODS, MergeConfig, effective_lambda, merge, merge_average, recompose, task_vector
from .network import METRICS, LabeledBatch, load_batch

CALIBRATION_MODES = ("none", "wsc", "fsc", "dsc", "dsc-a")
REQUIRED = ("pretrained", "specialists", "manifest")
# config keys whose values are paths, resolved against the config file
_PATH_KEYS = ("pretrained", "manifest", "probe", "out")
_PATH_LIST_KEYS = ("specialists", "calibration_samples")
# JSON spelling -> field name
_ALIASES = {"lambda": "lam"}


@dataclass
class PipelineConfig:
    pretrained: str
    specialists: list
    manifest: str
    method: str = "task_arithmetic"
    lam: float = DEFAULT_LAMBDA
    ties_keep_fraction: float = 0.2
    dare_drop_prob: float = 0.9
    calibration: str = "dsc"
    alpha: int = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    metric: str = "neg_entropy"
    probe: Optional[str] = None
    calibration_samples: list = field(default_factory=list)
    out: Optional[str] = None
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.method not in METHODS:
            raise OutOfRange(f"method must be one of {METHODS}, got {self.method!r}")
        if self.calibration not in CALIBRATION_MODES:
            raise OutOfRange(f"calibration must be one of {CALIBRATION_MODES}, got {self.calibration!r}")
        if self.metric not in METRICS:
            raise OutOfRange(f"metric must be one of {METRICS}, got {self.metric!r}")
        if isinstance(self.alpha, bool) or int(self.alpha) != self.alpha or self.alpha < 0:
            raise OutOfRange(f"alpha must be a non-negative integer, got {self.alpha!r}")
        self.alpha = int(self.alpha)
        if not self.lam > 0:
            raise OutOfRange(f"lambda must be positive, got {self.lam}")
        if not self.epsilon > 0:
            raise OutOfRange(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.ties_keep_fraction <= 1:
            raise OutOfRange(f"ties_keep_fraction must lie in (0, 1], got {self.ties_keep_fraction}")
        if not 0 <= self.dare_drop_prob < 1:
            raise OutOfRange(f"dare_drop_prob must lie in [0, 1), got {self.dare_drop_prob}")
        if not self.specialists:
            raise MissingRequired("specialists must list at least one checkpoint")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def merge_config(self) -> MergeConfig:
        return MergeConfig(self.method, self.lam, self.ties_keep_fraction, self.dare_drop_prob, self.seed)

    def calibration_config(self) -> CalibrationConfig:
        lam = effective_lambda(self.merge_config())
        return CalibrationConfig(self.alpha, self.epsilon, lam, self.metric)


def config_from_dict(d: dict, base_dir=None) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    kw = {}
    for key, value in d.items():
        name = _ALIASES.get(key, key)
        if name not in known or key == "lam":
            raise UnknownKey(f"unknown config key {key!r}")
        kw[name] = value
    missing = [k for k in REQUIRED if k not in kw]
    if missing:
        raise MissingRequired(f"config is missing required key(s): {', '.join(missing)}")
    if base_dir is not None:
        base = Path(base_dir)
        for k in _PATH_KEYS:
            if kw.get(k) is not None:
                kw[k] = str(base / kw[k])
        for k in _PATH_LIST_KEYS:
            if kw.get(k):
                kw[k] = [str(base / p) for p in kw[k]]
    if isinstance(kw.get("specialists"), str):
        kw["specialists"] = [kw["specialists"]]
    return PipelineConfig(**kw).validate()


def parse_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise OutOfRange("config file must hold a JSON object")
    return config_from_dict(d, Path(path).parent)


# -- helpers ------------------------------------------------------------------------


class OutputExists(MagicError, FileExistsError):
    pass


def _print_config(d: dict, out) -> None:
    print("resolved config:", file=out)
    print(json.dumps(d, indent=2, sort_keys=True, default=str), file=out)


def _out_dir(path, names, force) -> Path:
    if path is None:
        raise MissingRequired("no output directory: pass --out or set 'out' in the config")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not force:
        clash = [n for n in names if (p / n).exists()]
        if clash:
            raise OutputExists(f"{', '.join(clash)} already exist in {p}; use --force to overwrite")
    return p


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_models(cfg: PipelineConfig):
    pre = load_safetensors(cfg.pretrained)
    m = load_manifest(cfg.manifest, pre)
    tvs = [task_vector(pre, load_safetensors(p), m) for p in cfg.specialists]
    return pre, m, tvs


def _probe(cfg: PipelineConfig) -> LabeledBatch:
    if not cfg.probe:
        raise MissingRequired("this command needs a 'probe' batch")
    return load_batch(cfg.probe)


def _feature_batches(cfg: PipelineConfig, mode: str, K: int, per_slot: int = 16):
    if mode == "dsc-a":
        probe = _probe(cfg).inputs
        return [
            LabeledBatch(probe[np.arange(k * per_slot, (k + 1) * per_slot) % len(probe)], None, f"agnostic{k}")
            for k in range(K)
        ]
    if len(cfg.calibration_samples) != K:
        raise MissingRequired(
            f"feature calibration needs one calibration sample file per specialist ({K}), "
            f"got {len(cfg.calibration_samples)}"
        )
    return [load_batch(p) for p in cfg.calibration_samples]


def _override(cfg: PipelineConfig, args) -> PipelineConfig:
    updates = {}
    for name in ("method", "alpha", "epsilon", "out", "seed", "probe", "metric"):
        v = getattr(args, name, None)
        if v is not None:
            updates[name] = v
    if getattr(args, "lam", None) is not None:
        updates["lam"] = args.lam
    if getattr(args, "mode", None) is not None:
        updates["calibration"] = args.mode
    return replace(cfg, **updates).validate()


# -- subcommands ---------------------------------------------------------------------


def cmd_merge(args, out) -> int:
    cfg = _override(parse_config(args.config), args)
    _print_config(cfg.to_dict(), out)
    odir = _out_dir(cfg.out, ["merged.safetensors"], args.force)
    pre, m, tvs = _load_models(cfg)
    mcfg = cfg.merge_config()
    merged = recompose(pre, merge(tvs, mcfg), effective_lambda(mcfg))
    merged.metadata.update({"method": cfg.method, "lambda": str(effective_lambda(mcfg))})
    save_safetensors(merged, odir / "merged.safetensors")
    print(f"wrote {odir / 'merged.safetensors'}", file=out)
    return 0


def cmd_calibrate(args, out) -> int:
    cfg = _override(parse_config(args.config), args)
    _print_config(cfg.to_dict(), out)
    odir = _out_dir(cfg.out, ["calibrated.safetensors", "plan.json"], args.force)
    pre, m, tvs = _load_models(cfg)
    mode = cfg.calibration
    ccfg = cfg.calibration_config()
    probe = _probe(cfg) if mode in ("dsc", "dsc-a") or (mode != "none" and cfg.probe) else None
    batches = _feature_batches(cfg, mode, len(tvs)) if mode in ("fsc", "dsc", "dsc-a") else None
    core = "dsc" if mode == "dsc-a" else mode
    weights, plan = calibrate(core, pre, merge(tvs, cfg.merge_config()), tvs, batches, probe, ccfg)
    weights.metadata.update({"method": cfg.method, "calibration": mode})
    save_safetensors(weights, odir / "calibrated.safetensors")
    _write_text(odir / "plan.json", (plan.to_json() if plan is not None else "null") + "\n")
    print(f"wrote {odir / 'calibrated.safetensors'} and {odir / 'plan.json'}", file=out)
    if plan is not None:
        print(f"sensitive layers: {sorted(plan.sensitive_set)}", file=out)
    return 0


def cmd_sensitivity(args, out) -> int:
    cfg = _override(parse_config(args.config), args)
    _print_config(cfg.to_dict(), out)
    odir = _out_dir(cfg.out, ["sensitivity.json", "sensitivity.csv"], args.force)
    pre, m, tvs = _load_models(cfg)
    probe = _probe(cfg)
    avg = merge_average(tvs)
    report = layer_sensitivity(avg, pre, m, probe, cfg.epsilon, cfg.metric, lam=1.0)
    A = select_sensitive_layers(report, min(cfg.alpha, m.L))
    d = report.to_dict()
    d["sensitive_set"] = sorted(A)
    _write_text(odir / "sensitivity.json", json.dumps(d, indent=2) + "\n")
    lines = ["layer,s,in_A"] + [f"{l},{s!r},{int(l in A)}" for l, s in enumerate(report.per_layer_s)]
    _write_text(odir / "sensitivity.csv", "\n".join(lines) + "\n")
    print(f"sensitive layers: {sorted(A)}", file=out)
    return 0


def cmd_diagnose(args, out) -> int:
    from .diagnostics import (
        coefficient_comparison,
        disentanglement_heatmap,
        operation_reports,
        xi_samples,
    )

    cfg = _override(parse_config(args.config), args)
    _print_config(cfg.to_dict(), out)
    names = ["ratios.csv", "heatmap.csv", "coefficients.csv", "coefficient_spread.csv"]
    odir = _out_dir(cfg.out, names, args.force)
    pre, m, tvs = _load_models(cfg)
    batches = _feature_batches(cfg, "fsc", len(tvs))
    lam = effective_lambda(cfg.merge_config())
    merged_tv = merge(tvs, cfg.merge_config()).scale(lam)

    reports = operation_reports(tvs, pre, m, batches, lam=cfg.lam, keep_fraction=cfg.ties_keep_fraction)
    lines = ["task,layer,weight_ratio,feature_ratio,operation_name"]
    for op, per_task in reports.items():
        for k, rep in enumerate(per_task):
            lines += [f"{k},{r['layer']},{r['weight_ratio']!r},{r['feature_ratio']!r},{op}" for r in rep.rows]
    _write_text(odir / "ratios.csv", "\n".join(lines) + "\n")

    heat = ["layer,task_i,task_j,increase"]
    for l in range(m.L):
        h = disentanglement_heatmap(merged_tv, tvs, pre, m, batches, l)
        heat += h.to_csv().splitlines()[1:]
    _write_text(odir / "heatmap.csv", "\n".join(heat) + "\n")

    probe = _probe(cfg) if cfg.probe else None
    core = "dsc" if probe is not None else "fsc"
    weights, plan = calibrate(core, pre, merge(tvs, cfg.merge_config()), tvs, batches, probe, cfg.calibration_config())
    if plan.xi_weight is None:
        plan = replace(plan, xi_weight=[1.0] * m.L)
    samples = {f"task{k}": xi_samples(tv, weights, pre, m, b) for k, (tv, b) in enumerate(zip(tvs, batches))}
    rep = coefficient_comparison(plan, samples)
    _write_text(odir / "coefficients.csv", rep.to_csv())
    _write_text(odir / "coefficient_spread.csv", rep.spread_csv())
    print(f"wrote {', '.join(names)} to {odir}", file=out)
    return 0


def cmd_bench(args, out) -> int:
    from .bench import BenchmarkSpec, CALIBRATIONS, combo_sweep, make_synthetic_tasks, run_benchmark

    spec = BenchmarkSpec.load(args.spec) if args.spec else BenchmarkSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    ccfg = CalibrationConfig(alpha=args.alpha if args.alpha is not None else DEFAULT_ALPHA)
    resolved = {
        "spec": spec.to_dict(),
        "method": args.method,
        "calibration": args.calibration,
        "alpha": ccfg.alpha,
        "epsilon": ccfg.epsilon,
        "lambda": ccfg.lam,
        "sweep": args.sweep,
        "lam_mode": args.lam_mode,
    }
    _print_config(resolved, out)
    names = ["results.json", "results.csv"] + (["sweep.json", "sweep.csv"] if args.sweep else [])
    odir = _out_dir(args.out, names, args.force)
    setup = make_synthetic_tasks(spec)
    results = {c: run_benchmark(setup, args.method, c, cfg=ccfg) for c in CALIBRATIONS}
    _write_text(
        odir / "results.json",
        json.dumps({"spec": spec.to_dict(), "results": {c: r.to_dict() for c, r in results.items()}}, indent=2) + "\n",
    )
    lines = ["calibration,task,accuracy"]
    for c, r in results.items():
        lines += [f"{c},{t},{a!r}" for t, a in r.per_task.items()] + [f"{c},mean,{r.mean!r}"]
    _write_text(odir / "results.csv", "\n".join(lines) + "\n")
    for c, r in results.items():
        print(f"{c:>6}: mean accuracy {r.mean:.4f}", file=out)
    if args.sweep:
        sw = combo_sweep(setup, args.method, args.calibration, lam_mode=args.lam_mode, cfg=ccfg)
        _write_text(odir / "sweep.json", json.dumps(sw.to_dict(), indent=2) + "\n")
        sw.to_csv(odir / "sweep.csv")
        print(f"sweep over {len(sw.rows)} subsets: t = {sw.t_statistic:.3f}, p = {sw.p_value:.3g}", file=out)
    return 0


def cmd_inspect(args, out) -> int:
    w = load_safetensors(args.checkpoint)
    _print_config({"checkpoint": args.checkpoint}, out)
    if w.metadata:
        print("metadata:", json.dumps(w.metadata, sort_keys=True), file=out)
    width = max((len(n) for n in w.tensors), default=4)
    for name in w.names():
        t = w[name]
        norm = float(np.linalg.norm(np.asarray(t, dtype=np.float64)))
        print(f"{name:<{width}}  {str(list(t.shape)):<14} l2={norm:.6g}", file=out)
    return 0


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magic", description="Merge fine-tuned MLPs and calibrate their magnitudes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def pipeline(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--alpha", type=int)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--metric", choices=METRICS)
        sp.add_argument("--probe")
        sp.add_argument("--seed", type=int)
        return sp

    pipeline("merge", "merge specialists into one checkpoint").set_defaults(func=cmd_merge)
    sp = pipeline("calibrate", "merge, then calibrate magnitudes")
    sp.add_argument("--mode", choices=CALIBRATION_MODES)
    sp.set_defaults(func=cmd_calibrate)
    pipeline("sensitivity", "per-layer sensitivity of the weight-averaged merge").set_defaults(func=cmd_sensitivity)
    pipeline("diagnose", "magnitude ratios, heatmaps and coefficient reports").set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("bench", help="run the synthetic benchmark")
    sp.add_argument("--spec", help="benchmark spec JSON (defaults used when omitted)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--sweep", action="store_true", help="also sweep every subset of specialists")
    sp.add_argument("--method", choices=METHODS, default="task_arithmetic")
    sp.add_argument("--calibration", choices=("wsc", "fsc", "dsc", "dsc_a"), default="dsc")
    sp.add_argument("--lam-mode", choices=("fixed", "normalised"), default="fixed")
    sp.add_argument("--alpha", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("inspect", help="list tensor names, shapes and norms")
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except (MagicError, OSError, json.JSONDecodeError) as exc:
        print(f"magic {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
