"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed together at the end of the pytest run (see conftest.py).
End-to-end criteria run on the default benchmark exactly as stated; the same
checks on the thirteen-layer ``deep_spec`` are reported as info lines only.
"""

import functools
import math

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE, INFO
from magicmerge.bench import BenchmarkSpec, combo_sweep, deep_spec, make_synthetic_tasks, run_benchmark
from magicmerge.calibrate import (
    CalibrationConfig,
    calibrate,
    hyperellipsoid_value,
    apply_wsc,
    layer_sensitivity,
    optimal_scale_closed_form,
    select_sensitive_layers,
    wsc_coefficient,
)
from magicmerge.checkpoint import LayerSpec, ModelManifest, ModelWeights, from_bytes, mlp_manifest, to_bytes
from magicmerge.diagnostics import fusion_norms
from magicmerge.merge import METHODS, MergeConfig, TaskVector, keep_count, merge, merge_dare, merge_task_arithmetic, trim
from magicmerge.network import init_mlp, linearisation_residual, linearised_task_feature, task_feature

SEEDS = range(5)


def record(cid, ok, detail):
    ACCEPTANCE[str(cid)] = (bool(ok), detail)
    assert ok, detail


@functools.lru_cache(maxsize=None)
def setup_for(kind, seed):
    spec = BenchmarkSpec(seed=seed) if kind == "default" else deep_spec(seed)
    return make_synthetic_tasks(spec)


@functools.lru_cache(maxsize=None)
def end_to_end(kind, seed):
    s = setup_for(kind, seed)
    L = s.manifest.L
    runs = {c: run_benchmark(s, "task_arithmetic", c) for c in ("none", "fsc", "dsc", "dsc_a")}
    alpha_sweep = {a: run_benchmark(s, "task_arithmetic", "dsc", cfg=CalibrationConfig(alpha=a)) for a in range(L + 1)}
    alpha_sweep.setdefault(10, run_benchmark(s, "task_arithmetic", "dsc", cfg=CalibrationConfig(alpha=10)))
    sweep = combo_sweep(s, workers=1)
    for r in list(runs.values()) + list(alpha_sweep.values()):
        if r.plan is not None:
            r.plan.check()
    return {
        "L": L,
        "acc": {c: r.mean for c, r in runs.items()},
        "alpha": {a: r.mean for a, r in alpha_sweep.items()},
        "t": sweep.t_statistic,
        "subsets": len(sweep.rows),
    }


def criterion7(kind, seeds):
    res = [end_to_end(kind, s) for s in seeds]
    dsc_wins = sum(r["acc"]["dsc"] >= r["acc"]["none"] for r in res)
    t_pos = sum(r["t"] > 0 for r in res)
    ts = ", ".join(f"{r['t']:.2f}" for r in res)
    ok = dsc_wins >= math.ceil(0.8 * len(res)) and t_pos >= math.ceil(0.8 * len(res)) and all(r["subsets"] == 15 for r in res)
    return ok, f"DSC>=TA on {dsc_wins}/{len(res)}, sweep t>0 on {t_pos}/{len(res)} (t = {ts})"


def criterion8(kind, seeds):
    res = [end_to_end(kind, s) for s in seeds]
    n = len(res)
    fsc = sum(r["acc"]["fsc"] > r["acc"]["none"] for r in res)
    dsca = sum(r["acc"]["dsc_a"] < r["acc"]["dsc"] for r in res)
    a0 = sum(r["alpha"][0] > r["acc"]["none"] for r in res)
    a10 = sum(r["alpha"][10] > r["acc"]["none"] for r in res)
    ok = fsc >= math.ceil(0.8 * n) and dsca >= math.ceil(0.6 * n) and a0 >= math.ceil(0.6 * n) and a10 >= math.ceil(0.6 * n)
    detail = f"FSC>none {fsc}/{n}, DSC-A<DSC {dsca}/{n}, alpha=0>none {a0}/{n}, alpha=10>none {a10}/{n}"
    return ok, detail


def alpha_table(kind, seeds):
    res = [end_to_end(kind, s) for s in seeds]
    L = res[0]["L"]
    rows = []
    for a in range(L + 1):
        vals = [r["alpha"][a] for r in res]
        rows.append(f"alpha={a}: " + " ".join(f"{v:.4f}" for v in vals))
    none = " ".join(f"{r['acc']['none']:.4f}" for r in res)
    return [f"{kind} alpha sweep (DSC mean accuracy per seed; no calibration: {none})"] + ["  " + r for r in rows]


# -- 1 -------------------------------------------------------------------------------


def test_criterion_1_norm_instability():
    rng = np.random.default_rng(101)
    bad = []
    for trial in range(100):
        K = int(rng.integers(2, 9))
        n = int(rng.integers(2, 200))
        V = rng.standard_normal((K, n)) * rng.uniform(0.01, 10, size=(K, 1))
        for p in (1, 2):
            fused, mean_norm = fusion_norms(V, p)
            # independent evaluation of both sides
            ref_fused = np.sum(np.abs(V.mean(axis=0)) ** p) ** (1 / p)
            ref_mean = np.mean(np.sum(np.abs(V) ** p, axis=1) ** (1 / p))
            if not (math.isclose(fused, ref_fused, rel_tol=1e-12) and math.isclose(mean_norm, ref_mean, rel_tol=1e-12)):
                bad.append((trial, p, "value"))
            if fused > mean_norm * (1 + 1e-5):
                bad.append((trial, p, "bound"))
            # random Gaussian sets are non-collinear with probability one
            if not fused < mean_norm:
                bad.append((trial, p, "strict"))
    record(1, not bad, f"100 random sets, p in {{1, 2}}: {len(bad)} violations")


# -- 2 -------------------------------------------------------------------------------


def test_criterion_2_wsc_exactness():
    rng = np.random.default_rng(202)
    worst = 0.0
    for K in range(1, 7):
        for _ in range(20):
            n = int(rng.integers(K + 1, 300))
            axes = [rng.standard_normal(n) * rng.uniform(0.05, 5) for _ in range(K)]
            merged = rng.standard_normal(n) * rng.uniform(0.05, 5)
            xi = wsc_coefficient(merged, axes)
            worst = max(worst, abs(hyperellipsoid_value(xi * merged, axes) - 1.0))
    d = rng.standard_normal(64)
    m = ModelManifest((LayerSpec(0, "w", None, "none"),), 8, 8)
    tv = TaskVector({0: d}, "base", m)
    out, _ = apply_wsc(tv.scale(0.3), [tv], frozenset())
    err = float(np.max(np.abs(out[0] - d)))
    record(2, worst <= 1e-5 and err <= 1e-6, f"max |constraint - 1| = {worst:.2e}; K=1 recovery max error = {err:.2e}")


# -- 3 -------------------------------------------------------------------------------


def test_criterion_3_closed_form_optimality():
    rng = np.random.default_rng(303)
    grid = np.arange(0.0, 5.0 + 5e-5, 1e-4)
    worst, used = 0.0, 0
    while used < 100:
        n = int(rng.integers(2, 12))
        d = rng.standard_normal(n)
        eta = rng.uniform(0.1, 1.0)
        e = rng.standard_normal(n) * rng.uniform(0, 0.5) * np.linalg.norm(d) / np.sqrt(n)
        # the grid stops at 5, so only instances whose minimiser lies inside it are informative
        v = eta * d + e
        loss = grid[:, None] * v[None, :] - d[None, :]
        best = grid[np.argmin(np.einsum("ij,ij->i", loss, loss))]
        if not 0.0 < best < 5.0:
            continue
        used += 1
        worst = max(worst, abs(optimal_scale_closed_form(d, eta, e) - best))
    record(3, worst <= 1e-4, f"100 instances, max |closed form - grid argmin| = {worst:.2e} (step 1e-4)")


# -- 4 -------------------------------------------------------------------------------


def test_criterion_4_linearity():
    rng = np.random.default_rng(404)
    W = rng.standard_normal((5, 7)).astype(np.float32)
    V = (W + rng.standard_normal((5, 7))).astype(np.float32)
    m1 = ModelManifest((LayerSpec(0, "w", None, "none"),), 7, 5)
    x = rng.standard_normal((9, 7))
    dh = task_feature(ModelWeights({"w": W}), ModelWeights({"w": V}), m1, x).per_layer[0]
    dW = V.astype(np.float64) - W.astype(np.float64)
    lin_err = float(np.max(np.abs(dh - x @ dW.T)) / np.max(np.abs(x @ dW.T)))

    ratios = []
    for seed in range(5):
        m = mlp_manifest([4, 8, 8, 3], activation="gelu")
        pre = init_mlp(m, seed)
        r = np.random.default_rng(seed)
        delta = {k: r.standard_normal(v.shape) for k, v in pre.tensors.items()}
        xs = r.standard_normal((5, 4))
        lin = linearised_task_feature(pre, delta, m, xs)
        ratios.append(linearisation_residual(pre, delta, m, xs, 1e-3, lin=lin) / linearisation_residual(pre, delta, m, xs, 1e-4, lin=lin))
    ok = lin_err <= 1e-14 and all(5.0 <= q <= 20.0 for q in ratios)
    record(4, ok, f"linear layer relative error {lin_err:.1e}; gelu residual ratios {[round(q, 2) for q in ratios]}")


# -- 5 -------------------------------------------------------------------------------


def test_criterion_5_gating_contract():
    checked = 0
    for kind in ("default", "deep"):
        s = setup_for(kind, 0)
        tvs = s.task_vectors
        batches = [t.calib.subset([0]) for t in s.tasks]
        for method in METHODS:
            merged = merge(tvs, MergeConfig(method=method))
            lam = 1.0 if method == "average" else 0.3
            for alpha in sorted({0, 1, s.manifest.L // 2, s.manifest.L, 10}):
                cfg = CalibrationConfig(alpha=alpha, lam=lam)
                for mode in ("wsc", "fsc", "dsc"):
                    _, plan = calibrate(mode, s.pretrained, merged, tvs, batches, s.probe, cfg)
                    plan.check()
                    for l in range(plan.num_layers):
                        for xi in (plan.xi_weight, plan.xi_feature):
                            if xi is not None:
                                assert xi[l] == 1.0 or ((xi[l] > 1.0) != (l in plan.sensitive_set))
                    checked += 1

    rng = np.random.default_rng(505)
    selections = 0
    for _ in range(500):
        L = int(rng.integers(1, 30))
        sens = rng.permutation(rng.standard_normal(L))
        alpha = int(rng.integers(0, L + 1))
        direct = {l for l in range(L) if sum(1 for k in range(L) if sens[k] < sens[l]) < alpha}
        got = select_sensitive_layers(list(sens), alpha)
        assert got == direct and len(got) == alpha
        selections += 1
    # the end-to-end runs below also call plan.check() on every calibrated model
    record(5, True, f"{checked} calibration plans satisfy the gate; {selections} selections match the predicate")


# -- 6 -------------------------------------------------------------------------------


def test_criterion_6_sensitivity_consistency():
    rhos = []
    for seed in range(10):
        s = setup_for("deep", seed)
        r0 = layer_sensitivity(s.task_vectors[0], s.pretrained, s.manifest, s.probe, lam=1.0).per_layer_s
        r1 = layer_sensitivity(s.task_vectors[1], s.pretrained, s.manifest, s.probe, lam=1.0).per_layer_s
        rhos.append(float(stats.spearmanr(r0, r1).statistic))
    positive = sum(r > 0 for r in rhos)

    s = setup_for("default", 0)
    tv = s.task_vectors[0]
    flat = layer_sensitivity(tv, s.pretrained, s.manifest, s.probe, epsilon=1.0).per_layer_s
    zeroed = tv.replace_layers({1: np.zeros_like(tv[1])})
    zero_layer = layer_sensitivity(zeroed, s.pretrained, s.manifest, s.probe).per_layer_s[1]
    exact = flat == [0.0] * s.manifest.L and zero_layer == 0.0
    record(
        6,
        positive >= 8 and exact,
        f"Spearman > 0 on {positive}/10 seeds ({', '.join(f'{r:.2f}' for r in rhos)}); exact zeros: {exact}",
    )


# -- 7 and 8 -------------------------------------------------------------------------


def test_criterion_7_end_to_end():
    ok, detail = criterion7("default", SEEDS)
    for label, seeds in (("seeds 0-4", SEEDS), ("held-out seeds 5-9", range(5, 10))):
        _, d = criterion7("deep", seeds)
        INFO.append(f"criterion 7 on deep_spec, {label}: {d}")
    record(7, ok, "default benchmark: " + detail)


def test_criterion_8_ablations():
    ok, detail = criterion8("default", SEEDS)
    INFO.extend(alpha_table("default", SEEDS))
    for label, seeds in (("seeds 0-4", SEEDS), ("held-out seeds 5-9", range(5, 10))):
        _, d = criterion8("deep", seeds)
        INFO.append(f"criterion 8 on deep_spec, {label}: {d}")
    INFO.extend(alpha_table("deep", SEEDS))
    record(8, ok, "default benchmark: " + detail)


# -- 9 -------------------------------------------------------------------------------


def test_criterion_9_format_fidelity():
    from test_checkpoint import MALFORMED

    rng = np.random.default_rng(909)
    mismatches = 0
    for i in range(1000):
        tensors = {}
        for j in range(int(rng.integers(1, 5))):
            shape = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(0, 4))))
            tensors[f"t{i}_{j}"] = rng.standard_normal(shape).astype(np.float32)
        w = ModelWeights(tensors, metadata={"i": str(i)})
        buf = to_bytes(w)
        back = from_bytes(buf)
        same = all(back[n].tobytes() == t.tobytes() and back[n].shape == t.shape for n, t in tensors.items())
        mismatches += not (same and back.metadata == w.metadata and to_bytes(back) == buf)
    rejected = 0
    for _name, buf, err in MALFORMED:
        try:
            from_bytes(buf)
        except err:
            rejected += 1
    ok = mismatches == 0 and rejected == len(MALFORMED)
    record(9, ok, f"1000 round trips, {mismatches} mismatches; {rejected}/{len(MALFORMED)} malformed fixtures rejected")


# -- 10 ------------------------------------------------------------------------------


def test_criterion_10_ties_and_dare():
    rng = np.random.default_rng(1010)
    wrong = 0
    for _ in range(300):
        n = int(rng.integers(1, 2000))
        v = rng.standard_normal(n)
        wrong += np.count_nonzero(trim(v, 0.2)) != math.ceil(0.2 * n)
    assert keep_count(10, 0.2) == 2

    m = ModelManifest((LayerSpec(0, "w", None, "none"),), 4, 2)
    vs = [TaskVector({0: rng.uniform(0.5, 1.0, 8)}, "base", m) for _ in range(2)]
    target = merge_task_arithmetic(vs)[0]
    acc = np.zeros_like(target)
    n = 10_000
    for seed in range(n):
        acc += merge_dare(vs, 0.2, seed=seed)[0]
    rel = float(np.max(np.abs(acc / n - target) / np.abs(target)))
    record(10, wrong == 0 and rel <= 0.02, f"trim count wrong on {wrong}/300 layers; DARE max relative bias {rel:.4f} (p=0.2, 10k seeds)")
