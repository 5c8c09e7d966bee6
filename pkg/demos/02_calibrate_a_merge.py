"""Calibrating a task-arithmetic merge.

Builds four specialists on a thirteen-layer MLP, merges them with task
arithmetic, then compares the calibration modes.  Also prints the plan so the
per-layer coefficients and the gate decisions are visible.
"""
from magicmerge.bench import deep_spec, make_synthetic_tasks, run_benchmark
from magicmerge.calibrate import CalibrationConfig

setup = make_synthetic_tasks(deep_spec(seed=0))
print("specialist accuracy:", [round(run_benchmark(setup, "task_arithmetic", "none", tasks=[k], lam=1.0).mean, 3) for k in range(4)])

for cal in ("none", "wsc", "fsc", "dsc", "dsc_a"):
    res = run_benchmark(setup, "task_arithmetic", cal)
    print(f"{cal:>6}: mean accuracy {res.mean:.4f}")

# %% look inside one plan
res = run_benchmark(setup, "task_arithmetic", "dsc", cfg=CalibrationConfig(alpha=4))
print("sensitive layers:", sorted(res.plan.sensitive_set))
for row in res.plan.rows():
    print(row)
