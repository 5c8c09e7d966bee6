"""How many layers to protect, and does calibration help across task subsets?

Sweeps the sensitive-set size from 0 to L, then runs the subset sweep with a
paired t-test.
"""
from magicmerge.bench import combo_sweep, deep_spec, make_synthetic_tasks, run_benchmark
from magicmerge.calibrate import CalibrationConfig

setup = make_synthetic_tasks(deep_spec(seed=3))
print("no calibration:", round(run_benchmark(setup, "task_arithmetic", "none").mean, 4))
for alpha in range(setup.manifest.L + 1):
    acc = run_benchmark(setup, "task_arithmetic", "dsc", cfg=CalibrationConfig(alpha=alpha)).mean
    print(f"alpha={alpha:2d}: {acc:.4f}")

# %% every non-empty subset of the four specialists, before and after
sweep = combo_sweep(setup, "task_arithmetic", "dsc")
for row in sweep.rows:
    print(row["subset"], f"{row['before']:.4f} -> {row['after']:.4f}")
print(f"paired t = {sweep.t_statistic:.3f}, p = {sweep.p_value:.3g}")
