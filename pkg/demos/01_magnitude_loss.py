"""Why merged models lose magnitude.

Averaging task vectors that point in different directions shrinks their norm,
and the shrinkage shows up again in the hidden features.  This script prints
both effects on the synthetic benchmark.
"""
import numpy as np

from magicmerge.bench import BenchmarkSpec, make_synthetic_tasks
from magicmerge.diagnostics import fusion_norms, operation_reports

# %% norms of averaged random vectors fall like 1/sqrt(K)
rng = np.random.default_rng(0)
for K in (1, 2, 4, 8):
    fused, mean_norm = fusion_norms(rng.standard_normal((K, 1000)))
    print(f"K={K}: ||mean|| / mean||.|| = {fused / mean_norm:.3f}   (1/sqrt(K) = {1 / np.sqrt(K):.3f})")

# %% the same thing inside a network
setup = make_synthetic_tasks(BenchmarkSpec(seed=0))
reports = operation_reports(setup.task_vectors, setup.pretrained, setup.manifest, [t.calib for t in setup.tasks])
for op, per_task in reports.items():
    w = np.mean([r.weight_ratios() for r in per_task], axis=0)
    f = np.mean([r.feature_ratios() for r in per_task], axis=0)
    print(f"{op:>10}: weight ratio per layer {np.round(w, 3)}, feature ratio {np.round(f, 3)}")
