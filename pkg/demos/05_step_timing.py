"""Per-step cost of each estimator as the vocabulary grows.

Sampled estimators touch one teacher entry per token; full-vocabulary ones
touch a whole row.  The gap opens up as V grows.
"""

# %%
import numpy as np

from vopd_lab import ExperimentConfig
from vopd_lab.experiments import bench_batch, bench_specs, time_kinds

config = ExperimentConfig(bench_repetitions=5, bench_warmups=1)

# %%
for V in (1_000, 30_000):
    student, teacher, batch = bench_batch(V, config)
    specs = bench_specs(V, 20)
    times = time_kinds(student, teacher, batch, specs, config.bench_repetitions,
                       config.bench_warmups, config.bench_inner_loops)
    print(f"V={V}")
    for spec in specs:
        print(f"  {spec.label:<16} {np.median(times[spec.label]):8.2f} ms")
