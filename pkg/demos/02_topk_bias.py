"""Top-k baselines stay unbiased; top-k objectives do not.

Truncating the *baseline* to the student's top-k tokens only changes a
constant, so the expected gradient survives.  Truncating the *objective*
changes what is being minimized.
"""

# %%
import numpy as np

from vopd_lab import EstimatorSpec, Kind, exact_expected_gradient, topk_bias
from vopd_lab.divergence import TopK, value_baseline

p = np.array([0.5, 0.3, 0.2])
q = np.array([0.2, 0.3, 0.5])
truth = exact_expected_gradient(EstimatorSpec(Kind.OPD), p, q)

# %%
for k in (1, 2, 3):
    vopd = exact_expected_gradient(EstimatorSpec(Kind.VOPD_TOP_K, k), p, q)
    print(f"k={k}  baseline {value_baseline(p, q, TopK(k)):+.4f}  "
          f"|E[VOPD_TOP_K] - E[OPD]| = {np.max(np.abs(vopd - truth)):.1e}  "
          f"|E[OPD_TOP_K] - E[OPD]| = {topk_bias(p, q, k):.4f}")
