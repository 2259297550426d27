"""What a value baseline does at a single context.

Every quantity below is an exact expectation: the oracle enumerates the
student's vocabulary instead of sampling.
"""

# %%
import numpy as np

from vopd_lab import EstimatorSpec, Kind, exact_expected_gradient, exact_variance_trace
from vopd_lab.oracle import context_report, baseline_variance_trace

p = np.array([0.75, 0.25])     # student
q = np.array([0.5, 0.5])       # teacher

# %% The baseline leaves the expected gradient alone.
for kind in (Kind.OPD, Kind.VOPD_FULL_V):
    g = exact_expected_gradient(EstimatorSpec(kind), p, q)
    print(f"{kind.value:<12} E[g] = {np.round(g, 6)}")

# %% But it changes the noise.
report = context_report(p, q)
print(f"variance trace, no baseline : {report.variance_trace:.6f}")
print(f"value baseline b = -KL      : {report.value_baseline:.6f}")
print(f"exact variance gap at -KL   : {report.gap_exact:.6f}")
print(f"KL^2 * E|score|^2 estimate  : {report.gap_predicted:.6f}")
print(f"optimal scalar baseline b*  : {report.optimal_baseline:.6f}")

# %% The trace is a parabola in b with its minimum at b*.
for b in np.linspace(-1.0, 1.0, 9):
    bar = "#" * int(200 * baseline_variance_trace(p, q, b))
    print(f"b={b:+.2f} {bar}")

# %% For a uniform student the score norm is constant and the estimate is exact.
p_uniform = np.full(4, 0.25)
q4 = np.array([0.4, 0.3, 0.2, 0.1])
r = context_report(p_uniform, q4)
print(f"uniform student: exact gap {r.gap_exact:.9f}, estimate {r.gap_predicted:.9f}")
print("OPD_FULL_V trace:", exact_variance_trace(EstimatorSpec(Kind.OPD_FULL_V), p, q))
