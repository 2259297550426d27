"""Run the identity checks from Python instead of ``vopd-lab verify``."""

# %%
from vopd_lab import run_checks

for result in run_checks(seed=0):
    print(result.line())

# %% Without detaching the baseline the gradient picks up an extra term.
failed = [r.name for r in run_checks(seed=0, detach_baseline=False) if not r.passed]
print("fails when the baseline is not detached:", failed)
