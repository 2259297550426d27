"""How well does a top-k baseline track the full reverse KL?

Contexts come from the batches of a short training run; at each one we
compare the truncated KL on the student's top-k tokens with the exact value.
"""

# %%
from vopd_lab import EstimatorSpec, Kind, TrainConfig, train
from vopd_lab.experiments import ContextCapture, capture_steps

cfg = TrainConfig(steps=200, estimator=EstimatorSpec(Kind.VOPD_FULL_V), variance_probe_every=0)
ks = [1, 2, 5, 10, 20, 50, cfg.vocab_size]
capture = ContextCapture(capture_steps(cfg, 4096), ks)
train(cfg, keep_records=False, on_batch=capture)

# %%
print(f"{capture.count} contexts; mean KL^2 = {capture.mean_full_kl_sq():.4e}")
for k, mse in capture.mse().items():
    print(f"k={k:<3} mse={mse:.4e}")
