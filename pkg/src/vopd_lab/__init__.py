"""Desk-scale lab for on-policy distillation gradient estimators.

Tabular softmax students and teachers, exact enumeration oracles, the five
estimator kinds, a seeded trainer and the ``vopd-lab`` command line.
"""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .divergence import (FullVocab, TopK, renormalize, reverse_kl, token_reward, top_k_support,
                         truncated_reverse_kl, value_baseline)
from .estimators import (ALL_KINDS, EstimatorSpec, GradientEstimate, Kind, TokenRecord,
                         batch_gradient, per_token_contribution, token_contributions)
from .oracle import (baseline_variance_trace, exact_expected_gradient, exact_variance_trace,
                     optimal_baseline, topk_bias, variance_gap_exact, variance_gap_predicted)
from .policy import (Context, PolicyTable, RowInit, Trajectory, VocabSpec, init_policies,
                     load_policy, rollout, save_policy)
from .trainer import MetricsRecord, TrainConfig, TrainResult, train
from .verify import CheckResult, run_checks

__version__ = "0.1.0"
