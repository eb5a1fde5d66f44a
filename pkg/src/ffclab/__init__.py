"""ffclab: a deterministic federated-learning fairness laboratory.

Trains a small frozen-encoder model with multi-attribute fairness
regularizers under size-weighted federated averaging, then explains the
resulting group (un)fairness with constraint-based causal discovery,
backdoor-adjusted effect estimation, mediation decomposition, and a
random-common-cause robustness check — all on synthetic structural causal
models with exactly enumerable ground truth.
"""

__version__ = "0.1.0"

from . import causal, config, fairness, federation, model, numkit, presets, scmdata  # noqa: F401
