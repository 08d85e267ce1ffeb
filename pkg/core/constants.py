# -*- coding: utf-8 -*-
"""
core.constants - Shared constants for rbmreg.

Version strings, training defaults, regularizer and model enumerations,
and the fixed metrics CSV schema live here. No numeric imports.
"""
from __future__ import annotations

# ------------------------------------------------------------------ #
# Version strings
# ------------------------------------------------------------------ #
LIB_VERSION = '1.2.0'
CHECKPOINT_FORMAT = 2
METRICS_SCHEMA = 'metrics_v1'

# ------------------------------------------------------------------ #
# Environment
# ------------------------------------------------------------------ #
ENV_OUTPUT_ROOT = 'RBMREG_OUTPUT_ROOT'
LOGGER_NAME = 'rbmreg'

# ------------------------------------------------------------------ #
# Model kinds and layer kinds
# ------------------------------------------------------------------ #
MODEL_KINDS = ('rbm', 'dbn', 'dbm', 'rsm', 'grbm')
LAYER_KINDS = ('bernoulli', 'gaussian', 'softmax')

# ------------------------------------------------------------------ #
# Regularization modes
# ------------------------------------------------------------------ #
REG_MODES = ('none', 'do', 'dc', 'l2', 'l2al1', 'snp', 'inp', 'pdo', 'pdc', 'sparsity')

# Modes that need an unregularized reference weight matrix from a first phase
REFERENCE_MODES = frozenset({'l2al1', 'snp', 'inp', 'pdo', 'pdc'})

# Modes that draw a fresh Bernoulli mask during training
NODE_MASK_MODES = frozenset({'do', 'pdo'})
EDGE_MASK_MODES = frozenset({'dc', 'pdc'})
FROZEN_MASK_MODES = frozenset({'snp', 'inp'})

# ------------------------------------------------------------------ #
# Numeric guards
# ------------------------------------------------------------------ #
DIVERGENCE_LIMIT = 1e6
ENUMERATION_LIMIT = 24          # max total units for exact enumeration
AL1_DENOM_EPS = 1e-8            # clamp for |W_hat| in the adaptive L1 penalty
STANDARDIZE_EPS = 1e-8          # variance clamp for feature standardization
AIS_BASE_CLAMP = (0.001, 0.999)
MASK_ENUM_LIMIT = 2 ** 16       # exact mask expectation below this many states
MASK_MC_SAMPLES = 10_000

# ------------------------------------------------------------------ #
# Training defaults (desk scale)
# ------------------------------------------------------------------ #
DEFAULT_CD_K = 1
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_BATCH_SIZE = 10
DEFAULT_EPOCHS = 100
DEFAULT_FINETUNE_LR = 0.1
DEFAULT_FINETUNE_EPOCHS = 300
DEFAULT_SPARSITY_TARGET = 0.02
DEFAULT_DBM_MF_ITERS = 10
DEFAULT_DBM_GIBBS_STEPS = 5
DEFAULT_AIS_TEMPERATURES = 1000
DEFAULT_AIS_RUNS = 100

# Hyperparameter ranges used by sweep templates
SWEEP_RANGES: dict[str, list[float]] = {
    'p': [0.8, 0.9],
    'lam': [1e-5, 1e-4],
    'mu': [0.01, 0.1],
    'p0': [0.5],
    'q': [0.7, 0.8, 0.9],
}

# ------------------------------------------------------------------ #
# Metrics CSV schema (fixed column order)
# ------------------------------------------------------------------ #
METRICS_COLUMNS = (
    'epoch', 'phase', 'pseudo_likelihood', 'ais_loglik', 'ais_stderr',
    'penalty_value', 'train_err', 'valid_err', 'wall_seconds',
)

SWEEP_COLUMNS = (
    'cell', 'params', 'replicates', 'valid_err_mean', 'valid_err_sd',
    'test_err_mean', 'winner',
)
