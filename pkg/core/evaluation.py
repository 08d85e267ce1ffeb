# -*- coding: utf-8 -*-
"""
core.evaluation - Model-fit metrics and theory checks.

Pseudo-likelihood, annealed importance sampling of log Z, the exact
(optionally masked) DBN likelihood and its variational bound, classification
error, and the parameter-recovery suite run against exactly sampled data.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp, xlogy

from core.constants import (
    AIS_BASE_CLAMP,
    DEFAULT_AIS_RUNS,
    DEFAULT_AIS_TEMPERATURES,
    ENUMERATION_LIMIT,
    MASK_ENUM_LIMIT,
    MASK_MC_SAMPLES,
)
from core.deep_models import LayerStack
from core.numerics import ContractError, RandomSource, enumerate_binary, log1p_exp, logit, sigmoid
from core.rbm import (
    EnumerationLimitError,
    RbmParams,
    TrainConfig,
    exact_log_partition,
    exact_visible_distribution,
    free_energy,
    sample_exact,
)
from core.regularizers import MaskSpec, RegConfig, fit_with_regularizer, inference_params


def _binary_rows(params: RbmParams, dataset, what: str) -> np.ndarray:
    if params.kind != 'bernoulli':
        raise ContractError(f'{what}: needs a bernoulli RBM (got {params.kind})')
    V = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if not np.all((V == 0.0) | (V == 1.0)):
        raise ContractError(f'{what}: data must be binary')
    return V


# ------------------------------------------------------------------ #
# Pseudo-likelihood
# ------------------------------------------------------------------ #

def pseudo_likelihood(params: RbmParams, dataset, variant: str = 'full',
                      rng: RandomSource | None = None) -> float:
    """Mean over rows of sum_j log P(v_j | v_-j) via single-bit flips.

    ``variant='stochastic'`` flips one uniformly drawn bit per row and
    scales its term by J (unbiased for the full sum).
    """
    V = _binary_rows(params, dataset, 'pseudo_likelihood')
    if V.shape[0] == 0:
        return 0.0
    J = V.shape[1]
    fe = free_energy(params, V)
    if variant == 'full':
        total = np.zeros(V.shape[0])
        for j in range(J):
            flipped = V.copy()
            flipped[:, j] = 1.0 - flipped[:, j]
            total -= log1p_exp(fe - free_energy(params, flipped))
        return float(np.mean(total))
    if variant == 'stochastic':
        rng = rng if rng is not None else RandomSource(0)
        cols = rng.generator.integers(0, J, size=V.shape[0])
        flipped = V.copy()
        rows = np.arange(V.shape[0])
        flipped[rows, cols] = 1.0 - flipped[rows, cols]
        return float(np.mean(-J * log1p_exp(fe - free_energy(params, flipped))))
    raise ContractError(f'pseudo_likelihood: unknown variant "{variant}"')


# ------------------------------------------------------------------ #
# AIS
# ------------------------------------------------------------------ #

@dataclass
class AisConfig:
    num_temperatures: int = DEFAULT_AIS_TEMPERATURES
    num_runs: int = DEFAULT_AIS_RUNS
    base: RbmParams | None = None
    seed: int = 0

    def betas(self) -> np.ndarray:
        """Uniform schedule from 0 to 1 inclusive."""
        return np.linspace(0.0, 1.0, self.num_temperatures)

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.num_runs < 2:
            errors.append(f'AIS needs num_runs >= 2 (got {self.num_runs}).')
        if self.num_temperatures < 2:
            errors.append(f'AIS needs num_temperatures >= 2 (got {self.num_temperatures}).')
        if self.base is not None and (np.any(self.base.W != 0) or np.any(self.base.c != 0)):
            errors.append('AIS base model must have W = 0 and c = 0.')
        return errors


def base_rate_params(dataset, n_hidden: int) -> RbmParams:
    """Base-rate model: b = logit(clamped data means), c = 0, W = 0."""
    V = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    lo, hi = AIS_BASE_CLAMP
    b = logit(np.clip(np.mean(V, axis=0), lo, hi))
    return RbmParams(b, np.zeros(n_hidden), np.zeros((n_hidden, V.shape[1])))


def _log_p_star(params: RbmParams, b_A: np.ndarray, beta: float, V: np.ndarray) -> np.ndarray:
    # b_A + beta * (b - b_A) equals b_A exactly when b == b_A
    vb = V @ (b_A + beta * (params.b - b_A))
    return vb + np.sum(log1p_exp(beta * (params.c + V @ params.W.T)), axis=1)


def ais_log_partition(params: RbmParams, config: AisConfig | None = None) -> tuple[float, float]:
    """(log Z estimate, stderr) by AIS from the base-rate model to *params*.

    All runs advance together from one stream; the stderr is the delta-method
    standard error of the log of the mean importance weight.
    """
    config = config or AisConfig()
    errors = config.validate()
    if errors:
        raise ContractError('; '.join(errors))
    if params.kind != 'bernoulli':
        raise ContractError(f'ais_log_partition: needs a bernoulli RBM (got {params.kind})')
    b_A = config.base.b if config.base is not None else np.zeros(params.n_visible)
    if b_A.shape != params.b.shape:
        raise ContractError('ais_log_partition: base model size does not match')
    log_z_base = params.n_hidden * np.log(2.0) + float(np.sum(log1p_exp(b_A)))

    gen = RandomSource(config.seed).child(0).generator
    M = config.num_runs
    V = (gen.random((M, params.n_visible)) < sigmoid(b_A)).astype(np.float64)
    logw = np.zeros(M)
    betas = config.betas()
    for b0, b1 in zip(betas[:-1], betas[1:]):
        logw += _log_p_star(params, b_A, b1, V) - _log_p_star(params, b_A, b0, V)
        if b1 < 1.0:
            hp = sigmoid(b1 * (params.c + V @ params.W.T))
            H = (gen.random(hp.shape) < hp).astype(np.float64)
            vp = sigmoid(b_A + b1 * (params.b - b_A) + b1 * (H @ params.W))
            V = (gen.random(vp.shape) < vp).astype(np.float64)

    log_mean = float(logsumexp(logw) - np.log(M))
    r = np.exp(logw - np.max(logw))
    stderr = float(np.std(r, ddof=1) / np.sqrt(M) / np.mean(r))
    return log_z_base + log_mean, stderr


def ais_log_likelihood(params: RbmParams, dataset, config: AisConfig | None = None) -> float:
    """Mean of -F(v) - log Z_hat over the rows of *dataset*."""
    V = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    log_z, _ = ais_log_partition(params, config)
    return float(np.mean(-free_energy(params, V)) - log_z)


# ------------------------------------------------------------------ #
# DBN likelihood and variational bound (exact, tiny models)
# ------------------------------------------------------------------ #

@dataclass
class BoundReport:
    entropy: float
    expected_log_prior: float
    expected_log_decoder: float
    total: float
    stderr: float = 0.0
    mask_states: int = 1

    def as_dict(self) -> dict[str, Any]:
        return {
            'entropy': self.entropy,
            'expected_log_prior': self.expected_log_prior,
            'expected_log_decoder': self.expected_log_decoder,
            'total': self.total,
            'stderr': self.stderr,
            'mask_states': self.mask_states,
        }


def _check_enumerable(stack: LayerStack):
    for p in stack.layers:
        if p.kind != 'bernoulli':
            raise ContractError('DBN bound: all layers must be bernoulli')
    total = sum(stack.sizes)
    if total > ENUMERATION_LIMIT:
        raise EnumerationLimitError(f'DBN bound needs layer sizes summing to <= {ENUMERATION_LIMIT} (got {total})')


def _log_cond_visible(params: RbmParams, H: np.ndarray, V: np.ndarray) -> np.ndarray:
    """log P(v | h) for every (v row, h row): shape (len(V), len(H))."""
    A = params.b + H @ params.W
    return V @ A.T - np.sum(log1p_exp(A), axis=1)[None, :]


def _log_hidden_marginal(params: RbmParams, H: np.ndarray) -> np.ndarray:
    """log P(h) of a bernoulli RBM for every row of H."""
    return H @ params.c + np.sum(log1p_exp(params.b + H @ params.W), axis=1) - exact_log_partition(params)


def _log_decoder(layers: list[RbmParams], V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(h states of the last layer, log P(v | h) through the directed layers)."""
    H = enumerate_binary(layers[0].n_hidden)
    log_d = _log_cond_visible(layers[0], H, V)
    for params in layers[1:]:
        H_up = enumerate_binary(params.n_hidden)
        # log P(h_below | h_up): rows h_up, cols h_below
        log_t = _log_cond_visible(params, H_up, H).T
        log_d = logsumexp(log_d[:, None, :] + log_t[None, :, :], axis=2)
        H = H_up
    return H, log_d


def _bound_unmasked(stack: LayerStack, V: np.ndarray) -> tuple[float, float, float, float]:
    """(entropy, prior, decoder, exact log-likelihood of the stack) averaged over rows."""
    if stack.depth == 1:
        ll = float(np.mean(-free_energy(stack.top, V)) - exact_log_partition(stack.top))
        return 0.0, ll, 0.0, ll
    lower = stack.layers[:-1]
    H, log_d = _log_decoder(lower, V)
    log_joint = log_d + _log_hidden_marginal(lower[-1], H)[None, :]
    log_q = log_joint - logsumexp(log_joint, axis=1, keepdims=True)
    Q = np.exp(log_q)
    top = stack.top
    log_prior = -free_energy(top, H) - exact_log_partition(top)
    entropy = -np.sum(xlogy(Q, Q), axis=1)
    prior = Q @ log_prior
    decoder = np.sum(Q * log_d, axis=1)
    exact = logsumexp(log_d + log_prior[None, :], axis=1)
    return float(np.mean(entropy)), float(np.mean(prior)), float(np.mean(decoder)), float(np.mean(exact))


def _apply_masks(stack: LayerStack, concrete: list[tuple[str, np.ndarray] | None]) -> LayerStack:
    """Restrict the stack to the units and weights a concrete mask keeps.

    A dropped hidden unit of layer l is removed from layer l (row) and from
    layer l + 1 (visible column); an edge mask multiplies W.
    """
    layers = [p.copy() for p in stack.layers]
    for l, item in enumerate(concrete):
        if item is not None and item[0] == 'edge':
            layers[l].W = layers[l].W * item[1]
    for l, item in enumerate(concrete):
        if item is None or item[0] != 'node':
            continue
        keep = item[1] > 0
        p = layers[l]
        layers[l] = RbmParams(p.b, p.c[keep], p.W[keep], p.kind)
        if l + 1 < len(layers):
            q = layers[l + 1]
            layers[l + 1] = RbmParams(q.b[keep], q.c, q.W[:, keep], q.kind)
    return LayerStack(layers, flavor=stack.flavor)


def _mask_expectation(stack: LayerStack, masks: list[MaskSpec | None] | None,
                      fn, rng: RandomSource | None) -> tuple[np.ndarray, float, int]:
    """E_m[fn(masked stack)] (vector valued), stderr of the first component, mask states."""
    masks = list(masks) if masks is not None else [None] * stack.depth
    if len(masks) != stack.depth:
        raise ContractError('mask distribution needs one entry per layer')
    slots = []       # (layer, kind, probs, uncertain flat indices)
    n_free = 0
    for l, m in enumerate(masks):
        if m is None or m.kind == 'none':
            slots.append(None)
            continue
        m.check(stack.layers[l])
        probs = m.retain_probs
        free = np.flatnonzero((probs.ravel() > 0.0) & (probs.ravel() < 1.0))
        slots.append((l, m.kind, probs, free))
        n_free += free.size

    def concrete(bits: np.ndarray) -> tuple[list, float]:
        out, logp, pos = [], 0.0, 0
        for s in slots:
            if s is None:
                out.append(None)
                continue
            _, kind, probs, free = s
            flat = (probs.ravel() >= 1.0).astype(np.float64)
            take = bits[pos:pos + free.size]
            flat[free] = take
            pf = probs.ravel()[free]
            logp += float(np.sum(np.log(np.where(take > 0, pf, 1.0 - pf))))
            pos += free.size
            out.append((kind, flat.reshape(probs.shape)))
        return out, logp

    if 2 ** n_free <= MASK_ENUM_LIMIT:
        states = enumerate_binary(n_free)
        values, logws = [], []
        for bits in states:
            c, logp = concrete(bits)
            values.append(fn(_apply_masks(stack, c)))
            logws.append(logp)
        w = np.exp(np.asarray(logws))
        w = w / w.sum()
        return np.asarray(values).T @ w, 0.0, states.shape[0]

    rng = rng if rng is not None else RandomSource(0)
    gen = rng.generator
    probs_free = np.concatenate([s[2].ravel()[s[3]] for s in slots if s is not None])
    values = []
    for _ in range(MASK_MC_SAMPLES):
        bits = (gen.random(n_free) < probs_free).astype(np.float64)
        values.append(fn(_apply_masks(stack, concrete(bits)[0])))
    values = np.asarray(values)
    stderr = float(np.std(values[:, 0], ddof=1) / np.sqrt(MASK_MC_SAMPLES))
    return values.mean(axis=0), stderr, MASK_MC_SAMPLES


def dbn_bound(stack: LayerStack, v, mask_distribution: list[MaskSpec | None] | None = None,
              rng: RandomSource | None = None) -> BoundReport:
    """Variational lower bound on log P(v) of a DBN, averaged over rows of v.

    With top layer L + 1 and Q(h^L | v) the exact posterior of the lower L
    layers: H(Q) + E_Q[log P_top(h^L)] + E_Q[log P(v | h^L)]. Under a mask
    distribution every component is its expectation over masks.
    """
    _check_enumerable(stack)
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    vals, stderr, states = _mask_expectation(
        stack, mask_distribution, lambda s: np.asarray(_bound_unmasked(s, V)[:3]), rng)
    e, p, d = (float(x) for x in vals)
    return BoundReport(e, p, d, e + p + d, stderr, states)


def dbn_log_likelihood(stack: LayerStack, v, mask_distribution: list[MaskSpec | None] | None = None,
                       rng: RandomSource | None = None) -> float:
    """Exact E_m[log P_DBN(v | m)] averaged over rows of v."""
    _check_enumerable(stack)
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    vals, _, _ = _mask_expectation(stack, mask_distribution,
                                   lambda s: np.asarray([_bound_unmasked(s, V)[3]]), rng)
    return float(vals[0])


# ------------------------------------------------------------------ #
# Classification
# ------------------------------------------------------------------ #

def classification_error(classifier, features, labels) -> float:
    """Fraction of rows whose argmax score (lowest index on ties) is wrong.

    *classifier* may expose ``scores(X)``, be a callable, or be a score matrix.
    """
    y = np.asarray(labels).reshape(-1)
    if hasattr(classifier, 'scores'):
        S = classifier.scores(features)
    elif callable(classifier):
        S = classifier(features)
    else:
        S = classifier
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[0] != y.size:
        raise ContractError(f'classification_error: {S.shape[0]} score rows but {y.size} labels')
    if y.size == 0:
        return 0.0
    return float(np.mean(np.argmax(S, axis=1) != y))


# ------------------------------------------------------------------ #
# Parameter recovery
# ------------------------------------------------------------------ #

def tv_distance(a: RbmParams, b: RbmParams) -> float:
    """Total variation between the enumerated visible distributions."""
    _, pa = exact_visible_distribution(a)
    _, pb = exact_visible_distribution(b)
    return float(0.5 * np.sum(np.abs(pa - pb)))


@dataclass
class ConvergenceRow:
    n: int
    seed: int
    tv: float
    init_tv: float
    support_retained: bool | None = None
    zero_set_match: bool | None = None


@dataclass
class ConvergenceReport:
    mode: str
    rows: list[ConvergenceRow] = field(default_factory=list)

    def median_tv(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for n in sorted({r.n for r in self.rows}):
            out[n] = float(np.median([r.tv for r in self.rows if r.n == n]))
        return out

    def support_retained_count(self, n: int) -> int:
        return sum(1 for r in self.rows if r.n == n and r.support_retained)


def _match_hidden(W: np.ndarray, W0: np.ndarray) -> np.ndarray:
    """Row order of *W* that best lines its hidden units up with *W0*.

    Hidden units are exchangeable (and a unit can flip to its complement,
    negating its row), so rows are matched on |W| overlap.
    """
    _, cols = linear_sum_assignment(-(np.abs(W0) @ np.abs(W).T))
    return cols


def convergence_suite(theta0: RbmParams, n_grid: list[int], reg: RegConfig | list[RegConfig],
                      config: TrainConfig, seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
                      zero_tol: float = 1e-3, on_log=None) -> ConvergenceReport:
    """Train on data sampled exactly from *theta0* for each N and seed.

    *reg* is one config for every N or a list aligned with *n_grid* (e.g. a
    retain-probability schedule rising towards 1). Each row reports the
    total variation to the true distribution before and after training; snp
    and inp rows also report whether every true non-zero weight survived the
    mask, l2al1 rows whether the near-zero set matches the true zero set.
    """
    regs = list(reg) if isinstance(reg, (list, tuple)) else [reg] * len(n_grid)
    if len(regs) != len(n_grid):
        raise ContractError('convergence_suite: one RegConfig per N is required')
    support = theta0.W != 0.0
    report = ConvergenceReport(regs[0].mode if regs else 'none')
    for n, rc in zip(n_grid, regs):
        for seed in seeds:
            rng = RandomSource(seed)
            data = sample_exact(theta0, int(n), rng.child(0))
            init = RbmParams.init(theta0.n_hidden, theta0.n_visible, rng.child(1))
            res = fit_with_regularizer(init, data, replace(config, seed=seed), rc, rng.child(2),
                                       on_log=on_log)
            model = inference_params(res.params, res.mask) if rc.mode in ('do', 'dc', 'pdo', 'pdc') \
                else res.params
            row = ConvergenceRow(int(n), int(seed), tv_distance(model, theta0), tv_distance(init, theta0))
            order = _match_hidden(res.params.W, theta0.W)
            if rc.mode in ('snp', 'inp') and res.mask is not None:
                row.support_retained = bool(np.all(res.mask.retain_probs[order][support] == 1.0))
            if rc.mode == 'l2al1':
                row.zero_set_match = bool(np.array_equal(np.abs(res.params.W[order]) <= zero_tol, ~support))
            report.rows.append(row)
    return report
