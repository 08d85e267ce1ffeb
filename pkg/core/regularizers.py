# -*- coding: utf-8 -*-
"""
core.regularizers - The ten regularization modes behind one interface.

A mode contributes a penalty gradient over W (l2, l2al1, sparsity), a mask
policy (do, dc, pdo, pdc, snp, inp) or nothing (none). ``Regularizer`` is
what ``core.rbm.sgd_epoch`` consumes. The modes that depend on a trained
reference weight matrix run as outer loops around SGD:

    * l2al1  - L2 for the first half, then L2 + adaptive L1 w.r.t. W_hat
    * snp    - unregularized first half, frozen magnitude mask, retrain
    * inp    - r pruning rounds, retraining between rounds
    * pdc    - protect the top-q weights, DropConnect the rest at p0
    * pdo    - protect the top-q hidden nodes by row norm, Dropout the rest

``fit_with_regularizer`` drives every mode's epoch schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from core.constants import (
    AL1_DENOM_EPS,
    DEFAULT_SPARSITY_TARGET,
    REFERENCE_MODES,
    REG_MODES,
)
from core.helpers import ConfigError, make_log, reject_unknown
from core.numerics import ContractError, RandomSource, bernoulli_sample, ceil_count, sigmoid
from core.rbm import Gradient, RbmParams, TrainConfig, sgd_epoch
from core.units import units_for

EpochCallback = Callable[[int, str, RbmParams, float], None]


# ------------------------------------------------------------------ #
# Configuration and mask types
# ------------------------------------------------------------------ #

@dataclass
class RegConfig:
    """Regularizer choice and hyperparameters; only the fields the mode uses are read."""
    mode: str = 'none'
    lam: float = 0.0
    mu: float = 0.0
    p: float = 0.9
    p0: float = 0.5
    q: float = 0.8
    r: int = 3
    sparsity_target: float = DEFAULT_SPARSITY_TARGET
    sparsity_coef: float = 0.0
    rate_updates: int = 1

    _FIELDS = ('mode', 'lam', 'mu', 'p', 'p0', 'q', 'r',
               'sparsity_target', 'sparsity_coef', 'rate_updates')

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.mode not in REG_MODES:
            errors.append(f'reg.mode must be one of {", ".join(REG_MODES)} (got "{self.mode}").')
            return errors

        def open_unit(name: str):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                errors.append(f'reg.{name} must lie strictly inside (0, 1) (got {v}).')

        if self.mode in ('l2', 'l2al1') and self.lam < 0:
            errors.append(f'reg.lam must be >= 0 (got {self.lam}).')
        if self.mode == 'l2al1' and self.mu < 0:
            errors.append(f'reg.mu must be >= 0 (got {self.mu}).')
        if self.mode in ('do', 'dc', 'snp', 'inp'):
            open_unit('p')
        if self.mode in ('pdo', 'pdc'):
            open_unit('p0')
            open_unit('q')
            if self.rate_updates < 1:
                errors.append(f'reg.rate_updates must be >= 1 (got {self.rate_updates}).')
        if self.mode == 'inp' and self.r < 1:
            errors.append(f'reg.r must be >= 1 (got {self.r}).')
        if self.mode == 'sparsity':
            if not 0.0 <= self.sparsity_target <= 1.0:
                errors.append(f'reg.sparsity_target must lie in [0, 1] (got {self.sparsity_target}).')
            if self.sparsity_coef < 0:
                errors.append(f'reg.sparsity_coef must be >= 0 (got {self.sparsity_coef}).')
        return errors

    def phase_one(self) -> RegConfig:
        """Config for the reference phase of a two-phase mode."""
        if self.mode == 'l2al1':
            return RegConfig(mode='l2', lam=self.lam)
        return RegConfig(mode='none')

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RegConfig:
        reject_unknown('reg', d, cls._FIELDS)
        dflt = cls()
        try:
            return cls(
                mode=str(d.get('mode', dflt.mode)),
                lam=float(d.get('lam', dflt.lam)),
                mu=float(d.get('mu', dflt.mu)),
                p=float(d.get('p', dflt.p)),
                p0=float(d.get('p0', dflt.p0)),
                q=float(d.get('q', dflt.q)),
                r=int(d.get('r', dflt.r)),
                sparsity_target=float(d.get('sparsity_target', dflt.sparsity_target)),
                sparsity_coef=float(d.get('sparsity_coef', dflt.sparsity_coef)),
                rate_updates=int(d.get('rate_updates', dflt.rate_updates)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f'reg: {e}') from None


@dataclass
class MaskSpec:
    """Node mask (retain prob per hidden unit) or edge mask (per weight).

    ``frozen`` masks hold 0/1 entries and are returned as-is on every draw;
    the others are resampled as Bernoulli(retain_probs).
    """
    kind: str
    retain_probs: np.ndarray | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in ('node', 'edge', 'none'):
            raise ContractError(f'MaskSpec: kind must be node, edge or none (got "{self.kind}")')
        if self.kind == 'none':
            self.retain_probs = None
            return
        probs = np.array(self.retain_probs, dtype=np.float64)
        want = 1 if self.kind == 'node' else 2
        if probs.ndim != want:
            raise ContractError(f'MaskSpec: {self.kind} retain probabilities need {want} dimension(s)')
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0) or np.any(probs > 1.0):
            raise ContractError('MaskSpec: retain probabilities must lie in [0, 1]')
        if self.frozen and not np.all((probs == 0.0) | (probs == 1.0)):
            raise ContractError('MaskSpec: a frozen mask must be binary')
        self.retain_probs = probs

    @classmethod
    def none(cls) -> MaskSpec:
        return cls('none')

    @classmethod
    def dropout(cls, n_hidden: int, p: float) -> MaskSpec:
        return cls('node', np.full(n_hidden, float(p)))

    @classmethod
    def dropconnect(cls, n_hidden: int, n_visible: int, p: float) -> MaskSpec:
        return cls('edge', np.full((n_hidden, n_visible), float(p)))

    def check(self, params: RbmParams) -> None:
        if self.kind == 'node' and self.retain_probs.shape != (params.n_hidden,):
            raise ContractError(
                f'MaskSpec: node mask length {self.retain_probs.size} != hidden size {params.n_hidden}')
        if self.kind == 'edge' and self.retain_probs.shape != params.W.shape:
            raise ContractError(
                f'MaskSpec: edge mask shape {self.retain_probs.shape} != W shape {params.W.shape}')

    def draw(self, n_rows: int, rng: RandomSource) -> tuple[np.ndarray | None, np.ndarray | None]:
        """(node masks of shape (n_rows, I) or None, edge mask of shape (I, J) or None)."""
        if self.kind == 'node':
            return dropout_masks(self.retain_probs.size, self, n_rows, rng), None
        if self.kind == 'edge':
            return None, dropconnect_mask(*self.retain_probs.shape, self, rng)
        return None, None


@dataclass(frozen=True)
class ReferenceWeights:
    """An unregularized trained W_hat, read-only for the retraining phase."""
    W_hat: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.W_hat, dtype=np.float64)
        if w.ndim != 2:
            raise ContractError('ReferenceWeights: W_hat must be a matrix')
        w.setflags(write=False)
        object.__setattr__(self, 'W_hat', w)

    def check(self, params: RbmParams) -> None:
        if self.W_hat.shape != params.W.shape:
            raise ContractError(
                f'ReferenceWeights: shape {self.W_hat.shape} != live W shape {params.W.shape}')


# ------------------------------------------------------------------ #
# Penalties (over W only; biases are never penalized)
# ------------------------------------------------------------------ #

def l2_penalty(W, lam: float) -> float:
    """lam * sum(W^2)."""
    W = np.asarray(W, dtype=np.float64)
    return float(lam * np.sum(W * W))


def l2_penalty_gradient(W, lam: float) -> np.ndarray:
    if lam < 0:
        raise ContractError(f'l2 penalty: lam must be >= 0 (got {lam})')
    return 2.0 * lam * np.asarray(W, dtype=np.float64)


def _al1_denominator(W_hat) -> np.ndarray:
    if W_hat is None:
        raise ContractError('adaptive L1 needs reference weights W_hat (run the first phase first)')
    return np.maximum(np.abs(np.asarray(W_hat, dtype=np.float64)), AL1_DENOM_EPS)


def adaptive_l1_penalty(W, W_hat, mu: float) -> float:
    """(mu / IJ) * sum |W_ij| / |W_hat_ij|, with the denominator clamped at 1e-8."""
    W = np.asarray(W, dtype=np.float64)
    den = _al1_denominator(W_hat)
    if den.shape != W.shape:
        raise ContractError(f'adaptive L1: shape mismatch {W.shape} vs {den.shape}')
    return float(mu / W.size * np.sum(np.abs(W) / den))


def adaptive_l1_penalty_gradient(W, W_hat, mu: float) -> np.ndarray:
    """Subgradient (mu / IJ) * sign(W) / |W_hat| with sign(0) = 0."""
    if mu < 0:
        raise ContractError(f'adaptive L1: mu must be >= 0 (got {mu})')
    W = np.asarray(W, dtype=np.float64)
    den = _al1_denominator(W_hat)
    if den.shape != W.shape:
        raise ContractError(f'adaptive L1: shape mismatch {W.shape} vs {den.shape}')
    return mu / W.size * np.sign(W) / den


def l2_plus_al1(W, W_hat, lam: float, mu: float) -> np.ndarray:
    """Gradient of lam * ||W||^2 + adaptive L1; needs W_hat from the first phase."""
    if W_hat is None:
        raise ContractError('l2al1: no reference weights yet (phase one trains with L2 only)')
    return l2_penalty_gradient(W, lam) + adaptive_l1_penalty_gradient(W, W_hat, mu)


def l2_plus_al1_penalty(W, W_hat, lam: float, mu: float) -> float:
    return l2_penalty(W, lam) + adaptive_l1_penalty(W, W_hat, mu)


def _hidden_stats(params: RbmParams, batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    V = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    units = units_for(params.kind)
    s = np.broadcast_to(np.asarray(units.bias_scale(V), dtype=np.float64), (V.shape[0], 1))
    P = sigmoid(units.hidden_input(params.c, params.W, V))
    return V, s, P


def sparsity_penalty(params: RbmParams, batch, target: float, coef: float) -> float:
    """coef * sum_i (target - mean_n P(h_i = 1 | v_n))^2."""
    V, _, P = _hidden_stats(params, batch)
    if V.shape[0] == 0:
        return 0.0
    q = np.mean(P, axis=0)
    return float(coef * np.sum((target - q) ** 2))


def sparsity_penalty_gradient(params: RbmParams, batch, target: float, coef: float) -> Gradient:
    """Gradient of the sparsity penalty w.r.t. c and W (through the sigmoid); b untouched."""
    V, s, P = _hidden_stats(params, batch)
    grad = Gradient.zeros_like(params)
    n = V.shape[0]
    if n == 0 or coef == 0.0:
        return grad
    q = np.mean(P, axis=0)
    d = P * (1.0 - P) * (2.0 * coef * (q - target))[None, :] / n
    grad.c = np.sum(d * s, axis=0)
    grad.W = d.T @ V
    return grad


# ------------------------------------------------------------------ #
# Quantile masks and retain rates
# ------------------------------------------------------------------ #

def _top_count(values: np.ndarray, count: int) -> np.ndarray:
    """Boolean mask of the *count* largest entries; ties go to the lower
    row-major index."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind='stable')
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:count]] = True
    return keep.reshape(np.shape(values))


def _open_unit(name: str, value: float):
    if not 0.0 < value < 1.0:
        raise ContractError(f'{name} must lie strictly inside (0, 1) (got {value})')


def snp_mask(W_hat, p: float) -> MaskSpec:
    """Frozen edge mask keeping the ceil(p * IJ) largest |W_hat|."""
    _open_unit('p', p)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    keep = _top_count(np.abs(W_hat), ceil_count(p, W_hat.size))
    return MaskSpec('edge', keep.astype(np.float64), frozen=True)


def pdc_rates(W_hat, p0: float, q: float) -> MaskSpec:
    """Partial DropConnect rates: 1 on the ceil(q * IJ) largest |W_hat|, p0 elsewhere."""
    _open_unit('p0', p0)
    _open_unit('q', q)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    keep = _top_count(np.abs(W_hat), ceil_count(q, W_hat.size))
    return MaskSpec('edge', np.where(keep, 1.0, p0))


def pdo_rates(W_hat, p0: float, q: float) -> MaskSpec:
    """Partial Dropout rates: 1 on the ceil(q * I) hidden nodes with the
    largest Euclidean row norm of W_hat, p0 elsewhere."""
    _open_unit('p0', p0)
    _open_unit('q', q)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    norms = np.linalg.norm(W_hat, axis=1)
    keep = _top_count(norms, ceil_count(q, norms.size))
    return MaskSpec('node', np.where(keep, 1.0, p0))


def bound_term(W_hat, rates) -> float:
    """sum (1 - p_ij) |W_hat_ij|, the data-dependent part of the retraining bound."""
    rates = rates.retain_probs if isinstance(rates, MaskSpec) else np.asarray(rates)
    return float(np.sum((1.0 - rates) * np.abs(np.asarray(W_hat, dtype=np.float64))))


def dropout_masks(n_hidden: int, spec: float | MaskSpec, batch_size: int,
                  rng: RandomSource) -> np.ndarray:
    """One node mask per example, shape (batch_size, n_hidden)."""
    if isinstance(spec, MaskSpec):
        if spec.kind != 'node':
            raise ContractError(f'dropout_masks: needs a node MaskSpec (got {spec.kind})')
        probs = spec.retain_probs
        if spec.frozen:
            return np.tile(probs, (batch_size, 1))
    else:
        probs = np.full(n_hidden, float(spec))
    if probs.size != n_hidden:
        raise ContractError(f'dropout_masks: {probs.size} probabilities for {n_hidden} hidden units')
    return bernoulli_sample(np.broadcast_to(probs, (batch_size, n_hidden)), rng)


def dropconnect_mask(n_hidden: int, n_visible: int, spec: float | MaskSpec,
                     rng: RandomSource) -> np.ndarray:
    """One edge mask of shape (n_hidden, n_visible), shared by the whole minibatch."""
    if isinstance(spec, MaskSpec):
        if spec.kind != 'edge':
            raise ContractError(f'dropconnect_mask: needs an edge MaskSpec (got {spec.kind})')
        probs = spec.retain_probs
        if probs.shape != (n_hidden, n_visible):
            raise ContractError(f'dropconnect_mask: mask shape {probs.shape} != ({n_hidden}, {n_visible})')
        if spec.frozen:
            return probs.copy()
    else:
        probs = np.full((n_hidden, n_visible), float(spec))
    return bernoulli_sample(probs, rng)


# ------------------------------------------------------------------ #
# Regularizer (what sgd_epoch consumes)
# ------------------------------------------------------------------ #

class Regularizer:
    """Penalty and mask policy for one training phase.

    ``penalty(params, batch)`` returns ``(value, Gradient or None)``;
    ``project(params)`` zeroes weights removed by a frozen mask (in place).
    """

    def __init__(self, config: RegConfig | None = None, mask: MaskSpec | None = None,
                 reference: ReferenceWeights | None = None):
        self.config = config or RegConfig()
        self.mask = mask if mask is not None and mask.kind != 'none' else None
        self.reference = reference

    def __repr__(self) -> str:
        kind = self.mask.kind if self.mask else 'none'
        return f'Regularizer(mode={self.config.mode}, mask={kind})'

    @classmethod
    def from_config(cls, config: RegConfig, params: RbmParams,
                    reference: ReferenceWeights | None = None) -> Regularizer:
        errors = config.validate()
        if errors:
            raise ConfigError(errors)
        mode = config.mode
        if mode == 'do':
            return cls(config, MaskSpec.dropout(params.n_hidden, config.p))
        if mode == 'dc':
            return cls(config, MaskSpec.dropconnect(params.n_hidden, params.n_visible, config.p))
        if mode in REFERENCE_MODES and mode != 'l2al1':
            raise ContractError(f'mode "{mode}" builds its mask in an outer loop; use fit_with_regularizer')
        if mode == 'l2al1':
            if reference is None:
                raise ContractError('l2al1: no reference weights yet (phase one trains with L2 only)')
            reference.check(params)
        return cls(config, None, reference)

    def penalty(self, params: RbmParams, batch) -> tuple[float, Gradient | None]:
        cfg = self.config
        mode = cfg.mode
        if mode == 'l2':
            g = Gradient.zeros_like(params)
            g.W = l2_penalty_gradient(params.W, cfg.lam)
            return l2_penalty(params.W, cfg.lam), g
        if mode == 'l2al1':
            W_hat = self.reference.W_hat if self.reference is not None else None
            g = Gradient.zeros_like(params)
            g.W = l2_plus_al1(params.W, W_hat, cfg.lam, cfg.mu)
            return l2_plus_al1_penalty(params.W, W_hat, cfg.lam, cfg.mu), g
        if mode == 'sparsity':
            return (sparsity_penalty(params, batch, cfg.sparsity_target, cfg.sparsity_coef),
                    sparsity_penalty_gradient(params, batch, cfg.sparsity_target, cfg.sparsity_coef))
        return 0.0, None

    def project(self, params: RbmParams) -> None:
        if self.mask is not None and self.mask.frozen and self.mask.kind == 'edge':
            params.W = np.where(self.mask.retain_probs > 0.0, params.W, 0.0)


def as_regularizer(reg: RegConfig | Regularizer | None, params: RbmParams) -> Regularizer:
    if reg is None:
        return Regularizer()
    if isinstance(reg, Regularizer):
        if reg.mask is not None:
            reg.mask.check(params)
        return reg
    return Regularizer.from_config(reg, params)


# ------------------------------------------------------------------ #
# Outer loops
# ------------------------------------------------------------------ #

@dataclass
class FitResult:
    """Trained params plus the mask in force at the end (for inference rescaling)."""
    params: RbmParams
    mask: MaskSpec | None = None
    reference: ReferenceWeights | None = None
    history: list[MaskSpec] = field(default_factory=list)


def _train_epochs(params: RbmParams, data, config: TrainConfig, reg: Regularizer, rng: RandomSource,
                  n_epochs: int, start: int, phase: str, on_epoch: EpochCallback | None,
                  scales: tuple[float, float] = (1.0, 1.0)) -> RbmParams:
    # epoch e (0-based, global) always draws from rng.child(e)
    for e in range(start, start + n_epochs):
        params, pen = sgd_epoch(params, data, config, reg, rng.child(e), epoch=e + 1, scales=scales)
        if on_epoch is not None:
            on_epoch(e + 1, phase, params, pen)
    return params


def _segments(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def inp_loop(params: RbmParams, dataset, p: float, r: int, config: TrainConfig,
             rng: RandomSource | None = None, on_epoch: EpochCallback | None = None,
             on_log=None, start_epoch: int = 0,
             scales: tuple[float, float] = (1.0, 1.0)) -> FitResult:
    """Iterative pruning of already trained *params*.

    Round t keeps the IJ - floor(t * (IJ - ceil(p * IJ)) / r) largest |W|
    among the weights still retained, then retrains with that mask frozen.
    ``config.epochs`` is split evenly over the r rounds.
    """
    log = make_log(on_log)
    _open_unit('p', p)
    if r < 1:
        raise ContractError(f'inp_loop: r must be >= 1 (got {r})')
    rng = rng if rng is not None else RandomSource(config.seed)
    out = params.copy()
    total = out.W.size
    final = ceil_count(p, total)
    retained = np.ones(out.W.shape, dtype=bool)
    history: list[MaskSpec] = []
    mask: MaskSpec | None = None
    epoch = start_epoch
    for t, n_epochs in enumerate(_segments(config.epochs, r), start=1):
        keep_count = total - (t * (total - final)) // r
        if keep_count == int(retained.sum()):
            log('WARN', 'inp', f'round {t}/{r}: nothing left to cut at this granularity, round skipped')
        else:
            score = np.where(retained, np.abs(out.W), -1.0)
            retained = _top_count(score, keep_count)
            log('INFO', 'inp', f'round {t}/{r}: retaining {keep_count}/{total} weights')
        mask = MaskSpec('edge', retained.astype(np.float64), frozen=True)
        history.append(mask)
        reg = Regularizer(RegConfig(mode='inp', p=p, r=r), mask)
        reg.project(out)
        out = _train_epochs(out, dataset, config, reg, rng, n_epochs, epoch, f'prune{t}', on_epoch, scales)
        epoch += n_epochs
    return FitResult(out, mask, ReferenceWeights(params.W), history)


def snp_loop(params: RbmParams, dataset, p: float, config: TrainConfig,
             rng: RandomSource | None = None, on_epoch: EpochCallback | None = None,
             on_log=None, start_epoch: int = 0,
             scales: tuple[float, float] = (1.0, 1.0)) -> FitResult:
    """Simple pruning: one frozen magnitude mask from *params*, then retrain."""
    rng = rng if rng is not None else RandomSource(config.seed)
    mask = snp_mask(params.W, p)
    reg = Regularizer(RegConfig(mode='snp', p=p), mask)
    out = params.copy()
    reg.project(out)
    make_log(on_log)('INFO', 'snp', f'retaining {int(mask.retain_probs.sum())}/{out.W.size} weights')
    out = _train_epochs(out, dataset, config, reg, rng, config.epochs, start_epoch, 'retrain',
                        on_epoch, scales)
    return FitResult(out, mask, ReferenceWeights(params.W), [mask])


def _partial_loop(kind: str, params: RbmParams, dataset, p0: float, q: float, config: TrainConfig,
                  rate_updates: int, rng: RandomSource | None, on_epoch, on_log,
                  start_epoch: int, scales: tuple[float, float]) -> FitResult:
    log = make_log(on_log)
    if rate_updates < 1:
        raise ContractError(f'{kind}_loop: rate_updates must be >= 1 (got {rate_updates})')
    rates_fn = pdc_rates if kind == 'pdc' else pdo_rates
    rng = rng if rng is not None else RandomSource(config.seed)
    out = params.copy()
    history: list[MaskSpec] = []
    epoch = start_epoch
    for u, n_epochs in enumerate(_segments(config.epochs, rate_updates), start=1):
        mask = rates_fn(out.W, p0, q)
        history.append(mask)
        protected = int(np.sum(mask.retain_probs == 1.0))
        msg = f'rate update {u}/{rate_updates}: {protected}/{mask.retain_probs.size} protected'
        if kind == 'pdc':
            msg += f', bound term {bound_term(out.W, mask):.6g}'
        log('INFO', kind, msg)
        reg = Regularizer(RegConfig(mode=kind, p0=p0, q=q, rate_updates=rate_updates), mask)
        out = _train_epochs(out, dataset, config, reg, rng, n_epochs, epoch, 'retrain', on_epoch, scales)
        epoch += n_epochs
    return FitResult(out, history[-1], ReferenceWeights(params.W), history)


def pdc_loop(params: RbmParams, dataset, p0: float, q: float, config: TrainConfig,
             rate_updates: int = 1, rng: RandomSource | None = None,
             on_epoch: EpochCallback | None = None, on_log=None, start_epoch: int = 0,
             scales: tuple[float, float] = (1.0, 1.0)) -> FitResult:
    """Partial DropConnect retraining of trained *params*.

    Each rate update recomputes the retain rates from the current W and
    retrains with DropConnect for its share of ``config.epochs``.
    """
    return _partial_loop('pdc', params, dataset, p0, q, config, rate_updates, rng,
                         on_epoch, on_log, start_epoch, scales)


def pdo_loop(params: RbmParams, dataset, p0: float, q: float, config: TrainConfig,
             rate_updates: int = 1, rng: RandomSource | None = None,
             on_epoch: EpochCallback | None = None, on_log=None, start_epoch: int = 0,
             scales: tuple[float, float] = (1.0, 1.0)) -> FitResult:
    """Partial Dropout retraining; same schedule as pdc_loop with node rates."""
    return _partial_loop('pdo', params, dataset, p0, q, config, rate_updates, rng,
                         on_epoch, on_log, start_epoch, scales)


def fit_with_regularizer(params: RbmParams, dataset, config: TrainConfig, reg: RegConfig,
                         rng: RandomSource | None = None, on_epoch: EpochCallback | None = None,
                         on_log=None, scales: tuple[float, float] = (1.0, 1.0)) -> FitResult:
    """Train *params* for ``config.epochs`` epochs under any mode.

    Reference modes spend the first half (inp: the first of r + 1 equal
    segments) without the mode's regularizer to produce W_hat, then run
    their outer loop. Epoch e always uses ``rng.child(e)``, so a mask mode
    whose masks are all ones reproduces plain training exactly.
    """
    errors = config.validate() + reg.validate()
    if errors:
        raise ConfigError(errors)
    log = make_log(on_log)
    rng = rng if rng is not None else RandomSource(config.seed)
    mode = reg.mode

    if mode not in REFERENCE_MODES:
        regularizer = Regularizer.from_config(reg, params)
        log('INFO', 'fit', f'mode={mode} epochs={config.epochs} lr={config.learning_rate:g} '
                           f'cd_k={config.cd_k}')
        out = _train_epochs(params.copy(), dataset, config, regularizer, rng, config.epochs, 0,
                            'train', on_epoch, scales)
        return FitResult(out, regularizer.mask)

    if mode == 'inp':
        first = config.epochs // (reg.r + 1)
    else:
        first = config.epochs // 2
    rest = config.epochs - first
    log('INFO', 'fit', f'mode={mode}: {first} reference epochs, {rest} retraining epochs')
    phase_one = Regularizer.from_config(reg.phase_one(), params)
    ref_params = _train_epochs(params.copy(), dataset, config, phase_one, rng, first, 0,
                               'reference', on_epoch, scales)
    reference = ReferenceWeights(ref_params.W)
    rest_config = replace(config, epochs=rest)

    if mode == 'l2al1':
        regularizer = Regularizer.from_config(reg, ref_params, reference)
        out = _train_epochs(ref_params, dataset, config, regularizer, rng, rest, first,
                            'retrain', on_epoch, scales)
        return FitResult(out, None, reference)
    if mode == 'snp':
        result = snp_loop(ref_params, dataset, reg.p, rest_config, rng, on_epoch, on_log, first, scales)
    elif mode == 'inp':
        result = inp_loop(ref_params, dataset, reg.p, reg.r, rest_config, rng, on_epoch, on_log, first, scales)
    elif mode == 'pdc':
        result = pdc_loop(ref_params, dataset, reg.p0, reg.q, rest_config, reg.rate_updates, rng,
                          on_epoch, on_log, first, scales)
    else:
        result = pdo_loop(ref_params, dataset, reg.p0, reg.q, rest_config, reg.rate_updates, rng,
                          on_epoch, on_log, first, scales)
    return result


def inference_params(params: RbmParams, mask: MaskSpec | None) -> RbmParams:
    """Mean network for feature extraction: W scaled by the expected mask.

    Dropout scales row i by p_i, DropConnect entry (i, j) by p_ij; a frozen
    pruning mask zeroes the removed weights.
    """
    out = params.copy()
    if mask is None or mask.kind == 'none':
        return out
    mask.check(params)
    if mask.kind == 'node':
        out.W = out.W * mask.retain_probs[:, None]
    else:
        out.W = out.W * mask.retain_probs
    return out

