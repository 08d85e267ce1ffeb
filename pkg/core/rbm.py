# -*- coding: utf-8 -*-
"""
core.rbm - Restricted Boltzmann machine core.

Energy, free energy, conditionals, Gibbs transitions, CD-k gradient
estimation, the minibatch SGD epoch, and exact enumeration oracles for
tiny models. Layer kind (bernoulli / gaussian / softmax counts) is carried
on the parameters and dispatched through core.units.

Gradient convention: every gradient returned here is the gradient of the
mean negative log-likelihood, i.e. ``dF(data)/dtheta - E_model[dF/dtheta]``.
Parameters move by ``-learning_rate * gradient``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.special import gammaln, logsumexp

from core.constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_CD_K,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    DIVERGENCE_LIMIT,
    ENUMERATION_LIMIT,
    LAYER_KINDS,
)
from core.helpers import ConfigError, reject_unknown
from core.numerics import (
    ContractError,
    RandomSource,
    enumerate_binary,
    enumerate_compositions,
    hadamard,
    log1p_exp,
    sigmoid,
)
from core.units import units_for

if TYPE_CHECKING:
    from core.regularizers import MaskSpec, RegConfig, Regularizer


class EnumerationLimitError(ContractError):
    """Model too large for exact enumeration."""


class TrainingDivergedError(RuntimeError):
    """A parameter left the sane range during SGD."""


# ------------------------------------------------------------------ #
# Parameter containers
# ------------------------------------------------------------------ #

@dataclass
class RbmParams:
    """theta = (b, c, W): visible bias (J,), hidden bias (I,), weights (I, J)."""
    b: np.ndarray
    c: np.ndarray
    W: np.ndarray
    kind: str = 'bernoulli'

    def __post_init__(self):
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.c = np.array(self.c, dtype=np.float64).reshape(-1)
        self.W = np.array(self.W, dtype=np.float64)
        if self.kind not in LAYER_KINDS:
            raise ContractError(f'unknown layer kind "{self.kind}"')
        if self.W.ndim != 2 or self.W.shape != (self.c.size, self.b.size):
            raise ContractError(
                f'RbmParams: W must be ({self.c.size}, {self.b.size}), got {self.W.shape}')

    @property
    def n_visible(self) -> int:
        return self.b.size

    @property
    def n_hidden(self) -> int:
        return self.c.size

    def copy(self) -> RbmParams:
        return RbmParams(self.b.copy(), self.c.copy(), self.W.copy(), self.kind)

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.b), initial=0.0),
                         np.max(np.abs(self.c), initial=0.0),
                         np.max(np.abs(self.W), initial=0.0)))

    def equals(self, other: RbmParams) -> bool:
        """Bit-exact equality (kind, shapes and every entry)."""
        return (self.kind == other.kind
                and np.array_equal(self.b, other.b)
                and np.array_equal(self.c, other.c)
                and np.array_equal(self.W, other.W))

    @classmethod
    def zeros(cls, n_hidden: int, n_visible: int, kind: str = 'bernoulli') -> RbmParams:
        return cls(np.zeros(n_visible), np.zeros(n_hidden), np.zeros((n_hidden, n_visible)), kind)

    @classmethod
    def init(cls, n_hidden: int, n_visible: int, rng: RandomSource,
             kind: str = 'bernoulli') -> RbmParams:
        """Biases zero. Bernoulli layers draw W ~ U(-r, r) with
        r = 4 sqrt(6 / (I + J)); gaussian and softmax layers use N(0, 0.01^2).
        """
        if kind == 'bernoulli':
            r = 4.0 * np.sqrt(6.0 / (n_hidden + n_visible))
            W = rng.generator.uniform(-r, r, size=(n_hidden, n_visible))
        else:
            W = 0.01 * rng.generator.standard_normal((n_hidden, n_visible))
        return cls(np.zeros(n_visible), np.zeros(n_hidden), W, kind)


@dataclass
class Gradient:
    """Gradient over (b, c, W), same shapes as RbmParams."""
    b: np.ndarray
    c: np.ndarray
    W: np.ndarray

    def __add__(self, other: Gradient) -> Gradient:
        return Gradient(self.b + other.b, self.c + other.c, self.W + other.W)

    def __sub__(self, other: Gradient) -> Gradient:
        return Gradient(self.b - other.b, self.c - other.c, self.W - other.W)

    def scaled(self, s: float) -> Gradient:
        return Gradient(self.b * s, self.c * s, self.W * s)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.b.ravel(), self.c.ravel(), self.W.ravel()])

    @classmethod
    def zeros_like(cls, params: RbmParams) -> Gradient:
        return cls(np.zeros_like(params.b), np.zeros_like(params.c), np.zeros_like(params.W))


@dataclass
class GibbsChain:
    """Chain state; ``v``/``h`` may hold one chain (1-D) or many (rows).

    Masks come from ``mask_rng``, a stream separate from ``rng`` that is
    created on the first masked step and carried along with the chain.
    """
    v: np.ndarray
    h: np.ndarray
    rng: RandomSource
    mask_rng: RandomSource | None = None


@dataclass
class TrainConfig:
    """CD-k minibatch SGD settings for one layer."""
    cd_k: int = DEFAULT_CD_K
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    seed: int = 0

    _FIELDS = ('cd_k', 'learning_rate', 'batch_size', 'epochs', 'seed')

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.cd_k < 1:
            errors.append(f'cd_k must be >= 1 (got {self.cd_k}).')
        if self.learning_rate < 0:
            errors.append(f'learning_rate must be >= 0 (got {self.learning_rate}).')
        if self.batch_size < 1:
            errors.append(f'batch_size must be >= 1 (got {self.batch_size}).')
        if self.epochs < 0:
            errors.append(f'epochs must be >= 0 (got {self.epochs}).')
        return errors

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        reject_unknown('train', d, cls._FIELDS)
        try:
            return cls(
                cd_k=int(d.get('cd_k', DEFAULT_CD_K)),
                learning_rate=float(d.get('learning_rate', DEFAULT_LEARNING_RATE)),
                batch_size=int(d.get('batch_size', DEFAULT_BATCH_SIZE)),
                epochs=int(d.get('epochs', DEFAULT_EPOCHS)),
                seed=int(d.get('seed', 0)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f'train: {e}') from None


# ------------------------------------------------------------------ #
# Internal helpers
# ------------------------------------------------------------------ #

def _rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return np.atleast_2d(x), x.ndim == 1


def _unrow(x: np.ndarray, single: bool):
    if single:
        return float(x[0]) if x.ndim == 1 else x[0]
    return x


def _check_width(params: RbmParams, v: np.ndarray, width: int, what: str):
    if v.shape[-1] != width:
        raise ContractError(f'{what}: expected last dimension {width}, got {v.shape[-1]}')


def effective_weights(params: RbmParams, edge_mask: np.ndarray | None = None) -> np.ndarray:
    """``m * W`` under a DropConnect edge mask, else W."""
    if edge_mask is None:
        return params.W
    return hadamard(edge_mask, params.W)


# ------------------------------------------------------------------ #
# Energies and conditionals
# ------------------------------------------------------------------ #

def energy(params: RbmParams, v, h):
    """E(v, h) = visible term - scale(v) c.h - h.W v."""
    V, single = _rows(v)
    H, _ = _rows(h)
    _check_width(params, V, params.n_visible, 'energy')
    _check_width(params, H, params.n_hidden, 'energy')
    units = units_for(params.kind)
    s = units.bias_scale(V)
    e = units.visible_energy(params.b, V) - np.sum(s * H * params.c, axis=1) \
        - np.sum((H @ params.W) * V, axis=1)
    return _unrow(e, single)


def free_energy(params: RbmParams, v, node_mask=None, edge_mask=None):
    """F(v) = visible term - sum_i m_i log(1 + exp(scale(v) c_i + W_i. v)).

    With a node mask this is the Dropout free energy; with an edge mask W is
    replaced by m * W.
    """
    V, single = _rows(v)
    _check_width(params, V, params.n_visible, 'free_energy')
    units = units_for(params.kind)
    W = effective_weights(params, edge_mask)
    sp = log1p_exp(units.hidden_input(params.c, W, V))
    if node_mask is not None:
        sp = sp * node_mask
    f = units.visible_energy(params.b, V) - np.sum(sp, axis=1)
    return _unrow(f, single)


def cond_h_given_v(params: RbmParams, v, edge_mask=None) -> np.ndarray:
    """P(h_i = 1 | v) = sigmoid(scale(v) c_i + W_i. v)."""
    V, single = _rows(v)
    _check_width(params, V, params.n_visible, 'cond_h_given_v')
    units = units_for(params.kind)
    p = sigmoid(units.hidden_input(params.c, effective_weights(params, edge_mask), V))
    return p[0] if single else p


def cond_v_given_h(params: RbmParams, h, edge_mask=None, v_ref=None) -> np.ndarray:
    """Mean of v given h (probabilities, Gaussian means or expected counts).

    Softmax-count layers need *v_ref* to know each document's length.
    """
    H, single = _rows(h)
    _check_width(params, H, params.n_hidden, 'cond_v_given_h')
    if params.kind == 'softmax':
        if v_ref is None:
            raise ContractError('cond_v_given_h: softmax layers need v_ref (document lengths)')
        v_ref = np.atleast_2d(np.asarray(v_ref, dtype=np.float64))
    units = units_for(params.kind)
    m = units.visible_mean(params.b, effective_weights(params, edge_mask), H, v_ref)
    return m[0] if single else m


def _draw_masks(mask: MaskSpec | None, n_rows: int, rng: RandomSource):
    if mask is None:
        return None, None
    return mask.draw(n_rows, rng)


# ------------------------------------------------------------------ #
# Gibbs sampling
# ------------------------------------------------------------------ #

def gibbs_step(chain: GibbsChain, params: RbmParams, mask: MaskSpec | None = None,
               mask_rng: RandomSource | None = None) -> GibbsChain:
    """One block Gibbs sweep: h ~ P(h | v), then v ~ P(v | h).

    Under a node mask the dropped hidden units stay at 0; under an edge mask
    both conditionals use m * W. Masks are drawn from *mask_rng*, else from the
    chain's mask stream (``chain.rng.child(1)`` on first use), never from
    the stream that drives the Gibbs draws.
    """
    V, single = _rows(chain.v)
    _check_width(params, V, params.n_visible, 'gibbs_step')
    gen = chain.rng.generator
    if mask_rng is None and mask is not None:
        mask_rng = chain.mask_rng or chain.rng.child(1)
    node, edge = _draw_masks(mask, V.shape[0], mask_rng)
    carried = chain.mask_rng if mask_rng is None else mask_rng
    units = units_for(params.kind)
    W = effective_weights(params, edge)
    hp = sigmoid(units.hidden_input(params.c, W, V))
    if node is not None:
        hp = hp * node
    H = (gen.random(hp.shape) < hp).astype(np.float64)
    vm = units.visible_mean(params.b, W, H, V)
    V2 = units.sample_visible(vm, gen)
    if single:
        return GibbsChain(V2[0], H[0], chain.rng, carried)
    return GibbsChain(V2, H, chain.rng, carried)


def free_energy_grad(params: RbmParams, v, weights=None, node_mask=None, edge_mask=None,
                     up: float = 1.0) -> Gradient:
    """Weighted average over rows of dF(v)/dtheta (uniform weights by default)."""
    V, _ = _rows(v)
    units = units_for(params.kind)
    W = effective_weights(params, edge_mask)
    H = sigmoid(units.hidden_input(params.c, W * up if up != 1.0 else W, V))
    if node_mask is not None:
        H = H * node_mask
    n = V.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    s = units.bias_scale(V)
    gb = w @ units.grad_b(params.b, V)
    gc = -(w @ (s * H))
    gW = -((H * w[:, None]).T @ V)
    if edge_mask is not None:
        gW = gW * edge_mask
    return Gradient(gb, gc, gW)


def cd_gradient(params: RbmParams, minibatch, k: int, mask: MaskSpec | None = None,
                rng: RandomSource | None = None, scales: tuple[float, float] = (1.0, 1.0)) -> Gradient:
    """CD-k estimate of the mean negative log-likelihood gradient.

    Hidden states along the chain are sampled; the last visible half-step
    uses the conditional mean. Node masks are drawn one per example, an edge
    mask once per call (i.e. per minibatch), from ``rng.child(1)``; Gibbs
    draws come from ``rng.child(0)``. *scales* multiplies W on the upward and
    downward pass (DBM pretraining uses 2 on the doubled side).
    """
    if k < 1:
        raise ContractError(f'cd_gradient: k must be >= 1 (got {k})')
    V0, _ = _rows(minibatch)
    if V0.shape[0] == 0:
        raise ContractError('cd_gradient: empty minibatch')
    _check_width(params, V0, params.n_visible, 'cd_gradient')
    rng = rng if rng is not None else RandomSource(0)
    gen = rng.child(0).generator
    node, edge = _draw_masks(mask, V0.shape[0], rng.child(1))

    up, down = scales
    units = units_for(params.kind)
    W = effective_weights(params, edge)
    W_up = W * up if up != 1.0 else W
    W_dn = W * down if down != 1.0 else W

    hp = sigmoid(units.hidden_input(params.c, W_up, V0))
    if node is not None:
        hp = hp * node
    v = V0
    for step in range(k):
        h = (gen.random(hp.shape) < hp).astype(np.float64)
        vm = units.visible_mean(params.b, W_dn, h, V0)
        if step == k - 1:
            v = vm
            break
        v = units.sample_visible(vm, gen)
        hp = sigmoid(units.hidden_input(params.c, W_up, v))
        if node is not None:
            hp = hp * node

    data = free_energy_grad(params, V0, node_mask=node, edge_mask=edge, up=up)
    recon = free_energy_grad(params, v, node_mask=node, edge_mask=edge, up=up)
    return data - recon


# ------------------------------------------------------------------ #
# SGD
# ------------------------------------------------------------------ #

def check_divergence(params: RbmParams, epoch: int, batch: int):
    for name in ('b', 'c', 'W'):
        arr = getattr(params, name)
        if arr.size == 0:
            continue
        top = float(np.max(np.abs(arr)))
        if not np.isfinite(top) or top > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(
                f'parameter {name} diverged (max |{name}| = {top:.4g} > {DIVERGENCE_LIMIT:g}) '
                f'at epoch {epoch}, minibatch {batch}; lower the learning rate')


def sgd_epoch(params: RbmParams, dataset, config: TrainConfig,
              reg: RegConfig | Regularizer | None = None, rng: RandomSource | None = None,
              epoch: int = 0, scales: tuple[float, float] = (1.0, 1.0)) -> tuple[RbmParams, float]:
    """One pass over shuffled minibatches.

    update = -lr * (cd_gradient + penalty gradient). Returns the new params
    and the mean penalty value seen over the epoch's minibatches.
    """
    from core.regularizers import as_regularizer

    regularizer = as_regularizer(reg, params)
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    rng = rng if rng is not None else RandomSource(config.seed)
    n = data.shape[0]
    out = params.copy()
    regularizer.project(out)
    lr = float(config.learning_rate)
    penalties: list[float] = []
    order = rng.child(0).generator.permutation(n) if n else np.zeros(0, dtype=np.int64)
    for t, start in enumerate(range(0, n, config.batch_size)):
        batch = data[order[start:start + config.batch_size]]
        g = cd_gradient(out, batch, config.cd_k, regularizer.mask, rng.child(t + 1), scales=scales)
        value, pg = regularizer.penalty(out, batch)
        if pg is not None:
            g = g + pg
        out.b -= lr * g.b
        out.c -= lr * g.c
        out.W -= lr * g.W
        regularizer.project(out)
        check_divergence(out, epoch, t)
        penalties.append(value)
    if not penalties:
        penalties.append(regularizer.penalty(out, data[:0])[0])
    return out, float(np.mean(penalties))


# ------------------------------------------------------------------ #
# Exact enumeration oracles
# ------------------------------------------------------------------ #

def _enum_guard(params: RbmParams):
    total = params.n_visible + params.n_hidden
    if total > ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f'exact enumeration needs I + J <= {ENUMERATION_LIMIT} (got {total})')


def _doc_length(data) -> int:
    lengths = np.unique(np.round(np.sum(np.atleast_2d(data), axis=1)).astype(np.int64))
    if lengths.size != 1:
        raise ContractError('exact softmax oracles need documents of a single length')
    return int(lengths[0])


def log_multinomial(v) -> np.ndarray:
    """log(D! / prod_j v_j!) per row of count vectors."""
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    return gammaln(np.sum(V, axis=1) + 1.0) - np.sum(gammaln(V + 1.0), axis=1)


def visible_states(params: RbmParams, doc_length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All visible states with their log base measure (0, or log multinomial coefficient)."""
    if params.kind == 'bernoulli':
        V = enumerate_binary(params.n_visible)
        return V, np.zeros(V.shape[0])
    if params.kind == 'softmax':
        if doc_length is None:
            raise ContractError('softmax enumeration needs doc_length')
        V = enumerate_compositions(doc_length, params.n_visible)
        return V, log_multinomial(V)
    raise ContractError('gaussian visibles are continuous; enumerate hidden states instead')


def exact_visible_distribution(params: RbmParams, doc_length: int | None = None):
    """(states, probabilities) of the visible marginal by enumeration."""
    _enum_guard(params)
    V, base = visible_states(params, doc_length)
    logp = base - free_energy(params, V)
    logp = logp - logsumexp(logp)
    return V, np.exp(logp)


def _gaussian_hidden_terms(params: RbmParams):
    H = enumerate_binary(params.n_hidden)
    M = params.b + H @ params.W
    logw = H @ params.c + 0.5 * np.sum(M ** 2, axis=1) - 0.5 * float(params.b @ params.b)
    return H, M, logw


def exact_log_partition(params: RbmParams, doc_length: int | None = None) -> float:
    """log Z by enumeration (bernoulli: 2**J free energies; gaussian: 2**I
    hidden states with the visible integral done analytically; softmax: all
    count vectors of length *doc_length*)."""
    _enum_guard(params)
    if params.kind == 'gaussian':
        _, _, logw = _gaussian_hidden_terms(params)
        return float(0.5 * params.n_visible * np.log(2.0 * np.pi) + logsumexp(logw))
    V, base = visible_states(params, doc_length)
    return float(logsumexp(base - free_energy(params, V)))


def exact_log_likelihood(params: RbmParams, dataset) -> float:
    """Exact mean log-likelihood of the rows of *dataset*."""
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    doc_length = _doc_length(data) if params.kind == 'softmax' else None
    log_z = exact_log_partition(params, doc_length)
    ll = -free_energy(params, data)
    if params.kind == 'softmax':
        ll = ll + log_multinomial(data)
    return float(np.mean(ll) - log_z)


def exact_gradient(params: RbmParams, dataset) -> Gradient:
    """Exact gradient of the mean negative log-likelihood:
    mean dF(v_n)/dtheta - sum_v P(v) dF(v)/dtheta."""
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    _enum_guard(params)
    data_term = free_energy_grad(params, data)
    if params.kind == 'gaussian':
        H, M, logw = _gaussian_hidden_terms(params)
        p = np.exp(logw - logsumexp(logw))
        # E_model[dE/dtheta] with E[v | h] = b + W^T h
        model = Gradient(
            -(p @ (H @ params.W)),
            -(p @ H),
            -((H * p[:, None]).T @ M),
        )
        return data_term - model
    doc_length = _doc_length(data) if params.kind == 'softmax' else None
    V, P = exact_visible_distribution(params, doc_length)
    return data_term - free_energy_grad(params, V, weights=P)


def sample_exact(params: RbmParams, n: int, rng: RandomSource) -> np.ndarray:
    """Draw *n* exact samples from an enumerable binary RBM by inverse CDF."""
    V, P = exact_visible_distribution(params)
    cdf = np.cumsum(P)
    u = rng.generator.random(n) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side='right'), V.shape[0] - 1)
    return V[idx].copy()
