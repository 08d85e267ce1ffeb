# -*- coding: utf-8 -*-
"""
core.deep_models - Layer-stacked models and single-layer variants.

LayerStack holds the trained layers of a DBN or DBM, bottom first. Layer l
maps H^{l-1} -> H^l (H^0 is the visible layer); only the bottom layer may
have gaussian or softmax-count visibles.

DBM convention: unit layer 0 uses ``layers[0].b``; hidden layer l uses
``layers[l-1].c``. The ``b`` vectors of layers above the bottom are held
at zero once the stack is composed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import xlogy

from core.constants import DEFAULT_DBM_GIBBS_STEPS, DEFAULT_DBM_MF_ITERS
from core.helpers import make_log
from core.numerics import ContractError, RandomSource, bernoulli_sample, sigmoid
from core.rbm import Gradient, RbmParams, TrainConfig, check_divergence, cond_h_given_v
from core.regularizers import (
    FitResult,
    MaskSpec,
    RegConfig,
    fit_with_regularizer,
    inference_params,
    l2_penalty,
    l2_penalty_gradient,
)
from core.units import units_for

LayerEpochCallback = Callable[[int, str, RbmParams, float], None]


# ------------------------------------------------------------------ #
# LayerStack
# ------------------------------------------------------------------ #

@dataclass
class LayerStack:
    """Ordered layers plus the mask each was trained under (for the mean network)."""
    layers: list[RbmParams]
    masks: list[MaskSpec | None] = field(default_factory=list)
    flavor: str = 'dbn'

    def __post_init__(self):
        if not self.masks:
            self.masks = [None] * len(self.layers)
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ContractError('LayerStack: at least one layer is required')
        if len(self.masks) != len(self.layers):
            raise ContractError('LayerStack: one mask entry per layer is required')
        for l in range(1, len(self.layers)):
            below, above = self.layers[l - 1], self.layers[l]
            if below.n_hidden != above.n_visible:
                raise ContractError(
                    f'LayerStack: layer {l} has {below.n_hidden} hidden units but layer {l + 1} '
                    f'expects {above.n_visible} inputs')
            if above.kind != 'bernoulli':
                raise ContractError(f'LayerStack: only the bottom layer may be {above.kind}')
        if self.flavor not in ('dbn', 'dbm'):
            raise ContractError(f'LayerStack: unknown flavor "{self.flavor}"')

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_visible] + [p.n_hidden for p in self.layers]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def top(self) -> RbmParams:
        return self.layers[-1]

    def copy(self) -> LayerStack:
        return LayerStack([p.copy() for p in self.layers], list(self.masks), self.flavor)

    def mean_network(self) -> list[RbmParams]:
        """Layers with the expected-mask weight scaling applied."""
        return [inference_params(p, m) for p, m in zip(self.layers, self.masks)]


def _per_layer(value, n: int, name: str) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ContractError(f'{name}: {len(value)} entries for {n} layers')
        return list(value)
    return [value] * n


# ------------------------------------------------------------------ #
# Single-layer training
# ------------------------------------------------------------------ #

def train_rbm(data, n_hidden: int, config: TrainConfig, reg: RegConfig | None = None,
              rng: RandomSource | None = None, kind: str = 'bernoulli',
              on_epoch: LayerEpochCallback | None = None, on_log=None,
              scales: tuple[float, float] = (1.0, 1.0)) -> FitResult:
    """Initialize one layer from ``rng.child(0)`` and fit it with ``rng.child(1)``."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    rng = rng if rng is not None else RandomSource(config.seed)
    params = RbmParams.init(n_hidden, data.shape[1], rng.child(0), kind)
    return fit_with_regularizer(params, data, config, reg or RegConfig(), rng.child(1),
                                on_epoch, on_log, scales)


def rsm_train(counts, n_hidden: int, config: TrainConfig, reg: RegConfig | None = None,
              rng: RandomSource | None = None, on_epoch=None, on_log=None) -> FitResult:
    """Replicated softmax on a document x vocabulary count matrix."""
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise ContractError('rsm_train: word counts must be non-negative integers')
    if np.any(counts.sum(axis=1) == 0):
        raise ContractError('rsm_train: empty documents are not allowed')
    return train_rbm(counts, n_hidden, config, reg, rng, 'softmax', on_epoch, on_log)


def grbm_train(data, n_hidden: int, config: TrainConfig, reg: RegConfig | None = None,
               rng: RandomSource | None = None, on_epoch=None, on_log=None) -> FitResult:
    """Unit-variance Gaussian RBM; expects standardized features."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    check_standardized(data, on_log)
    return train_rbm(data, n_hidden, config, reg, rng, 'gaussian', on_epoch, on_log)


def check_standardized(data: np.ndarray, on_log=None) -> bool:
    """Warn when any feature variance falls outside [0.5, 2]."""
    if data.shape[0] < 2:
        return True
    var = np.var(data, axis=0)
    bad = np.flatnonzero((var < 0.5) | (var > 2.0))
    if bad.size:
        make_log(on_log)('WARN', 'grbm', f'{bad.size} feature(s) not standardized '
                                         f'(variance outside [0.5, 2], first at column {bad[0]})')
        return False
    return True


# ------------------------------------------------------------------ #
# DBN
# ------------------------------------------------------------------ #

def _layer_callback(on_epoch, layer: int):
    if on_epoch is None:
        return None

    def cb(epoch, phase, params, penalty):
        on_epoch(epoch, f'layer{layer}:{phase}', params, penalty)

    return cb


def propagate(params: RbmParams, mask: MaskSpec | None, X: np.ndarray, up: float = 1.0) -> np.ndarray:
    """Mean hidden activations of one layer's mean network."""
    p = inference_params(params, mask)
    if up != 1.0:
        p.W = p.W * up
    return cond_h_given_v(p, X)


def dbn_pretrain(dataset, layer_sizes: list[int], train_configs, reg_configs=None,
                 rng: RandomSource | None = None, first_kind: str = 'bernoulli',
                 sample_inputs: bool = False, on_epoch=None, on_log=None) -> LayerStack:
    """Greedy layer-wise training.

    Layer l + 1 is trained on the mean activations of layer l (its mean
    network when layer l was trained under a mask). ``train_configs`` and
    ``reg_configs`` are one object for all layers or a list per layer.
    """
    if not layer_sizes:
        raise ContractError('dbn_pretrain: at least one hidden layer is required')
    n = len(layer_sizes)
    configs = _per_layer(train_configs, n, 'train_configs')
    regs = _per_layer(reg_configs or RegConfig(), n, 'reg_configs')
    log = make_log(on_log)
    rng = rng if rng is not None else RandomSource(configs[0].seed)
    X = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    layers: list[RbmParams] = []
    masks: list[MaskSpec | None] = []
    for l, size in enumerate(layer_sizes):
        kind = first_kind if l == 0 else 'bernoulli'
        log('INFO', 'dbn', f'layer {l + 1}/{n}: {X.shape[1]} -> {size} ({kind}, reg={regs[l].mode})')
        res = train_rbm(X, size, configs[l], regs[l], rng.child(l), kind,
                        _layer_callback(on_epoch, l + 1), on_log)
        layers.append(res.params)
        masks.append(res.mask)
        if l + 1 < n:
            X = propagate(res.params, res.mask, X)
            if sample_inputs:
                X = bernoulli_sample(X, rng.child(l).child(2))
    return LayerStack(layers, masks, 'dbn')


def add_symmetric_layer(stack: LayerStack) -> LayerStack:
    """Stack a layer initialized as the transpose of the current top layer."""
    top = stack.top
    if top.kind != 'bernoulli':
        raise ContractError(f'add_symmetric_layer: top layer must be bernoulli (got {top.kind})')
    new = RbmParams(b=top.c.copy(), c=top.b.copy(), W=top.W.T.copy(), kind='bernoulli')
    return LayerStack([p.copy() for p in stack.layers] + [new], list(stack.masks) + [None], stack.flavor)


def grow_top_layer(stack: LayerStack, n_new: int = 1) -> LayerStack:
    """Append *n_new* hidden units with zero weights and bias to the top layer."""
    out = stack.copy()
    top = out.layers[-1]
    out.layers[-1] = RbmParams(top.b, np.concatenate([top.c, np.zeros(n_new)]),
                               np.vstack([top.W, np.zeros((n_new, top.n_visible))]), top.kind)
    mask = out.masks[-1]
    if mask is not None and mask.kind == 'node':
        out.masks[-1] = MaskSpec('node', np.concatenate([mask.retain_probs, np.ones(n_new)]), mask.frozen)
    elif mask is not None and mask.kind == 'edge':
        out.masks[-1] = MaskSpec('edge', np.vstack([mask.retain_probs, np.ones((n_new, top.n_visible))]),
                                 mask.frozen)
    return out


def train_top_layer(stack: LayerStack, dataset, config: TrainConfig, reg: RegConfig | None = None,
                    rng: RandomSource | None = None, on_epoch=None, on_log=None) -> LayerStack:
    """Continue training the top layer of a DBN on the activations below it."""
    X = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    for params, mask in zip(stack.layers[:-1], stack.masks[:-1]):
        X = propagate(params, mask, X)
    rng = rng if rng is not None else RandomSource(config.seed)
    res = fit_with_regularizer(stack.top, X, config, reg or RegConfig(), rng, on_epoch, on_log)
    out = stack.copy()
    out.layers[-1] = res.params
    out.masks[-1] = res.mask
    return out


def stack_features(stack: LayerStack, X) -> np.ndarray:
    """Top-layer features: DBN mean network upward pass, DBM mean field."""
    if stack.flavor == 'dbm':
        return dbm_features(stack, X)
    H = np.atleast_2d(np.asarray(X, dtype=np.float64))
    for params, mask in zip(stack.layers, stack.masks):
        H = propagate(params, mask, H)
    return H


# ------------------------------------------------------------------ #
# DBM
# ------------------------------------------------------------------ #

def _dbm_scales(l: int, n: int) -> tuple[float, float]:
    if n == 1:
        return 1.0, 1.0
    if l == 0:
        return 2.0, 1.0
    if l == n - 1:
        return 1.0, 2.0
    return 2.0, 2.0


def _hidden_bias_input(stack: LayerStack, v: np.ndarray) -> np.ndarray:
    units = units_for(stack.layers[0].kind)
    return units.bias_scale(v) * stack.layers[0].c


def _layer_input(stack: LayerStack, l: int, v: np.ndarray, mu: list[np.ndarray]) -> np.ndarray:
    """Total input to hidden layer l (0-based) from its neighbours."""
    below = v if l == 0 else mu[l - 1]
    bias = _hidden_bias_input(stack, v) if l == 0 else stack.layers[l].c
    x = bias + below @ stack.layers[l].W.T
    if l + 1 < stack.depth:
        x = x + mu[l + 1] @ stack.layers[l + 1].W
    return x


def mean_field(stack: LayerStack, v, iters: int = DEFAULT_DBM_MF_ITERS,
               history: list | None = None) -> list[np.ndarray]:
    """Mean-field posterior q(h | v) of a DBM by sequential layer sweeps.

    Starts from a bottom-up pass with doubled weights below the top layer;
    each sweep updates layers 1..L in order. When *history* is a list, the
    variational free energy after each sweep is appended to it.
    """
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = stack.depth
    mu: list[np.ndarray] = []
    below = V
    for l in range(n):
        scale = 2.0 if l + 1 < n else 1.0
        bias = _hidden_bias_input(stack, V) if l == 0 else stack.layers[l].c
        mu.append(sigmoid(bias + scale * (below @ stack.layers[l].W.T)))
        below = mu[-1]
    if history is not None:
        history.append(dbm_variational_free_energy(stack, V, mu))
    for _ in range(iters):
        for l in range(n):
            mu[l] = sigmoid(_layer_input(stack, l, V, mu))
        if history is not None:
            history.append(dbm_variational_free_energy(stack, V, mu))
    return mu


def _entropy(mu: np.ndarray) -> np.ndarray:
    return -np.sum(xlogy(mu, mu) + xlogy(1.0 - mu, 1.0 - mu), axis=1)


def dbm_variational_free_energy(stack: LayerStack, v, mu: list[np.ndarray]) -> float:
    """Mean over rows of E_q[E(v, h)] - H(q) for a factorized q."""
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    units = units_for(stack.layers[0].kind)
    energy = units.visible_energy(stack.layers[0].b, V)
    below = V
    for l, params in enumerate(stack.layers):
        bias = _hidden_bias_input(stack, V) if l == 0 else params.c
        energy = energy - np.sum(bias * mu[l], axis=1) - np.sum((mu[l] @ params.W) * below, axis=1)
        energy = energy - _entropy(mu[l])
        below = mu[l]
    return float(np.mean(energy))


def dbm_features(stack: LayerStack, X, iters: int = DEFAULT_DBM_MF_ITERS) -> np.ndarray:
    """Top-layer mean-field activations given v only."""
    return mean_field(stack, X, iters)[-1]


def _sample_layers(stack: LayerStack, v: np.ndarray, h: list[np.ndarray], gen) -> list[np.ndarray]:
    out = list(h)
    for l in range(stack.depth):
        p = sigmoid(_layer_input(stack, l, v, out))
        out[l] = (gen.random(p.shape) < p).astype(np.float64)
    return out


def dbm_gradient(stack: LayerStack, batch, rng: RandomSource, mf_iters: int = DEFAULT_DBM_MF_ITERS,
                 gibbs_steps: int = DEFAULT_DBM_GIBBS_STEPS) -> list[Gradient]:
    """Per-layer NLL gradient: mean-field positive phase, Gibbs negative phase.

    The negative chains start at the data, run *gibbs_steps* full sweeps
    (hidden layers bottom-up, then the visible layer, whose last update is a
    mean); negative statistics use hidden probabilities given the final state.
    With one hidden layer this is CD-k with k = gibbs_steps.
    """
    V = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if V.shape[0] == 0:
        raise ContractError('dbm_gradient: empty minibatch')
    gen = rng.generator
    bottom = stack.layers[0]
    units = units_for(bottom.kind)
    mu = mean_field(stack, V, mf_iters)

    h = [(gen.random(m.shape) < m).astype(np.float64) for m in mu]
    vn = V
    for step in range(gibbs_steps):
        h = _sample_layers(stack, vn, h, gen)
        vm = units.visible_mean(bottom.b, bottom.W, h[0], V)
        vn = vm if step == gibbs_steps - 1 else units.sample_visible(vm, gen)
    neg: list[np.ndarray] = list(h)
    for l in range(stack.depth):
        neg[l] = sigmoid(_layer_input(stack, l, vn, neg))

    n = V.shape[0]
    grads: list[Gradient] = []
    pos_below, neg_below = V, vn
    for l, params in enumerate(stack.layers):
        g = Gradient.zeros_like(params)
        if l == 0:
            g.b = np.mean(units.grad_b(params.b, V), axis=0) - np.mean(units.grad_b(params.b, vn), axis=0)
            s_pos = np.broadcast_to(units.bias_scale(V), (n, 1))
            s_neg = np.broadcast_to(units.bias_scale(vn), (n, 1))
            g.c = -(np.mean(s_pos * mu[0], axis=0) - np.mean(s_neg * neg[0], axis=0))
        else:
            g.c = -(np.mean(mu[l], axis=0) - np.mean(neg[l], axis=0))
        g.W = -(mu[l].T @ pos_below - neg[l].T @ neg_below) / n
        grads.append(g)
        pos_below, neg_below = mu[l], neg[l]
    return grads


def dbm_train_epoch(stack: LayerStack, dataset, config: TrainConfig, rng: RandomSource,
                    lam: float = 0.0, epoch: int = 0, mf_iters: int = DEFAULT_DBM_MF_ITERS,
                    gibbs_steps: int = DEFAULT_DBM_GIBBS_STEPS) -> tuple[LayerStack, float]:
    """One joint-training pass; only an L2 penalty (lam) applies here."""
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    out = stack.copy()
    order = rng.child(0).generator.permutation(data.shape[0])
    lr = float(config.learning_rate)
    penalties: list[float] = []
    for t, start in enumerate(range(0, data.shape[0], config.batch_size)):
        batch = data[order[start:start + config.batch_size]]
        grads = dbm_gradient(out, batch, rng.child(t + 1), mf_iters, gibbs_steps)
        pen = 0.0
        for l, (params, g) in enumerate(zip(out.layers, grads)):
            gW = g.W + l2_penalty_gradient(params.W, lam) if lam else g.W
            pen += l2_penalty(params.W, lam)
            params.b -= lr * g.b
            params.c -= lr * g.c
            params.W -= lr * gW
            check_divergence(params, epoch, t)
        penalties.append(pen)
    return out, float(np.mean(penalties)) if penalties else 0.0


def dbm_pretrain_and_train(dataset, layer_sizes: list[int], train_configs, reg_configs=None,
                           joint_config: TrainConfig | None = None, rng: RandomSource | None = None,
                           first_kind: str = 'bernoulli', mf_iters: int = DEFAULT_DBM_MF_ITERS,
                           gibbs_steps: int = DEFAULT_DBM_GIBBS_STEPS,
                           on_epoch=None, on_log=None) -> LayerStack:
    """Greedy pretraining with doubled end-layer weights, then joint training.

    The bottom RBM doubles its upward weights, the top RBM its downward
    weights and middle RBMs both, so that each DBM layer sees input from both
    neighbours at the scale it was trained with. Layers are composed from
    their mean networks; the joint phase applies only an L2 penalty (from a
    per-layer ``l2`` or ``l2al1`` config).
    """
    if not layer_sizes:
        raise ContractError('dbm_pretrain_and_train: at least one hidden layer is required')
    n = len(layer_sizes)
    configs = _per_layer(train_configs, n, 'train_configs')
    regs = _per_layer(reg_configs or RegConfig(), n, 'reg_configs')
    log = make_log(on_log)
    rng = rng if rng is not None else RandomSource(configs[0].seed)
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    X = data
    layers: list[RbmParams] = []
    for l, size in enumerate(layer_sizes):
        kind = first_kind if l == 0 else 'bernoulli'
        scales = _dbm_scales(l, n)
        log('INFO', 'dbm', f'pretrain layer {l + 1}/{n}: {X.shape[1]} -> {size} (scales up/down {scales})')
        res = train_rbm(X, size, configs[l], regs[l], rng.child(l), kind,
                        _layer_callback(on_epoch, l + 1), on_log, scales)
        params = inference_params(res.params, res.mask)
        if l > 0:
            params.b = np.zeros_like(params.b)
        layers.append(params)
        if l + 1 < n:
            X = propagate(params, None, X, up=scales[0])
    stack = LayerStack(layers, flavor='dbm')

    joint = joint_config or configs[-1]
    lam = max((r.lam for r in regs if r.mode in ('l2', 'l2al1')), default=0.0)
    joint_rng = rng.child(n)
    log('INFO', 'dbm', f'joint training: {joint.epochs} epochs, lr={joint.learning_rate:g}, '
                       f'mf_iters={mf_iters}, gibbs_steps={gibbs_steps}')
    for e in range(joint.epochs):
        stack, pen = dbm_train_epoch(stack, data, joint, joint_rng.child(e), lam, e + 1,
                                     mf_iters, gibbs_steps)
        if on_epoch is not None:
            on_epoch(e + 1, 'joint', stack.top, pen)
    return stack
