# -*- coding: utf-8 -*-
"""
core.classifiers - Supervised heads on top of trained features.

``logistic_head`` fits a softmax regression on fixed features (zero init,
L-BFGS). ``ffnn_finetune`` unrolls a LayerStack into a sigmoid network with
a softmax output and trains it with cross-entropy SGD, returning the
parameters of the best validation epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from core.constants import DEFAULT_BATCH_SIZE, DEFAULT_FINETUNE_EPOCHS, DEFAULT_FINETUNE_LR
from core.helpers import make_log
from core.numerics import ContractError, RandomSource, sigmoid
from core.units import units_for


def _check_labels(X: np.ndarray, y: np.ndarray, n_classes: int | None) -> int:
    if X.shape[0] != y.shape[0]:
        raise ContractError(f'{X.shape[0]} feature rows but {y.shape[0]} labels')
    if y.size and (np.any(y < 0) or np.any(y != np.round(y))):
        raise ContractError('labels must be non-negative integers')
    found = int(y.max()) + 1 if y.size else 1
    if n_classes is None:
        return found
    if found > n_classes:
        raise ContractError(f'label {found - 1} out of range for {n_classes} classes')
    return n_classes


def _one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y.astype(np.int64)] = 1.0
    return out


# ------------------------------------------------------------------ #
# Logistic head
# ------------------------------------------------------------------ #

@dataclass
class LogisticHead:
    W: np.ndarray       # (C, D)
    b: np.ndarray       # (C,)

    def scores(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=np.float64)) @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)


def logistic_head(features, labels, n_classes: int | None = None, l2: float = 1e-4,
                  max_iter: int = 500) -> LogisticHead:
    """Multinomial logistic regression, zero-initialized, mean cross-entropy
    plus ``l2 / 2 * ||W||^2``."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels).reshape(-1)
    C = _check_labels(X, y, n_classes)
    N, D = X.shape
    Y = _one_hot(y, C)

    def objective(theta):
        W = theta[:C * D].reshape(C, D)
        b = theta[C * D:]
        logp = log_softmax(X @ W.T + b, axis=1)
        loss = -np.sum(Y * logp) / N + 0.5 * l2 * np.sum(W * W)
        R = (np.exp(logp) - Y) / N
        gW = R.T @ X + l2 * W
        gb = R.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    if N == 0:
        return LogisticHead(np.zeros((C, D)), np.zeros(C))
    res = minimize(objective, np.zeros(C * D + C), jac=True, method='L-BFGS-B',
                   options={'maxiter': max_iter})
    return LogisticHead(res.x[:C * D].reshape(C, D).copy(), res.x[C * D:].copy())


# ------------------------------------------------------------------ #
# Feed-forward network
# ------------------------------------------------------------------ #

@dataclass
class FfnnParams:
    """Sigmoid hidden layers (W_l: H_l x H_{l-1}, c_l) and a softmax output."""
    hidden_W: list[np.ndarray]
    hidden_c: list[np.ndarray]
    out_W: np.ndarray
    out_b: np.ndarray
    first_kind: str = 'bernoulli'
    best_epoch: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)

    def copy(self) -> FfnnParams:
        return FfnnParams([w.copy() for w in self.hidden_W], [c.copy() for c in self.hidden_c],
                          self.out_W.copy(), self.out_b.copy(), self.first_kind,
                          self.best_epoch, list(self.history))

    def forward(self, X) -> tuple[list[np.ndarray], np.ndarray]:
        """(activations per layer including the input, class probabilities)."""
        A = [np.atleast_2d(np.asarray(X, dtype=np.float64))]
        for l, (W, c) in enumerate(zip(self.hidden_W, self.hidden_c)):
            if l == 0:
                x = units_for(self.first_kind).hidden_input(c, W, A[0])
            else:
                x = c + A[-1] @ W.T
            A.append(sigmoid(x))
        return A, softmax(A[-1] @ self.out_W.T + self.out_b, axis=1)

    def scores(self, X) -> np.ndarray:
        return self.forward(X)[1]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.scores(X), axis=1)


def ffnn_loss(params: FfnnParams, X, y) -> float:
    """Mean cross-entropy."""
    A, _ = params.forward(X)
    logp = log_softmax(A[-1] @ params.out_W.T + params.out_b, axis=1)
    y = np.asarray(y).astype(np.int64).reshape(-1)
    return float(-np.mean(logp[np.arange(y.size), y]))


def ffnn_gradient(params: FfnnParams, X, y) -> FfnnParams:
    """Backprop gradient of the mean cross-entropy, packed as an FfnnParams."""
    A, P = params.forward(X)
    y = np.asarray(y).astype(np.int64).reshape(-1)
    n = y.size
    delta = (P - _one_hot(y, P.shape[1])) / n
    g_out_W = delta.T @ A[-1]
    g_out_b = delta.sum(axis=0)
    back = delta @ params.out_W
    gW: list[np.ndarray] = [None] * len(params.hidden_W)
    gc: list[np.ndarray] = [None] * len(params.hidden_c)
    for l in range(len(params.hidden_W) - 1, -1, -1):
        d = back * A[l + 1] * (1.0 - A[l + 1])
        gW[l] = d.T @ A[l]
        if l == 0:
            s = np.broadcast_to(units_for(params.first_kind).bias_scale(A[0]), (n, 1))
            gc[l] = np.sum(d * s, axis=0)
        else:
            gc[l] = d.sum(axis=0)
        back = d @ params.hidden_W[l]
    return FfnnParams(gW, gc, g_out_W, g_out_b, params.first_kind)


def ffnn_from_stack(stack, n_classes: int, rng: RandomSource, init_scale: float = 0.01) -> FfnnParams:
    """Hidden layers from the stack's mean network; output layer U(-s, s)."""
    layers = stack.mean_network()
    top = layers[-1].n_hidden
    out_W = rng.generator.uniform(-init_scale, init_scale, size=(n_classes, top))
    return FfnnParams([p.W.copy() for p in layers], [p.c.copy() for p in layers],
                      out_W, np.zeros(n_classes), layers[0].kind)


def _error(params, X, y) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(params.predict(X) != y))


def ffnn_finetune(stack, X_train, y_train, X_valid, y_valid, n_classes: int | None = None,
                  epochs: int = DEFAULT_FINETUNE_EPOCHS, lr: float = DEFAULT_FINETUNE_LR,
                  batch_size: int = DEFAULT_BATCH_SIZE, rng: RandomSource | None = None,
                  freeze_pretrained: bool = False,
                  on_epoch: Callable[[int, float, float], None] | None = None,
                  on_log=None) -> FfnnParams:
    """Cross-entropy SGD with early stopping on validation error.

    The returned parameters are those of the earliest epoch (0 = at
    initialization) with the lowest validation error. With
    ``freeze_pretrained`` only the output layer is fitted, which is exactly
    ``logistic_head`` on the stack's features.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    X_valid = np.atleast_2d(np.asarray(X_valid, dtype=np.float64))
    y_train = np.asarray(y_train).astype(np.int64).reshape(-1)
    y_valid = np.asarray(y_valid).astype(np.int64).reshape(-1)
    C = _check_labels(X_train, y_train, n_classes)
    _check_labels(X_valid, y_valid, C)
    log = make_log(on_log)
    rng = rng if rng is not None else RandomSource(0)
    params = ffnn_from_stack(stack, C, rng.child(0))

    if freeze_pretrained:
        A, _ = params.forward(X_train)
        head = logistic_head(A[-1], y_train, C)
        params.out_W, params.out_b = head.W, head.b
        params.history = [(0, _error(params, X_train, y_train), _error(params, X_valid, y_valid))]
        return params

    best = params.copy()
    best_err = _error(params, X_valid, y_valid)
    history = [(0, _error(params, X_train, y_train), best_err)]
    n = X_train.shape[0]
    for e in range(1, epochs + 1):
        order = rng.child(e).generator.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            g = ffnn_gradient(params, X_train[idx], y_train[idx])
            for l in range(len(params.hidden_W)):
                params.hidden_W[l] -= lr * g.hidden_W[l]
                params.hidden_c[l] -= lr * g.hidden_c[l]
            params.out_W -= lr * g.out_W
            params.out_b -= lr * g.out_b
        train_err = _error(params, X_train, y_train)
        valid_err = _error(params, X_valid, y_valid)
        history.append((e, train_err, valid_err))
        if on_epoch is not None:
            on_epoch(e, train_err, valid_err)
        if valid_err < best_err:
            best, best_err = params.copy(), valid_err
            best.best_epoch = e
    log('INFO', 'finetune', f'best epoch {best.best_epoch}/{epochs}, valid_err={best_err:.4f}')
    best.history = history
    return best
