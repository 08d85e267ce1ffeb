# -*- coding: utf-8 -*-
"""
core.units - Visible-unit families for the energy-based layers.

Each family supplies the pieces of the visible side that differ between a
binary RBM, a unit-variance Gaussian RBM and a replicated-softmax (word count)
RBM. The hidden side is always binary, so the generic machinery in core.rbm
(Gibbs steps, CD gradients, masks, regularizers) works unchanged for all three.

All arrays here are 2-D: rows are examples / chains.
"""
from __future__ import annotations

import numpy as np

from core.numerics import ContractError, sigmoid


class VisibleUnits:
    """Visible-side behaviour of one layer kind."""

    kind = ''

    def bias_scale(self, v: np.ndarray) -> np.ndarray | float:
        """Multiplier applied to the hidden bias for input rows *v*."""
        return 1.0

    def hidden_input(self, c: np.ndarray, W: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Pre-sigmoid hidden activation ``scale(v) * c + W v`` per row."""
        return self.bias_scale(v) * c + v @ W.T

    def visible_mean(self, b: np.ndarray, W: np.ndarray, h: np.ndarray, v_ref: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_visible(self, mean: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def visible_energy(self, b: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Visible-only part of the energy / free energy, one value per row."""
        return -(v @ b)

    def grad_b(self, b: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Per-row derivative of the free energy with respect to b."""
        return -v


class BernoulliUnits(VisibleUnits):
    kind = 'bernoulli'

    def visible_mean(self, b, W, h, v_ref):
        return sigmoid(b + h @ W)

    def sample_visible(self, mean, gen):
        return (gen.random(mean.shape) < mean).astype(np.float64)


class GaussianUnits(VisibleUnits):
    """Unit-variance Gaussian visibles: ``E = sum((v - b)^2) / 2 - c.h - h.W v``."""

    kind = 'gaussian'

    def visible_mean(self, b, W, h, v_ref):
        return b + h @ W

    def sample_visible(self, mean, gen):
        return mean + gen.standard_normal(mean.shape)

    def visible_energy(self, b, v):
        return 0.5 * np.sum((v - b) ** 2, axis=-1)

    def grad_b(self, b, v):
        return -(v - b)


class SoftmaxCountUnits(VisibleUnits):
    """Replicated softmax: count vectors, hidden bias scaled by document length."""

    kind = 'softmax'

    def bias_scale(self, v):
        return np.sum(v, axis=-1, keepdims=True)

    def visible_mean(self, b, W, h, v_ref):
        logits = b + h @ W
        logits = logits - np.max(logits, axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= np.sum(p, axis=-1, keepdims=True)
        return self.bias_scale(v_ref) * p

    def sample_visible(self, mean, gen):
        counts = np.sum(mean, axis=-1)
        out = np.zeros_like(mean)
        for n in range(mean.shape[0]):
            d = int(round(counts[n]))
            if d <= 0:
                continue
            p = mean[n] / counts[n]
            out[n] = gen.multinomial(d, p / p.sum())
        return out


UNITS: dict[str, VisibleUnits] = {
    'bernoulli': BernoulliUnits(),
    'gaussian': GaussianUnits(),
    'softmax': SoftmaxCountUnits(),
}


def units_for(kind: str) -> VisibleUnits:
    try:
        return UNITS[kind]
    except KeyError:
        raise ContractError(f'unknown layer kind "{kind}" (choose from {", ".join(UNITS)})') from None
