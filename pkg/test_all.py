# -*- coding: utf-8 -*-
"""
test_all.py - rbmreg unit and contract tests.

Run as a script (``python test_all.py``, exit code 1 on any failure) or
collect with pytest: every section is a ``test_*`` function that fails when
one of its checks failed.
"""
import contextlib
import io
import itertools
import json
import math
import shutil
import struct
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from core.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from core.classifiers import (
    FfnnParams,
    LogisticHead,
    ffnn_finetune,
    ffnn_gradient,
    ffnn_loss,
    logistic_head,
)
from core.config_model import ExperimentConfig
from core.constants import LIB_VERSION, METRICS_COLUMNS
from core.csv_recorder import MetricsRecorder, MetricsRow, read_metrics, run_valid_error
from core.datasets import (
    CsvFormatError,
    IdxDimensionError,
    IdxMagicError,
    IdxTruncatedError,
    assign_splits,
    load_bow,
    load_csv_features,
    load_idx,
    synthetic_digits,
    top_vocabulary,
)
from core.deep_models import (
    LayerStack,
    add_symmetric_layer,
    dbm_gradient,
    dbm_pretrain_and_train,
    dbn_pretrain,
    grbm_train,
    grow_top_layer,
    mean_field,
    propagate,
    rsm_train,
    stack_features,
    train_rbm,
)
from core.evaluation import (
    AisConfig,
    ais_log_likelihood,
    ais_log_partition,
    base_rate_params,
    classification_error,
    convergence_suite,
    dbn_bound,
    dbn_log_likelihood,
    pseudo_likelihood,
)
from core.experiment_runner import (
    SweepRow,
    cell_seed,
    free_energy_identity_error,
    gradient_fd_error,
    grid_cells,
    load_dataset,
    pl_enumeration_error,
    random_tiny_rbm,
    run_experiment,
    select_winner,
    sweep,
)
from core.helpers import ConfigError, fmt_float
from core.numerics import (
    ContractError,
    RandomSource,
    bernoulli_sample,
    ceil_count,
    enumerate_binary,
    enumerate_compositions,
    hadamard,
    log1p_exp,
    matmul,
    sigmoid,
    transpose,
)
from core.rbm import (
    GibbsChain,
    RbmParams,
    TrainConfig,
    TrainingDivergedError,
    cd_gradient,
    check_divergence,
    cond_h_given_v,
    cond_v_given_h,
    energy,
    exact_gradient,
    exact_log_likelihood,
    exact_log_partition,
    exact_visible_distribution,
    free_energy,
    gibbs_step,
    sgd_epoch,
)
from core.regularizers import (
    FitResult,
    MaskSpec,
    RegConfig,
    Regularizer,
    adaptive_l1_penalty,
    adaptive_l1_penalty_gradient,
    bound_term,
    dropconnect_mask,
    dropout_masks,
    fit_with_regularizer,
    inference_params,
    inp_loop,
    l2_penalty,
    l2_penalty_gradient,
    l2_plus_al1,
    l2_plus_al1_penalty,
    pdc_loop,
    pdc_rates,
    pdo_rates,
    snp_loop,
    snp_mask,
    sparsity_penalty,
    sparsity_penalty_gradient,
)
import main_cli

# result counters
PASS = 0
FAIL = 0
ERRORS = []


def ok(name):
    global PASS
    PASS += 1
    print(f"  [PASS] {name}")


def fail(name, detail=""):
    global FAIL
    FAIL += 1
    msg = f"  [FAIL] {name}: {detail}"
    ERRORS.append(msg)
    print(msg)


def section(title):
    print(f"\n{'='*60}")
    print(f"  {title}")
    print(f"{'='*60}")
    return FAIL


def section_passed(before):
    assert FAIL == before, f"{FAIL - before} check(s) failed in this section"


def _err(e):
    return f"{type(e).__name__}: {e}"


def _binary(rng, n, j, p=0.5):
    return (rng.generator.random((n, j)) < p).astype(np.float64)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _sort_oracle(values, count):
    """Indices of the *count* largest values, ties to the lower index, by full sort."""
    flat = list(np.asarray(values).ravel())
    ranked = sorted(range(len(flat)), key=lambda i: (-flat[i], i))
    keep = np.zeros(len(flat), dtype=bool)
    keep[ranked[:count]] = True
    return keep.reshape(np.shape(values))


def _tiny_config(out_dir, **over):
    d = {
        'model': 'rbm',
        'layer_sizes': [8],
        'train': {'epochs': 2, 'batch_size': 10, 'learning_rate': 0.05},
        'data': {'source': 'synthetic_digits', 'n_examples': 60, 'n_valid': 10, 'n_test': 10},
        'output_dir': str(out_dir),
        'seed': 3,
    }
    d.update(over)
    return ExperimentConfig.from_dict(d)


# ============================================================
# 1. numerics
# ============================================================
def test_numerics():
    before = section("1. numerics")

    try:
        assert sigmoid(np.array([0.0]))[0] == 0.5
        s = sigmoid(np.array([-3.0, 3.0]))
        assert abs(s[0] - 0.04742587317756678) < 1e-12
        assert abs(s[0] + s[1] - 1.0) < 1e-15
        low = sigmoid(np.array([-800.0]))
        assert np.isfinite(low[0]) and low[0] >= 0.0
        ok("sigmoid: 1/2 at 0, symmetry at 3, no NaN at -800")
    except Exception as e:
        fail("sigmoid", _err(e))

    try:
        assert abs(log1p_exp(np.array([0.0]))[0] - math.log(2.0)) < 1e-15
        assert log1p_exp(np.array([1000.0]))[0] == 1000.0
        tiny = log1p_exp(np.array([-1000.0]))[0]
        assert np.isfinite(tiny) and tiny >= 0.0
        ok("log1p_exp: log 2 at 0, exact asymptote at 1000, finite at -1000")
    except Exception as e:
        fail("log1p_exp", _err(e))

    try:
        rng = RandomSource(5)
        assert not bernoulli_sample(np.zeros((3, 4)), rng.child(0)).any()
        assert bernoulli_sample(np.ones((3, 4)), rng.child(1)).all()
        draws = bernoulli_sample(np.full(100_000, 0.5), rng.child(2))
        assert abs(draws.mean() - 0.5) < 0.01
        try:
            bernoulli_sample(np.array([1.5]), rng.child(3))
            raise AssertionError("p > 1 accepted")
        except ContractError:
            pass
        ok("bernoulli_sample: p=0, p=1, mean of 1e5 draws at p=0.5")
    except Exception as e:
        fail("bernoulli_sample", _err(e))

    try:
        gen = RandomSource(9).generator
        A = gen.standard_normal((2, 2))
        assert np.array_equal(matmul(np.eye(2), A), A)
        W = gen.standard_normal((3, 5))
        assert np.array_equal(hadamard(np.ones_like(W), W), W)
        P, Q = gen.standard_normal((3, 4)), gen.standard_normal((4, 2))
        assert np.allclose(transpose(matmul(P, Q)), matmul(transpose(Q), transpose(P)), atol=1e-14)
        try:
            matmul(P, P)
            raise AssertionError("shape mismatch accepted")
        except ContractError:
            pass
        ok("matmul / hadamard / transpose identities and shape contract")
    except Exception as e:
        fail("linear algebra", _err(e))

    try:
        a = RandomSource(7).child(3).generator.random(5)
        b = RandomSource(7).child(3).generator.random(5)
        c = RandomSource(7).child(4).generator.random(5)
        d = RandomSource(7, stream_id=1).child(3).generator.random(5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c) and not np.array_equal(a, d)
        parent = RandomSource(7)
        first = parent.generator.random(3)
        parent.child(0).generator.random(100)
        assert np.array_equal(RandomSource(7).generator.random(4)[3:], parent.generator.random(1))
        assert first.shape == (3,)
        ok("RandomSource: same identifiers same draws, children independent of parent state")
    except Exception as e:
        fail("RandomSource", _err(e))

    try:
        B = enumerate_binary(3)
        assert B.shape == (8, 3)
        assert np.array_equal(B[1], [0, 0, 1]) and np.array_equal(B[-1], [1, 1, 1])
        assert ceil_count(0.7, 10) == 7 and ceil_count(0.75, 24) == 18 and ceil_count(1 / 3, 9) == 3
        C = enumerate_compositions(3, 3)
        assert C.shape == (10, 3) and np.all(C.sum(axis=1) == 3)
        ok("enumerate_binary (MSB first), ceil_count, enumerate_compositions")
    except Exception as e:
        fail("enumeration helpers", _err(e))

    section_passed(before)


# ============================================================
# 2. RBM core
# ============================================================
def test_rbm_core():
    before = section("2. RBM core")

    try:
        p = RbmParams.zeros(2, 3)
        assert energy(p, np.array([1.0, 0.0, 1.0]), np.array([1.0, 1.0])) == 0.0
        p = RbmParams(np.zeros(3), np.zeros(2), np.ones((2, 3)))
        assert energy(p, np.ones(3), np.ones(2)) == -6.0
        gen = RandomSource(1).generator
        q = RbmParams(gen.standard_normal(4), gen.standard_normal(3), gen.standard_normal((3, 4)))
        v, h = np.array([1.0, 0.0, 1.0, 1.0]), np.array([0.0, 1.0, 1.0])
        loop = -sum(q.b[j] * v[j] for j in range(4)) - sum(q.c[i] * h[i] for i in range(3)) \
            - sum(h[i] * q.W[i, j] * v[j] for i in range(3) for j in range(4))
        assert abs(energy(q, v, h) - loop) < 1e-12
        ok("energy: zero model, all-ones example (-6), scalar-loop oracle")
    except Exception as e:
        fail("energy", _err(e))

    try:
        p = RbmParams.zeros(5, 4)
        assert abs(free_energy(p, np.array([1.0, 0.0, 0.0, 1.0])) + 5 * math.log(2.0)) < 1e-12
        p = RbmParams(np.array([1.0, 0.0, 0.0]), np.zeros(1), np.zeros((1, 3)))
        assert abs(free_energy(p, np.array([1.0, 0.0, 1.0])) - (-1.0 - math.log(2.0))) < 1e-12
        rng = RandomSource(2)
        worst = max(free_energy_identity_error(random_tiny_rbm(rng.child(k), 5, 3)) for k in range(20))
        assert worst < 1e-10, worst
        ok(f"free energy: zero model, single unit, identity on 20 instances (max rel {worst:.2e})")
    except Exception as e:
        fail("free energy", _err(e))

    try:
        p = RbmParams.zeros(3, 4)
        assert np.all(cond_h_given_v(p, np.array([1.0, 1.0, 0.0, 1.0])) == 0.5)
        p = RbmParams(np.zeros(2), np.array([30.0]), np.zeros((1, 2)))
        assert cond_h_given_v(p, np.array([0.0, 1.0]))[0] > 1.0 - 1e-13
        q = random_tiny_rbm(RandomSource(4), 3, 2)
        v = np.array([1.0, 0.0, 1.0])
        H = enumerate_binary(2)
        w = np.exp(-energy(q, np.broadcast_to(v, (4, 3)), H))
        posterior = (w / w.sum()) @ H
        assert np.allclose(cond_h_given_v(q, v), posterior, atol=1e-12)
        ok("cond_h_given_v: zero model, saturation, Bayes-rule posterior")
    except Exception as e:
        fail("cond_h_given_v", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(8), 3, 2)
        v0, h0 = np.tile([1.0, 0.0, 1.0], (50, 1)), np.zeros((50, 2))
        a = gibbs_step(GibbsChain(v0, h0, RandomSource(3)), q)
        b = gibbs_step(GibbsChain(v0, h0, RandomSource(3)), q, MaskSpec('node', np.ones(2)), RandomSource(9))
        assert np.array_equal(a.v, b.v) and np.array_equal(a.h, b.h)
        z = gibbs_step(GibbsChain(v0, h0, RandomSource(3)), q, MaskSpec('node', np.zeros(2)), RandomSource(9))
        assert not z.h.any()
        ok("gibbs_step: all-ones mask reproduces the unmasked step; zero mask silences h")
    except Exception as e:
        fail("gibbs_step masks", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(8), 3, 2)
        v0, h0 = np.tile([1.0, 0.0, 1.0], (50, 1)), np.zeros((50, 2))
        for seed in range(20):
            a = GibbsChain(v0, h0, RandomSource(seed))
            b = GibbsChain(v0, h0, RandomSource(seed))
            for _ in range(3):
                a = gibbs_step(a, q)
                b = gibbs_step(b, q, MaskSpec('node', np.ones(2)))
            assert np.array_equal(a.v, b.v) and np.array_equal(a.h, b.h), f"seed {seed}"
        half = MaskSpec('node', np.full(2, 0.5))
        c = gibbs_step(GibbsChain(v0, h0, RandomSource(5)), q, half)
        first = c.mask_rng
        c = gibbs_step(c, q, half)
        assert c.mask_rng is first
        ok("gibbs_step: default mask stream leaves the Gibbs draws untouched and is carried along")
    except Exception as e:
        fail("gibbs_step default mask stream", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(12), 2, 2, scale=1.0)
        chain = GibbsChain(np.zeros((20_000, 2)), np.zeros((20_000, 2)), RandomSource(11))
        counts = np.zeros(4)
        for step in range(300):
            chain = gibbs_step(chain, q)
            if step >= 100:
                counts += np.bincount((2 * chain.v[:, 0] + chain.v[:, 1]).astype(int), minlength=4)
        _, P = exact_visible_distribution(q)
        tv = 0.5 * np.abs(counts / counts.sum() - P).sum()
        assert tv < 0.01, tv
        ok(f"gibbs_step: long-run marginals match enumeration (TV {tv:.4f})")
    except Exception as e:
        fail("gibbs_step stationarity", _err(e))

    try:
        p = RbmParams.zeros(3, 4)
        batch = np.vstack([np.ones((2, 4)), np.zeros((2, 4))])
        g = cd_gradient(p, batch, 1, rng=RandomSource(0))
        assert np.all(g.b == 0.0)
        q = random_tiny_rbm(RandomSource(13), 6, 4, 0.5)
        data = _binary(RandomSource(14), 12, 6)
        g0 = cd_gradient(q, data, 3, None, RandomSource(15))
        g1 = cd_gradient(q, data, 3, MaskSpec('node', np.ones(4)), RandomSource(15))
        g2 = cd_gradient(q, data, 3, MaskSpec('edge', np.ones((4, 6))), RandomSource(15))
        assert np.array_equal(g0.as_vector(), g1.as_vector())
        assert np.array_equal(g0.as_vector(), g2.as_vector())
        try:
            cd_gradient(q, np.zeros((0, 6)), 1, rng=RandomSource(0))
            raise AssertionError("empty minibatch accepted")
        except ContractError:
            pass
        ok("cd_gradient: zero b-gradient by symmetry, all-ones masks bit-exact, empty batch rejected")
    except Exception as e:
        fail("cd_gradient", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(16), 6, 4, 0.5)
        data = _binary(RandomSource(17), 30, 6)
        frozen, _ = sgd_epoch(q, data, TrainConfig(learning_rate=0.0, batch_size=7), rng=RandomSource(1))
        assert frozen.equals(q)
        cfg = TrainConfig(learning_rate=0.05, batch_size=7)
        a, _ = sgd_epoch(q, data, cfg, rng=RandomSource(1))
        b, _ = sgd_epoch(q, data, cfg, rng=RandomSource(1))
        assert a.equals(b) and not a.equals(q)
        one = np.tile([1.0, 0.0, 1.0, 1.0, 0.0, 0.0], (20, 1))
        after, _ = sgd_epoch(q, one, TrainConfig(learning_rate=0.5, batch_size=5), rng=RandomSource(2))
        assert free_energy(q, one[0]) - free_energy(after, one[0]) > 0
        ok("sgd_epoch: lr=0 unchanged, deterministic, lowers F of a repeated example")
    except Exception as e:
        fail("sgd_epoch", _err(e))

    try:
        q = RbmParams.zeros(2, 3)
        q.W[0, 0] = 1e7
        try:
            check_divergence(q, 4, 2)
            raise AssertionError("divergence not reported")
        except TrainingDivergedError as e:
            assert 'epoch 4' in str(e) and 'minibatch 2' in str(e)
        try:
            TrainConfig.from_dict({'epochs': 3, 'momentum': 0.9})
            raise AssertionError("unknown key accepted")
        except ConfigError as e:
            assert 'momentum' in str(e)
        assert TrainConfig(cd_k=0).validate()
        ok("divergence guard names epoch and minibatch; TrainConfig rejects unknown keys")
    except Exception as e:
        fail("training contracts", _err(e))

    try:
        p = RbmParams.zeros(3, 5)
        assert abs(exact_log_partition(p) - 8 * math.log(2.0)) < 1e-12
        assert abs(exact_log_likelihood(p, _binary(RandomSource(3), 7, 5)) + 5 * math.log(2.0)) < 1e-12
        q = random_tiny_rbm(RandomSource(18), 6, 4)
        data = _binary(RandomSource(19), 15, 6)
        err = gradient_fd_error(q, data)
        assert err < 1e-5, err
        ok(f"exact oracles: log Z and LL of the zero model, gradient vs finite differences ({err:.1e})")
    except Exception as e:
        fail("exact oracles", _err(e))

    section_passed(before)


# ============================================================
# 3. layer kinds (gaussian, replicated softmax)
# ============================================================
def test_layer_kinds():
    before = section("3. layer kinds")

    try:
        p = RbmParams(np.array([0.5, -1.0, 2.0]), np.zeros(2), np.zeros((2, 3)), 'gaussian')
        assert np.allclose(cond_v_given_h(p, np.array([1.0, 0.0])), p.b)
        z = RbmParams.zeros(4, 3, 'gaussian')
        v = np.array([0.3, -1.2, 2.0])
        assert abs(free_energy(z, v) - (0.5 * np.sum(v ** 2) - 4 * math.log(2.0))) < 1e-12
        gen = RandomSource(21).generator
        q = RbmParams(0.3 * gen.standard_normal(3), 0.3 * gen.standard_normal(2),
                      0.3 * gen.standard_normal((2, 3)), 'gaussian')
        err = gradient_fd_error(q, gen.standard_normal((10, 3)))
        assert err < 1e-4, err
        ok(f"gaussian: reconstruction mean, zero-model F, analytic-integral gradient ({err:.1e})")
    except Exception as e:
        fail("gaussian layer", _err(e))

    try:
        p = RbmParams.zeros(2, 3, 'softmax')
        assert np.all(cond_h_given_v(p, np.array([2.0, 0.0, 1.0])) == 0.5)
        one = RbmParams(np.zeros(1), np.zeros(2), RandomSource(22).generator.standard_normal((2, 1)), 'softmax')
        doc = np.array([[4.0]])
        assert np.allclose(cond_v_given_h(one, np.array([[1.0, 0.0]]), v_ref=doc), doc)
        assert abs(exact_log_partition(RbmParams.zeros(2, 3, 'softmax'), 4)
                   - (4 * math.log(3.0) + 2 * math.log(2.0))) < 1e-10
        ok("softmax: zero-model posterior, single-word vocabulary, zero-model log Z")
    except Exception as e:
        fail("softmax layer", _err(e))

    try:
        gen = RandomSource(23).generator
        q = RbmParams(0.5 * gen.standard_normal(3), 0.5 * gen.standard_normal(2),
                      0.5 * gen.standard_normal((2, 3)), 'softmax')
        docs = np.array([[3.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 2.0, 1.0], [0.0, 0.0, 3.0]])
        exact = exact_gradient(q, docs).as_vector()
        cd = cd_gradient(q, np.repeat(docs, 2000, axis=0), 1, rng=RandomSource(24)).as_vector()
        cos = _cos(exact, cd)
        assert cos > 0.0, cos
        ok(f"softmax: CD-1 gradient correlates with the enumerated gradient (cos {cos:.3f})")
    except Exception as e:
        fail("softmax gradient", _err(e))

    try:
        try:
            rsm_train(np.array([[1.5, 0.0]]), 2, TrainConfig(epochs=1))
            raise AssertionError("fractional counts accepted")
        except ContractError:
            pass
        res = rsm_train(np.array([[2.0, 1.0, 0.0], [0.0, 1.0, 3.0]] * 5), 3, TrainConfig(epochs=2),
                        rng=RandomSource(1))
        assert res.params.kind == 'softmax' and np.all(np.isfinite(res.params.W))
        lines = []
        grbm_train(RandomSource(2).generator.normal(0.0, 5.0, (40, 3)), 2, TrainConfig(epochs=1),
                   rng=RandomSource(3), on_log=lines.append)
        assert any('[WARN]' in l and 'standardized' in l for l in lines), lines
        ok("rsm_train validates counts; grbm_train warns on unstandardized input")
    except Exception as e:
        fail("single-layer trainers", _err(e))

    section_passed(before)


# ============================================================
# 4. regularizers
# ============================================================
def test_regularizers():
    before = section("4. regularizers")
    W_hat = np.array([[0.1, -0.4], [0.3, -0.2]])

    try:
        W = RandomSource(30).generator.standard_normal((3, 4))
        assert not l2_penalty_gradient(W, 0.0).any()
        assert np.array_equal(l2_penalty_gradient(np.eye(2), 0.5), np.eye(2))
        eps, lam = 1e-6, 0.3
        fd = np.zeros_like(W)
        for idx in np.ndindex(*W.shape):
            up, dn = W.copy(), W.copy()
            up[idx] += eps
            dn[idx] -= eps
            fd[idx] = (l2_penalty(up, lam) - l2_penalty(dn, lam)) / (2 * eps)
        assert np.linalg.norm(fd - l2_penalty_gradient(W, lam)) / np.linalg.norm(fd) < 1e-6
        ok("l2 penalty: zero at lam=0, 2*lam*W, finite differences")
    except Exception as e:
        fail("l2 penalty", _err(e))

    try:
        gen = RandomSource(31).generator
        W, Wh = gen.standard_normal((3, 4)), gen.standard_normal((3, 4))
        assert abs(adaptive_l1_penalty(Wh, Wh, 0.7) - 0.7) < 1e-12
        assert not adaptive_l1_penalty_gradient(np.zeros((3, 4)), Wh, 0.7).any()
        loop = 0.7 / 12 * sum(abs(W[i, j]) / abs(Wh[i, j]) for i in range(3) for j in range(4))
        assert abs(adaptive_l1_penalty(W, Wh, 0.7) - loop) / loop < 1e-10
        assert np.array_equal(l2_plus_al1(W, Wh, 0.2, 0.0), l2_penalty_gradient(W, 0.2))
        assert abs(l2_plus_al1_penalty(Wh, Wh, 0.0, 0.4) - 0.4) < 1e-12
        assert np.allclose(l2_plus_al1(W, Wh, 0.2, 0.7),
                           l2_penalty_gradient(W, 0.2) + adaptive_l1_penalty_gradient(W, Wh, 0.7))
        assert np.isfinite(adaptive_l1_penalty(W, np.zeros((3, 4)), 1.0))
        try:
            l2_plus_al1(W, None, 0.1, 0.1)
            raise AssertionError("missing reference accepted")
        except ContractError:
            pass
        ok("adaptive L1: W=W_hat gives mu, sign(0)=0, scalar loop, composition, clamp, missing W_hat")
    except Exception as e:
        fail("adaptive L1", _err(e))

    try:
        assert np.array_equal(snp_mask(W_hat, 0.5).retain_probs, [[0.0, 1.0], [1.0, 0.0]])
        assert snp_mask(W_hat, 0.999).retain_probs.all()
        assert np.array_equal(pdc_rates(W_hat, 0.5, 0.5).retain_probs, [[0.5, 1.0], [1.0, 0.5]])
        assert np.all(pdc_rates(W_hat, 0.5, 0.999).retain_probs == 1.0)
        rows = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
        assert np.array_equal(pdo_rates(rows, 0.5, 0.5).retain_probs, [0.5, 0.5, 1.0, 1.0])
        same = np.tile([[0.6, 0.8]], (4, 1))
        assert np.array_equal(pdo_rates(same, 0.5, 0.5).retain_probs, [1.0, 1.0, 0.5, 0.5])
        assert snp_mask(W_hat, 0.5).frozen
        ok("snp / pdc / pdo worked examples and row-index tie break")
    except Exception as e:
        fail("mask examples", _err(e))

    try:
        gen = RandomSource(32).generator
        for _ in range(200):
            I, J = gen.integers(1, 7, size=2)
            Wr = np.round(gen.standard_normal((I, J)), 1)
            p = float(gen.uniform(0.05, 0.95))
            assert np.array_equal(snp_mask(Wr, p).retain_probs > 0,
                                  _sort_oracle(np.abs(Wr), ceil_count(p, Wr.size)))
            assert np.array_equal(pdc_rates(Wr, 0.5, p).retain_probs == 1.0,
                                  _sort_oracle(np.abs(Wr), ceil_count(p, Wr.size)))
            norms = np.linalg.norm(Wr, axis=1)
            assert np.array_equal(pdo_rates(Wr, 0.5, p).retain_probs == 1.0,
                                  _sort_oracle(norms, ceil_count(p, I)))
        ok("snp / pdc / pdo agree with the full-sort oracle on 200 random matrices (with ties)")
    except Exception as e:
        fail("mask sort oracle", _err(e))

    try:
        gen = RandomSource(36).generator
        for _ in range(100):
            I, J = gen.integers(2, 7, size=2)
            Wr = gen.standard_normal((I, J))
            rows, cols = gen.permutation(I), gen.permutation(J)
            Wp = Wr[rows][:, cols]
            p = float(gen.uniform(0.05, 0.95))
            assert np.array_equal(snp_mask(Wp, p).retain_probs, snp_mask(Wr, p).retain_probs[rows][:, cols])
            assert np.array_equal(pdc_rates(Wp, 0.5, p).retain_probs,
                                  pdc_rates(Wr, 0.5, p).retain_probs[rows][:, cols])
            assert np.array_equal(pdo_rates(Wp, 0.5, p).retain_probs, pdo_rates(Wr, 0.5, p).retain_probs[rows])
        ok("snp / pdc / pdo masks follow row and column permutations of the weights")
    except Exception as e:
        fail("mask permutation", _err(e))

    try:
        gen = RandomSource(33).generator
        for _ in range(20):
            Wr = gen.standard_normal((3, 3))
            best = min(bound_term(Wr, np.where(np.isin(np.arange(9), c), 1.0, 0.5).reshape(3, 3))
                       for c in itertools.combinations(range(9), 3))
            assert abs(bound_term(Wr, pdc_rates(Wr, 0.5, 1 / 3)) - best) < 1e-12
        ok("pdc_rates minimizes the bound term over all 84 assignments (3x3, q=1/3)")
    except Exception as e:
        fail("pdc exhaustive", _err(e))

    try:
        rng = RandomSource(34)
        m = dropout_masks(100, 0.9, 64, rng.child(0))
        assert m.shape == (64, 100) and len({r.tobytes() for r in m}) == 64
        assert dropout_masks(5, 1.0, 8, rng.child(1)).all()
        eye = np.eye(3)
        frozen = MaskSpec('edge', eye, frozen=True)
        assert np.array_equal(dropconnect_mask(3, 3, frozen, rng.child(2)), eye)
        assert np.array_equal(dropconnect_mask(3, 3, frozen, rng.child(3)), eye)
        try:
            MaskSpec('node', np.array([0.5, 1.2]))
            raise AssertionError("probability > 1 accepted")
        except ContractError:
            pass
        ok("dropout masks differ per example; p=1 all ones; frozen masks repeat")
    except Exception as e:
        fail("mask sampling", _err(e))

    try:
        gen = RandomSource(35).generator
        p = RbmParams(np.zeros(4), np.zeros(3), np.zeros((3, 4)))
        batch = (gen.random((10, 4)) < 0.5).astype(float)
        g = sparsity_penalty_gradient(p, batch, 0.5, 2.0)
        assert not g.c.any() and not g.W.any()
        q = random_tiny_rbm(RandomSource(36), 4, 3, 0.5)
        assert not sparsity_penalty_gradient(q, batch, 0.1, 0.0).W.any()
        g = sparsity_penalty_gradient(q, batch, 0.1, 2.0)
        eps = 1e-6
        fd = np.zeros_like(q.W)
        for idx in np.ndindex(*q.W.shape):
            up, dn = q.copy(), q.copy()
            up.W[idx] += eps
            dn.W[idx] -= eps
            fd[idx] = (sparsity_penalty(up, batch, 0.1, 2.0) - sparsity_penalty(dn, batch, 0.1, 2.0)) / (2 * eps)
        assert np.linalg.norm(fd - g.W) / np.linalg.norm(fd) < 1e-5
        ok("sparsity penalty: zero gradient at target and at coef=0, finite differences")
    except Exception as e:
        fail("sparsity penalty", _err(e))

    try:
        try:
            Regularizer.from_config(RegConfig('snp', p=0.5), RbmParams.zeros(2, 2))
            raise AssertionError("snp built without its outer loop")
        except ContractError:
            pass
        assert RegConfig('dc', p=1.0).validate() and RegConfig('bogus').validate()
        try:
            fit_with_regularizer(RbmParams.zeros(2, 2), np.zeros((4, 2)), TrainConfig(epochs=1),
                                 RegConfig('do', p=1.5))
            raise AssertionError("bad p accepted")
        except ConfigError:
            pass
        try:
            RegConfig.from_dict({'mode': 'l2', 'lambda': 0.1})
            raise AssertionError("unknown key accepted")
        except ConfigError:
            pass
        ok("regularizer configuration errors")
    except Exception as e:
        fail("regularizer configuration", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(37), 6, 4, 0.5)
        data = _binary(RandomSource(38), 30, 6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=6)
        a, _ = sgd_epoch(q, data, cfg, None, RandomSource(5))
        b, _ = sgd_epoch(q, data, cfg, Regularizer(RegConfig('do'), MaskSpec('node', np.ones(4))), RandomSource(5))
        c, _ = sgd_epoch(q, data, cfg, Regularizer(RegConfig('dc'), MaskSpec('edge', np.ones((4, 6)))),
                         RandomSource(5))
        assert a.equals(b) and a.equals(c)
        cfg3 = TrainConfig(learning_rate=0.05, batch_size=6, epochs=3)
        plain = q
        for e in range(3):
            plain, _ = sgd_epoch(plain, data, cfg3, None, RandomSource(6).child(e), epoch=e + 1)
        protected = pdc_loop(q, data, 0.5, 0.999, cfg3, rng=RandomSource(6))
        assert protected.params.equals(plain)
        assert pdc_loop(q, data, 0.5, 0.8, TrainConfig(epochs=0), rng=RandomSource(6)).params.equals(q)
        ok("all-ones masks and fully protected PDC reproduce plain training bit-exactly")
    except Exception as e:
        fail("mask equivalences", _err(e))

    try:
        gen = RandomSource(39)
        q = random_tiny_rbm(gen.child(0), 10, 10)
        data = _binary(gen.child(1), 20, 10)
        cfg = TrainConfig(learning_rate=0.02, batch_size=10, epochs=3)
        res = inp_loop(q, data, 0.7, 3, cfg, rng=RandomSource(7))
        kept = [m.retain_probs > 0 for m in res.history]
        assert all(np.all(kept[t + 1] <= kept[t]) for t in range(len(kept) - 1))
        assert int(kept[-1].sum()) == 70
        assert not res.params.W[~kept[-1]].any()
        one = inp_loop(q, data, 0.6, 1, cfg, rng=RandomSource(8))
        snp = snp_loop(q, data, 0.6, cfg, rng=RandomSource(8))
        assert one.params.equals(snp.params)
        lines = []
        inp_loop(random_tiny_rbm(gen.child(2), 2, 1), data[:, :2], 0.9, 3,
                 TrainConfig(epochs=3), rng=RandomSource(9), on_log=lines.append)
        assert sum('[WARN]' in l for l in lines) == 3, lines
        ok("inp: nested masks, final fraction p, r=1 equals snp, skipped rounds warn")
    except Exception as e:
        fail("iterative pruning", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(40), 8, 5, 0.3)
        data = _binary(RandomSource(41), 40, 8)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, epochs=4)
        modes = {
            'none': RegConfig(), 'do': RegConfig('do', p=0.8), 'dc': RegConfig('dc', p=0.8),
            'l2': RegConfig('l2', lam=0.01), 'l2al1': RegConfig('l2al1', lam=0.01, mu=0.05),
            'snp': RegConfig('snp', p=0.9), 'inp': RegConfig('inp', p=0.7, r=2),
            'pdo': RegConfig('pdo', p0=0.5, q=0.6), 'pdc': RegConfig('pdc', p0=0.5, q=0.6, rate_updates=2),
            'sparsity': RegConfig('sparsity', sparsity_target=0.1, sparsity_coef=0.5),
        }
        for mode, rc in modes.items():
            seen = []
            res = fit_with_regularizer(q, data, cfg, rc, RandomSource(2),
                                       on_epoch=lambda e, ph, p, pen: seen.append((e, ph, pen)))
            assert isinstance(res, FitResult)
            assert np.all(np.isfinite(res.params.W)), mode
            assert [s[0] for s in seen] == [1, 2, 3, 4], (mode, seen)
            if mode == 'snp':
                assert int(res.mask.retain_probs.sum()) == ceil_count(0.9, 40)
            if mode in ('l2', 'sparsity'):
                assert all(s[2] > 0 for s in seen), mode
        mean = inference_params(q, MaskSpec.dropout(5, 0.8))
        assert np.allclose(mean.W, 0.8 * q.W)
        ok("fit_with_regularizer runs all ten modes with one callback per epoch")
    except Exception as e:
        fail("fit_with_regularizer", _err(e))

    section_passed(before)


# ============================================================
# 5. deep models
# ============================================================
def test_deep_models():
    before = section("5. deep models")

    try:
        try:
            LayerStack([RbmParams.zeros(4, 6), RbmParams.zeros(2, 3)])
            raise AssertionError("mismatched layers accepted")
        except ContractError:
            pass
        X = _binary(RandomSource(50), 30, 6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=10, epochs=2)
        stack = dbn_pretrain(X, [4], cfg, rng=RandomSource(51))
        single = train_rbm(X, 4, cfg, RegConfig(), RandomSource(51).child(0))
        assert stack.layers[0].equals(single.params)
        assert np.array_equal(propagate(single.params, None, X), cond_h_given_v(single.params, X))
        deep = dbn_pretrain(X, [4, 3], cfg, [RegConfig('do', p=0.8), RegConfig()], RandomSource(52))
        assert deep.sizes == [6, 4, 3] and deep.masks[0].kind == 'node'
        assert stack_features(deep, X).shape == (30, 3)
        grown = grow_top_layer(deep, 2)
        assert grown.sizes == [6, 4, 5] and not grown.top.W[3:].any()
        ok("LayerStack contract, single-layer DBN equals train_rbm, layer input is the conditional")
    except Exception as e:
        fail("DBN pretraining", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(53), 6, 4, 0.7)
        V = _binary(RandomSource(54), 10, 6)
        one = LayerStack([q])
        two = add_symmetric_layer(one)
        assert two.top.W.shape == (6, 4) and two.top.n_visible == 4
        gap = abs(dbn_bound(two, V).total - dbn_bound(one, V).total)
        assert gap < 1e-8, gap
        assert abs(dbn_bound(one, V).total - exact_log_likelihood(q, V)) < 1e-10
        ones = dbn_bound(two, V, [MaskSpec('node', np.ones(4)), None])
        assert abs(ones.total - dbn_bound(two, V).total) < 1e-12
        ok(f"symmetric layer keeps the bound (gap {gap:.1e}); all-ones mask equals unmasked")
    except Exception as e:
        fail("symmetric layer addition", _err(e))

    try:
        rng = RandomSource(58)
        V = _binary(rng.child(0), 12, 6)
        for t in range(5):
            stack = LayerStack([random_tiny_rbm(rng.child(t + 1), 6, 4), random_tiny_rbm(rng.child(t + 10), 4, 3)])
            before_growth = dbn_bound(stack, V).total
            after_growth = dbn_bound(grow_top_layer(stack, 1), V).total
            assert after_growth >= before_growth - 1e-10, (before_growth, after_growth)
        ok("adding a zero-initialized top node never lowers the bound")
    except Exception as e:
        fail("top-layer growth", _err(e))

    try:
        rng = RandomSource(55)
        stack = LayerStack([random_tiny_rbm(rng.child(0), 6, 4), random_tiny_rbm(rng.child(1), 4, 3)])
        V = _binary(rng.child(2), 8, 6)
        r = dbn_bound(stack, V)
        assert r.total <= dbn_log_likelihood(stack, V) + 1e-8
        assert abs(r.total - (r.entropy + r.expected_log_prior + r.expected_log_decoder)) < 1e-12
        masks = [MaskSpec.dropout(4, 0.5), None]
        rm = dbn_bound(stack, V, masks)
        assert rm.mask_states == 16
        assert rm.total <= dbn_log_likelihood(stack, V, masks) + 1e-8
        ok("DBN bound never exceeds the exact (mask-averaged) log-likelihood")
    except Exception as e:
        fail("DBN bound inequality", _err(e))

    try:
        zero = LayerStack([RbmParams.zeros(3, 4), RbmParams.zeros(2, 3)], flavor='dbm')
        mu = mean_field(zero, _binary(RandomSource(56), 5, 4))
        assert all(np.all(m == 0.5) for m in mu)
        rng = RandomSource(57)
        dbm = LayerStack([random_tiny_rbm(rng.child(0), 6, 5, 1.5), random_tiny_rbm(rng.child(1), 5, 4, 1.5)],
                         flavor='dbm')
        hist = []
        mean_field(dbm, _binary(rng.child(2), 12, 6), 15, hist)
        steps = np.diff(hist)
        assert len(hist) == 16 and np.all(steps <= 1e-10), steps.max()
        ok("mean field: 0.5 fixed point of the zero model, free energy non-increasing")
    except Exception as e:
        fail("mean field", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(58), 6, 4, 0.5)
        rows = np.repeat(_binary(RandomSource(59), 10, 6), 2000, axis=0)
        g_dbm = dbm_gradient(LayerStack([q], flavor='dbm'), rows, RandomSource(60), 3, 1)[0]
        g_cd = cd_gradient(q, rows, 1, rng=RandomSource(61))
        cos = _cos(g_dbm.as_vector(), g_cd.as_vector())
        assert cos > 0.95, cos
        ok(f"one-hidden-layer DBM gradient matches CD-1 (cos {cos:.4f})")
    except Exception as e:
        fail("DBM degenerates to RBM", _err(e))

    try:
        X = _binary(RandomSource(62), 40, 6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=10, epochs=2)
        phases = []
        stack = dbm_pretrain_and_train(X, [5, 3], cfg, [RegConfig('l2', lam=0.01), RegConfig()],
                                       TrainConfig(learning_rate=0.02, batch_size=10, epochs=2),
                                       RandomSource(63), mf_iters=5, gibbs_steps=2,
                                       on_epoch=lambda e, ph, p, pen: phases.append(ph))
        assert stack.flavor == 'dbm' and stack.sizes == [6, 5, 3]
        assert phases.count('joint') == 2 and phases[0].startswith('layer1:')
        F = stack_features(stack, X)
        assert F.shape == (40, 3) and np.all((F >= 0) & (F <= 1))
        ok("DBM pretrain + joint training: phases, sizes, mean-field features")
    except Exception as e:
        fail("DBM training", _err(e))

    section_passed(before)


# ============================================================
# 6. classifiers
# ============================================================
def test_classifiers():
    before = section("6. classifiers")

    try:
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        y = np.array([0, 0, 1, 1])
        head = logistic_head(X, y, 2)
        assert classification_error(head, X, y) == 0.0
        ok("logistic head separates a linearly separable toy set")
    except Exception as e:
        fail("logistic head", _err(e))

    try:
        gen = RandomSource(70).generator
        net = FfnnParams([0.5 * gen.standard_normal((4, 3)), 0.5 * gen.standard_normal((3, 4))],
                         [0.1 * gen.standard_normal(4), 0.1 * gen.standard_normal(3)],
                         0.5 * gen.standard_normal((2, 3)), np.zeros(2))
        X = gen.random((6, 3))
        y = np.array([0, 1, 1, 0, 1, 0])
        g = ffnn_gradient(net, X, y)
        arrays = net.hidden_W + net.hidden_c + [net.out_W, net.out_b]
        grads = g.hidden_W + g.hidden_c + [g.out_W, g.out_b]
        num, den, eps = 0.0, 0.0, 1e-6
        for arr, ga in zip(arrays, grads):
            for idx in np.ndindex(*arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                up = ffnn_loss(net, X, y)
                arr[idx] = old - eps
                dn = ffnn_loss(net, X, y)
                arr[idx] = old
                fd = (up - dn) / (2 * eps)
                num += (fd - ga[idx]) ** 2
                den += fd ** 2
        rel = math.sqrt(num / den)
        assert rel < 1e-5, rel
        ok(f"ffnn backprop matches finite differences ({rel:.1e})")
    except Exception as e:
        fail("ffnn gradient", _err(e))

    try:
        X = _binary(RandomSource(71), 40, 6)
        y = (X[:, 0] + X[:, 1] > 0).astype(int)
        stack = dbn_pretrain(X, [5], TrainConfig(learning_rate=0.05, batch_size=10, epochs=2),
                             rng=RandomSource(72))
        frozen = ffnn_finetune(stack, X[:30], y[:30], X[30:], y[30:], 2, freeze_pretrained=True,
                               rng=RandomSource(73))
        ref = logistic_head(stack_features(stack, X[:30]), y[:30], 2)
        assert np.allclose(frozen.out_W, ref.W, atol=1e-8) and np.allclose(frozen.out_b, ref.b, atol=1e-8)
        tuned = ffnn_finetune(stack, X[:30], y[:30], X[30:], y[30:], 2, epochs=5, lr=0.5,
                              batch_size=10, rng=RandomSource(74))
        errs = [h[2] for h in tuned.history]
        assert tuned.best_epoch == errs.index(min(errs))
        ok("frozen fine-tuning equals the logistic head; early stopping keeps the earliest best epoch")
    except Exception as e:
        fail("ffnn fine-tuning", _err(e))

    try:
        y = np.array([0, 1, 2, 0, 1, 2])
        assert classification_error(np.eye(3)[y], None, y) == 0.0
        const = np.tile([1.0, 0.0, 0.0], (6, 1))
        assert abs(classification_error(const, None, y) - 2 / 3) < 1e-15
        tie = np.array([[0.5, 0.5]])
        assert classification_error(tie, None, np.array([0])) == 0.0
        S = RandomSource(75).generator.random((50, 4))
        yy = RandomSource(76).generator.integers(0, 4, 50)
        confusion = np.zeros((4, 4))
        for t, pr in zip(yy, S.argmax(axis=1)):
            confusion[t, pr] += 1
        assert abs(classification_error(S, None, yy) - (1 - np.trace(confusion) / 50)) < 1e-15
        assert classification_error(np.zeros((0, 3)), None, np.zeros(0)) == 0.0
        ok("classification error: perfect, constant, ties, confusion recount, empty")
    except Exception as e:
        fail("classification error", _err(e))

    try:
        gen = RandomSource(67).generator
        S = gen.standard_normal((200, 5))
        y = gen.integers(0, 5, size=200)
        base_err = classification_error(S, None, y)
        for transform in (np.exp, lambda s: 3.0 * s + 1.0, lambda s: s ** 3, np.arctan):
            assert classification_error(transform(S), None, y) == base_err
        ok("classification error is unchanged by strictly increasing score transforms")
    except Exception as e:
        fail("argmax invariance", _err(e))

    section_passed(before)


# ============================================================
# 7. evaluation
# ============================================================
def test_evaluation():
    before = section("7. evaluation")

    try:
        V = _binary(RandomSource(80), 9, 7)
        assert abs(pseudo_likelihood(RbmParams.zeros(3, 7), V) + 7 * math.log(2.0)) < 1e-12
        q = random_tiny_rbm(RandomSource(81), 6, 4)
        err = pl_enumeration_error(q, _binary(RandomSource(82), 12, 6))
        assert err < 1e-10, err
        ok(f"pseudo-likelihood: -J log 2 for the zero model, enumeration oracle ({err:.1e})")
    except Exception as e:
        fail("pseudo-likelihood", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(83), 6, 4)
        V = np.repeat(_binary(RandomSource(84), 20, 6), 500, axis=0)
        full = pseudo_likelihood(q, V)
        stoch = pseudo_likelihood(q, V, 'stochastic', RandomSource(85))
        fe = free_energy(q, V)
        T = np.empty_like(V)
        for j in range(6):
            flipped = V.copy()
            flipped[:, j] = 1.0 - flipped[:, j]
            T[:, j] = -log1p_exp(fe - free_energy(q, flipped))
        sigma = math.sqrt(np.sum((6 * T).var(axis=1))) / V.shape[0]
        assert abs(stoch - full) < 3 * sigma + 1e-12, (stoch, full, sigma)
        ok("stochastic pseudo-likelihood is unbiased (within 3 sigma over 1e4 rows)")
    except Exception as e:
        fail("stochastic pseudo-likelihood", _err(e))

    try:
        data = _binary(RandomSource(86), 50, 6, 0.3)
        base = base_rate_params(data, 4)
        log_z, stderr = ais_log_partition(base, AisConfig(200, 20, base))
        analytic = 4 * math.log(2.0) + float(np.sum(log1p_exp(base.b)))
        assert log_z == analytic and stderr == 0.0
        assert abs(log_z - exact_log_partition(base)) < 1e-10
        zero = RbmParams.zeros(4, 6)
        z0, _ = ais_log_partition(zero, AisConfig(50, 10))
        assert abs(z0 - 10 * math.log(2.0)) < 1e-12
        assert abs(ais_log_likelihood(zero, data, AisConfig(50, 10)) + 6 * math.log(2.0)) < 1e-12
        ok("AIS: exact at the base model and at the zero model")
    except Exception as e:
        fail("AIS exact cases", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(87), 6, 4)
        V = _binary(RandomSource(88), 20, 6)
        cfg = AisConfig(1000, 100, base_rate_params(V, 4), seed=1)
        log_z, _ = ais_log_partition(q, cfg)
        assert abs(log_z - exact_log_partition(q)) < 0.1
        assert abs(ais_log_likelihood(q, V, cfg) - exact_log_likelihood(q, V)) < 0.1
        assert AisConfig(1, 1).validate()
        ok(f"AIS: log Z within 0.1 of enumeration (error {abs(log_z - exact_log_partition(q)):.3f})")
    except Exception as e:
        fail("AIS accuracy", _err(e))

    try:
        q = random_tiny_rbm(RandomSource(90), 6, 4)
        base = base_rate_params(_binary(RandomSource(91), 40, 6), 4)
        runs = np.array([100, 400, 1600])
        mean_stderr = [np.mean([ais_log_partition(q, AisConfig(100, int(m), base, seed=s))[1]
                                for s in range(8)]) for m in runs]
        slope = np.polyfit(np.log(runs), np.log(mean_stderr), 1)[0]
        assert -0.65 <= slope <= -0.35, slope
        ok(f"AIS stderr falls as 1/sqrt(runs) (log-log slope {slope:.2f})")
    except Exception as e:
        fail("AIS stderr scaling", _err(e))

    try:
        theta0 = random_tiny_rbm(RandomSource(89), 4, 3)
        rep = convergence_suite(theta0, [200], RegConfig(), TrainConfig(learning_rate=0.0, epochs=1),
                                seeds=(0, 1))
        assert len(rep.rows) == 2 and all(r.tv == r.init_tv for r in rep.rows)
        assert set(rep.median_tv()) == {200}
        ok("recovery suite with lr=0 reports the initialization distance")
    except Exception as e:
        fail("recovery suite", _err(e))

    section_passed(before)


# ============================================================
# 8. datasets
# ============================================================
def test_datasets():
    before = section("8. datasets")
    tmp = Path(tempfile.mkdtemp(prefix='rbmreg_ds_'))

    try:
        img = tmp / 'imgs.idx'
        img.write_bytes(struct.pack('>IIII', 0x803, 2, 2, 2) + bytes([0, 255, 255, 0, 255, 255, 0, 0]))
        lab = tmp / 'labels.idx'
        lab.write_bytes(struct.pack('>II', 0x801, 2) + bytes([3, 7]))
        ds = load_idx(img, lab)
        assert np.array_equal(ds.X, [[0, 1, 1, 0], [1, 1, 0, 0]])
        assert list(ds.labels) == [3, 7] and ds.kind == 'binary'
        empty = tmp / 'empty.idx'
        empty.write_bytes(struct.pack('>IIII', 0x803, 0, 2, 2))
        e = load_idx(empty)
        assert e.n_rows == 0 and e.n_features == 4
        ok("IDX: synthetic file parsed and binarized; empty image set")
    except Exception as e:
        fail("IDX parsing", _err(e))

    try:
        bad = tmp / 'bad.idx'
        bad.write_bytes(struct.pack('>IIII', 0x804, 1, 1, 1) + b'\x00')
        try:
            load_idx(bad)
            raise AssertionError("bad magic accepted")
        except IdxMagicError as e:
            assert e.offset == 0 and 'offset 0' in str(e)
        short = tmp / 'short.idx'
        short.write_bytes(struct.pack('>IIII', 0x803, 2, 2, 2) + b'\x00\x01\x02')
        try:
            load_idx(short)
            raise AssertionError("truncated file accepted")
        except IdxTruncatedError:
            pass
        huge = tmp / 'huge.idx'
        huge.write_bytes(struct.pack('>IIII', 0x803, 65536, 65536, 1))
        try:
            load_idx(huge)
            raise AssertionError("oversized dimensions accepted")
        except IdxDimensionError as e:
            assert e.offset == 8
        ok("IDX errors: magic (offset 0), truncation, dimension overflow")
    except Exception as e:
        fail("IDX errors", _err(e))

    try:
        f = tmp / 'one.txt'
        f.write_text('a a b\n', encoding='utf-8')
        ds = load_bow(f, 2)
        assert ds.vocab == ['a', 'b'] and np.array_equal(ds.X, [[2.0, 1.0]])
        assert load_bow(f, 10).n_features == 2
        f2 = tmp / 'two.txt'
        f2.write_text('1\ta b:2\n0\tzzz\n', encoding='utf-8')
        lines = []
        ds2 = load_bow(f2, 2, on_log=lines.append)
        assert ds2.dropped == 1 and ds2.n_rows == 1 and list(ds2.labels) == [1]
        assert any('[WARN]' in l for l in lines)
        gen = RandomSource(90).generator
        words = [f'w{k}' for k in range(30)]
        docs = [Counter(gen.choice(words, size=gen.integers(1, 15))) for _ in range(40)]
        total = Counter()
        for d in docs:
            total.update(d)
        oracle = [t for t, _ in sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))][:12]
        assert top_vocabulary(docs, 12) == oracle
        ok("bag of words: counts, small corpus, empty document dropped, top-k sort oracle")
    except Exception as e:
        fail("bag of words", _err(e))

    try:
        f = tmp / 'feat.csv'
        f.write_text('1,5,0\n2,5,1\n3,5,0\n4,5,1\n100,5,1\n101,5,0\n', encoding='utf-8')
        tags = np.array(['train'] * 4 + ['valid'] * 2, dtype=object)
        ds = load_csv_features(f, label_column=2, splits=tags)
        assert ds.kind == 'real' and list(ds.labels) == [0, 1, 0, 1, 1, 0]
        assert not ds.X[:, 1].any()
        Xt, _ = ds.split('train')
        assert abs(Xt[:, 0].mean()) < 1e-10 and abs(Xt[:, 0].var() - 1.0) < 1e-10
        Xv, _ = ds.split('valid')
        assert Xv[:, 0].mean() > 10.0
        f2 = tmp / 'bad.csv'
        f2.write_text('1,2\n3,x\n', encoding='utf-8')
        try:
            load_csv_features(f2)
            raise AssertionError("non-numeric cell accepted")
        except CsvFormatError as e:
            assert (e.row, e.col) == (2, 2)
        ok("CSV: constant column zeroed, train stats 0/1, valid uses train stats, bad cell located")
    except Exception as e:
        fail("CSV features", _err(e))

    try:
        tags = assign_splits(50, 10, 5, RandomSource(91))
        assert Counter(tags) == {'train': 35, 'valid': 10, 'test': 5}
        a = synthetic_digits(30, RandomSource(92))
        b = synthetic_digits(30, RandomSource(92))
        assert a.X.shape == (30, 64) and np.array_equal(a.X, b.X) and np.array_equal(a.labels, b.labels)
        assert set(np.unique(a.X)) <= {0.0, 1.0}
        ok("split assignment and deterministic synthetic digits")
    except Exception as e:
        fail("splits / synthetic digits", _err(e))

    shutil.rmtree(tmp, ignore_errors=True)
    section_passed(before)


# ============================================================
# 9. configuration, metrics, checkpoints
# ============================================================
def test_config_and_files():
    before = section("9. configuration, metrics, checkpoints")
    tmp = Path(tempfile.mkdtemp(prefix='rbmreg_cfg_'))

    try:
        cfg = ExperimentConfig(model='dbn', layer_sizes=[8, 4],
                               reg=[RegConfig('do', p=0.8), RegConfig('l2', lam=0.01)])
        d = cfg.to_dict()
        assert ExperimentConfig.from_dict(json.loads(json.dumps(d))).to_dict() == d
        assert cfg.validate() == []
        cfg.save(tmp / 'c.json')
        assert ExperimentConfig.load(tmp / 'c.json').to_dict() == d
        ok("ExperimentConfig JSON round trip")
    except Exception as e:
        fail("config round trip", _err(e))

    try:
        for bad in ({'modle': 'rbm'}, {'train': {'epoch': 3}}, {'data': {'sorce': 'idx'}}):
            try:
                ExperimentConfig.from_dict(bad)
                raise AssertionError(f"accepted {bad}")
            except ConfigError as e:
                assert 'unknown field' in str(e)
        errs = ExperimentConfig(model='rbm', layer_sizes=[5, 3]).validate()
        assert any('exactly one hidden layer' in e for e in errs)
        errs = ExperimentConfig(model='dbn', layer_sizes=[5, 3]).validate()
        assert errs == []
        cfg = ExperimentConfig.from_dict({'head': {'kind': 'ffnn'}})
        assert any('n_valid' in e for e in cfg.validate())
        cfg = ExperimentConfig.from_dict({'model': 'dbn', 'layer_sizes': [4, 2], 'eval': {'ais': True}})
        assert any('eval.ais' in e for e in cfg.validate())
        (tmp / 'broken.json').write_text('{"model": ', encoding='utf-8')
        try:
            ExperimentConfig.load(tmp / 'broken.json')
            raise AssertionError("invalid JSON accepted")
        except ConfigError:
            pass
        ok("config rejects unknown keys, wrong layer counts, ffnn without validation, AIS on DBN")
    except Exception as e:
        fail("config validation", _err(e))

    try:
        rec = MetricsRecorder(tmp / 'm' / 'metrics.csv')
        rec.append(MetricsRow(0, 'init', pseudo_likelihood=-3.25, valid_err=0.5))
        rec.open()
        rec.append(MetricsRow(1, 'train', -2.5, penalty_value=0.0))
        rec.append(MetricsRow(1, 'final', -2.0, -2.1, 0.01, None, 0.1, 0.2))
        rec.finalize()
        lines = (tmp / 'm' / 'metrics.csv').read_text(encoding='utf-8').split('\n')
        assert lines[0] == f'# schema,metrics_v1,rbmreg,{LIB_VERSION}'
        assert lines[1] == ','.join(METRICS_COLUMNS)
        assert lines[2] == '0,init,-3.25,,,,,0.5,' and len(lines) == 6 and lines[-1] == ''
        rows = read_metrics(tmp / 'm' / 'metrics.csv')
        assert rows == rec.rows
        assert run_valid_error(rows) == 0.2
        assert run_valid_error(rows[:2]) == 0.5 and run_valid_error([]) is None
        assert fmt_float(1 / 3) == '0.3333333333'
        ok("metrics CSV: schema line, header, blank cells, buffering, round trip, reported error")
    except Exception as e:
        fail("metrics CSV", _err(e))

    try:
        rng = RandomSource(100)
        stack = LayerStack([random_tiny_rbm(rng.child(0), 6, 4), random_tiny_rbm(rng.child(1), 4, 3)],
                           [MaskSpec.dropout(4, 0.8), MaskSpec('edge', np.eye(3, 4), frozen=True)])
        head = LogisticHead(rng.child(2).generator.standard_normal((2, 3)), np.array([0.1, -0.1]))
        path = save_checkpoint(tmp / 'ck.npz', Checkpoint(stack, 'dbn', 5, 7, head, [], {'note': 'x'}))
        back = load_checkpoint(path)
        assert all(a.equals(b) for a, b in zip(stack.layers, back.stack.layers))
        assert back.stack.masks[0].kind == 'node' and np.array_equal(back.stack.masks[0].retain_probs, [0.8] * 4)
        assert back.stack.masks[1].frozen
        assert np.array_equal(back.head.W, head.W) and back.model == 'dbn' and back.epoch == 7
        assert back.meta == {'note': 'x'}
        net = FfnnParams([stack.layers[0].W.copy()], [stack.layers[0].c.copy()], np.ones((2, 4)), np.zeros(2),
                         best_epoch=3)
        back2 = load_checkpoint(save_checkpoint(tmp / 'ck2.npz', Checkpoint(LayerStack([stack.layers[0]]),
                                                                            head=net)))
        assert isinstance(back2.head, FfnnParams) and back2.head.best_epoch == 3
        assert back2.stack.masks == [None]
        (tmp / 'junk.npz').write_bytes(b'not an archive')
        try:
            load_checkpoint(tmp / 'junk.npz')
            raise AssertionError("junk accepted")
        except CheckpointError:
            pass
        ok("checkpoint round trip: layers bit-exact, masks, logistic and ffnn heads")
    except Exception as e:
        fail("checkpoint", _err(e))

    shutil.rmtree(tmp, ignore_errors=True)
    section_passed(before)


# ============================================================
# 10. run engine and sweeps
# ============================================================
def test_runs_and_sweeps():
    before = section("10. run engine and sweeps")
    tmp = Path(tempfile.mkdtemp(prefix='rbmreg_run_'))

    try:
        res = run_experiment(_tiny_config(tmp / 'zero', train={'epochs': 0}))
        text = res.metrics_path.read_text(encoding='utf-8').splitlines()
        assert len(text) == 3 and text[2].startswith('0,init,')
        assert [r.phase for r in res.rows] == ['init']
        for name in ('config.json', 'manifest.json', 'checkpoint.npz', 'summary.json'):
            assert (res.run_dir / name).exists(), name
        ok("epochs=0 run writes only the header and the init row")
    except Exception as e:
        fail("epochs=0 run", _err(e))

    try:
        a = run_experiment(_tiny_config(tmp / 'a'))
        b = run_experiment(_tiny_config(tmp / 'b'))
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
        assert [r.phase for r in a.rows] == ['init', 'train', 'train', 'final']
        assert a.rows[-1].valid_err is not None and a.summary['test_err'] is not None
        assert load_checkpoint(a.checkpoint_path).params.equals(load_checkpoint(b.checkpoint_path).params)
        ok("identical config and seed give byte-identical metrics and checkpoints")
    except Exception as e:
        fail("run determinism", _err(e))

    try:
        res = run_experiment(_tiny_config(tmp / 'dbn', model='dbn', layer_sizes=[8, 4],
                                          reg=[{'mode': 'do', 'p': 0.8}, {'mode': 'none'}],
                                          head={'kind': 'ffnn', 'epochs': 3, 'learning_rate': 0.2}))
        phases = [r.phase for r in res.rows]
        assert phases[0] == 'init' and phases[-1] == 'final'
        assert phases.count('finetune') == 3 and 'layer2:train' in phases
        assert all(r.pseudo_likelihood is None for r in res.rows if r.phase.startswith('layer2'))
        ok("DBN run with ffnn head records layer and fine-tuning phases")
    except Exception as e:
        fail("DBN run", _err(e))

    try:
        cfg = _tiny_config(tmp / 'missing', data={'source': 'idx', 'path': str(tmp / 'nope.idx')})
        try:
            run_experiment(cfg)
            raise AssertionError("missing file accepted")
        except OSError:
            pass
        err = json.loads((tmp / 'missing' / 'error.json').read_text(encoding='utf-8'))
        assert err['error'] == 'FileNotFoundError'
        assert (tmp / 'missing' / 'config.json').exists()
        ok("failed run leaves config.json and error.json")
    except Exception as e:
        fail("failed run", _err(e))

    try:
        template = _tiny_config(tmp / 'sw1')
        res = sweep(template, {'train.epochs': [2]})
        cell = tmp / 'sw1' / 'cell000' / 'rep0' / 'metrics.csv'
        plain = run_experiment(_tiny_config(tmp / 'plain'))
        assert cell.read_bytes() == plain.metrics_path.read_bytes()
        assert len(res.rows) == 1 and res.winner is res.rows[0]
        ok("1-cell sweep reproduces run_experiment")
    except Exception as e:
        fail("1-cell sweep", _err(e))

    try:
        template = _tiny_config(tmp / 'sw2', train={'epochs': 1, 'batch_size': 10, 'learning_rate': 0.05})
        res = sweep(template, {'train.learning_rate': [0.0, 0.1], 'reg.mode': ['none']}, replicates=2)
        assert [r.params for r in res.rows] == [{'train.learning_rate': 0.0, 'reg.mode': 'none'},
                                                {'train.learning_rate': 0.1, 'reg.mode': 'none'}]
        means = [float(np.mean(r.valid_errs)) for r in res.rows]
        assert res.winner.cell == int(np.argmin(means))
        lines = res.path.read_text(encoding='utf-8').splitlines()
        assert lines[0].startswith('# schema,sweep_v1') and lines[-1].startswith('winner,')
        assert (tmp / 'sw2' / 'cell001' / 'rep1' / 'metrics.csv').exists()
        try:
            sweep(template, {})
            raise AssertionError("empty grid accepted")
        except ConfigError:
            pass
        try:
            grid_cells({'train.epochs': []})
            raise AssertionError("empty value list accepted")
        except ConfigError:
            pass
        ok("sweep: cartesian cells, replicate directories, recounted winner, empty grid rejected")
    except Exception as e:
        fail("sweep", _err(e))

    try:
        row = SweepRow(0, {}, [0.1, 0.2, 0.4])
        m = (0.1 + 0.2 + 0.4) / 3
        direct = math.sqrt(((0.1 - m) ** 2 + (0.2 - m) ** 2 + (0.4 - m) ** 2) / 2)
        assert abs(row.valid_err_sd - direct) < 1e-15
        assert SweepRow(1, {}, [0.3]).valid_err_sd is None
        tied = [SweepRow(0, {}, [0.2]), SweepRow(1, {}, [0.1]), SweepRow(2, {}, [0.1])]
        assert select_winner(tied).cell == 1 and select_winner([SweepRow(0, {}, [None])]) is None
        assert cell_seed(5, 3, 1) == 5 and cell_seed(0, 0, 0) == 0
        ok("replicate sd uses n-1; winner ties go to the lower cell; cell seeds")
    except Exception as e:
        fail("sweep statistics", _err(e))

    shutil.rmtree(tmp, ignore_errors=True)
    section_passed(before)


# ============================================================
# 11. command line
# ============================================================
def _cli(argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
        code = main_cli.main(argv)
    return code, out.getvalue()


def test_cli():
    before = section("11. command line")
    tmp = Path(tempfile.mkdtemp(prefix='rbmreg_cli_'))

    try:
        cfg = _tiny_config(tmp / 'run')
        cfg.save(tmp / 'cfg.json')
        code, out = _cli(['--quiet', 'train', str(tmp / 'cfg.json')])
        assert code == 0, code
        summary = json.loads(out)
        assert summary['model'] == 'rbm' and Path(summary['run_dir']).exists()
        code, out = _cli(['--quiet', 'eval', str(tmp / 'run' / 'checkpoint.npz'), '--pl'])
        assert code == 0 and json.loads(out)['pseudo_likelihood'] < 0
        ok("train and eval exit 0 with JSON on stdout")
    except Exception as e:
        fail("cli train/eval", _err(e))

    try:
        glyphs = (synthetic_digits(12, RandomSource(5)).X * 255).astype(np.uint8)
        img = tmp / 'digits.idx'
        img.write_bytes(struct.pack('>IIII', 0x803, 12, 8, 8) + glyphs.tobytes())
        labels = synthetic_digits(12, RandomSource(5)).labels.astype(np.uint8)
        lab = tmp / 'digits_labels.idx'
        lab.write_bytes(struct.pack('>II', 0x801, 12) + labels.tobytes())
        code, out = _cli(['--quiet', 'classify', str(tmp / 'run' / 'checkpoint.npz'), str(img),
                          '--labels', str(lab), '--out', str(tmp / 'cls')])
        res = json.loads(out)
        assert code == 0 and res['rows'] == 12 and 0.0 <= res['error'] <= 1.0
        assert np.load(res['features']).shape == (12, 8)
        ok("classify writes features and predictions for an IDX file")
    except Exception as e:
        fail("cli classify", _err(e))

    try:
        gen = RandomSource(44).generator
        raw = gen.normal([3.0, -2.0, 10.0], [1.0, 2.0, 0.5], size=(40, 3))
        lab = (raw[:, 0] > 3.0).astype(int)
        csv_train = tmp / 'real.csv'
        csv_train.write_text(''.join(f'{a:.6f},{b:.6f},{c:.6f},{y}\n' for (a, b, c), y in zip(raw, lab)),
                             encoding='utf-8')
        cfg = _tiny_config(tmp / 'grbm', model='grbm', layer_sizes=[4],
                           data={'source': 'csv', 'path': str(csv_train), 'label_column': 3,
                                 'n_valid': 5, 'n_test': 5},
                           eval={'pl': 'none'})
        cfg.save(tmp / 'grbm.json')
        code, _ = _cli(['--quiet', 'train', str(tmp / 'grbm.json')])
        assert code == 0, code
        ckpt = load_checkpoint(tmp / 'grbm' / 'checkpoint.npz')
        tags = load_dataset(cfg.data, RandomSource(cfg.seed).child(1)).splits
        Xt = raw[tags == 'train']
        assert np.allclose(ckpt.feature_mean, Xt.mean(axis=0), atol=1e-5)
        assert np.allclose(ckpt.feature_std, Xt.std(axis=0), atol=1e-5)
        shifted = raw[:4] + 5.0
        csv_new = tmp / 'shifted.csv'
        csv_new.write_text(''.join(f'{a:.6f},{b:.6f},{c:.6f}\n' for a, b, c in shifted), encoding='utf-8')
        code, out = _cli(['--quiet', 'classify', str(tmp / 'grbm' / 'checkpoint.npz'), str(csv_new),
                          '--out', str(tmp / 'grbm_cls')])
        assert code == 0, code
        feats = np.load(json.loads(out)['features'])
        Z = (np.round(shifted, 6) - ckpt.feature_mean) / ckpt.feature_std
        assert np.allclose(feats, stack_features(ckpt.stack, Z), atol=1e-9)
        ok("gaussian checkpoint keeps training standardization; classify applies it to new CSV rows")
    except Exception as e:
        fail("cli classify csv standardization", _err(e))

    try:
        (tmp / 'bad.json').write_text(json.dumps({'model': 'rbm', 'learning_rate': 0.1}), encoding='utf-8')
        code, _ = _cli(['--quiet', 'train', str(tmp / 'bad.json')])
        assert code == 2, code
        code, _ = _cli(['--quiet', 'eval', str(tmp / 'absent.npz')])
        assert code == 1, code
        code, out = _cli(['--quiet', 'oracle', str(tmp / 'cfg.json')])
        assert code == 0 and all(c['passed'] for c in json.loads(out)['checks'])
        ok("exit codes: 2 for config errors, 1 for other failures, oracle passes")
    except Exception as e:
        fail("cli exit codes", _err(e))

    shutil.rmtree(tmp, ignore_errors=True)
    section_passed(before)


TESTS = [
    test_numerics,
    test_rbm_core,
    test_layer_kinds,
    test_regularizers,
    test_deep_models,
    test_classifiers,
    test_evaluation,
    test_datasets,
    test_config_and_files,
    test_runs_and_sweeps,
    test_cli,
]


if __name__ == '__main__':
    for fn in TESTS:
        try:
            fn()
        except AssertionError:
            pass
        except Exception as e:
            fail(fn.__name__, f"crashed: {_err(e)}")

    section("TEST SUMMARY")
    total = PASS + FAIL
    print(f"\n  Total: {total}  |  PASS: {PASS}  |  FAIL: {FAIL}")
    if ERRORS:
        print(f"\n  Failures:")
        for e in ERRORS:
            print(f"    {e}")
    print()
    sys.exit(0 if FAIL == 0 else 1)
