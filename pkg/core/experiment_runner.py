# -*- coding: utf-8 -*-
"""
core.experiment_runner - Run engine behind the CLI.

``run_experiment`` executes pretrain -> head -> eval for one config and
writes the run directory; ``sweep`` runs the cartesian product of a grid
over a template config and summarizes by validation error;
``run_oracle`` runs the enumeration cross-checks on a random tiny model.

Random streams are derived from the config seed: child 0 trains the model,
child 1 builds the data (synthetic draw, split tags), child 2 drives the
supervised head, child 3 the stochastic pseudo-likelihood.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from core.checkpoint import Checkpoint, save_checkpoint, save_features
from core.classifiers import ffnn_finetune, logistic_head
from core.config_model import DataConfig, ExperimentConfig
from core.constants import LIB_VERSION, SWEEP_COLUMNS
from core.csv_recorder import MetricsRecorder, MetricsRow, run_valid_error
from core.datasets import Dataset, assign_splits, load_bow, load_csv_features, load_idx, synthetic_digits
from core.deep_models import (
    LayerStack,
    dbm_pretrain_and_train,
    dbn_pretrain,
    grbm_train,
    rsm_train,
    stack_features,
    train_rbm,
)
from core.evaluation import (
    AisConfig,
    ais_log_partition,
    base_rate_params,
    classification_error,
    pseudo_likelihood,
)
from core.helpers import ConfigError, fmt_float, make_log, resolve_run_dir
from core.numerics import ContractError, RandomSource, enumerate_binary
from core.rbm import (
    RbmParams,
    energy,
    exact_gradient,
    exact_log_likelihood,
    exact_log_partition,
    exact_visible_distribution,
    free_energy,
)
from core.regularizers import inference_params

FIRST_KIND = {'binary': 'bernoulli', 'real': 'gaussian', 'counts': 'softmax'}


# ------------------------------------------------------------------ #
# Data
# ------------------------------------------------------------------ #

def load_dataset(cfg: DataConfig, rng: RandomSource, on_log=None) -> Dataset:
    """Build the Dataset a config names, split tags included."""
    def split_fn(n: int) -> np.ndarray:
        return assign_splits(n, cfg.n_valid, cfg.n_test, rng.child(1))

    if cfg.source == 'synthetic_digits':
        ds = synthetic_digits(cfg.n_examples, rng.child(0))
        return ds.with_splits(split_fn(ds.n_rows))
    if cfg.source == 'idx':
        ds = load_idx(cfg.path, cfg.labels_path or None, cfg.threshold)
        if cfg.n_examples and ds.n_rows > cfg.n_examples:
            keep = slice(0, cfg.n_examples)
            labels = ds.labels[keep] if ds.labels is not None else None
            ds = Dataset(ds.kind, ds.X[keep], labels, provenance=f'{ds.provenance}[:{cfg.n_examples}]')
        return ds.with_splits(split_fn(ds.n_rows))
    if cfg.source == 'bow':
        return load_bow(cfg.path, cfg.vocab_size, split_fn, on_log=on_log)
    if cfg.source == 'csv':
        return load_csv_features(cfg.path, cfg.label_column, split_fn, cfg.has_header)
    raise ContractError(f'unknown data source "{cfg.source}"')


# ------------------------------------------------------------------ #
# Single run
# ------------------------------------------------------------------ #

@dataclass
class RunResult:
    run_dir: Path
    metrics_path: Path
    checkpoint_path: Path | None
    summary: dict[str, Any]
    rows: list[MetricsRow] = field(default_factory=list)


def _manifest(config: ExperimentConfig) -> dict[str, Any]:
    return {
        'lib_version': LIB_VERSION,
        'python': sys.version.split()[0],
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'platform': platform.platform(),
        'seed': config.seed,
        'streams': {'model': 0, 'data': 1, 'head': 2, 'pl': 3},
    }


def _write_json(path: Path, obj: Any):
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True), encoding='utf-8')


def _is_bottom_phase(phase: str) -> bool:
    if phase == 'joint':
        return False
    return not phase.startswith('layer') or phase.startswith('layer1:')


def _n_classes(ds: Dataset) -> int:
    return int(ds.labels.max()) + 1 if ds.labels is not None and ds.labels.size else 1


def _head_errors(classifier, ds: Dataset, transform) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for name in ('train', 'valid', 'test'):
        X, y = ds.split(name)
        out[f'{name}_err'] = classification_error(classifier, transform(X), y) if y is not None and y.size else None
    return out


class _Run:
    """State shared by the phases of one run."""

    def __init__(self, config: ExperimentConfig, run_dir: Path, on_log):
        self.config = config
        self.run_dir = run_dir
        self.log = make_log(on_log)
        self.on_log = on_log
        self.rng = RandomSource(config.seed)
        self.recorder = MetricsRecorder(run_dir / 'metrics.csv')
        self.t0 = time.perf_counter()
        self.ds: Dataset | None = None
        self.eval_X: np.ndarray | None = None

    def wall(self) -> float | None:
        return time.perf_counter() - self.t0 if self.config.record_wall_time else None

    def pl(self, params: RbmParams, epoch: int) -> float | None:
        cfg = self.config.eval
        if cfg.pl == 'none' or self.ds.kind != 'binary' or params.kind != 'bernoulli':
            return None
        return pseudo_likelihood(params, self.eval_X, cfg.pl, self.rng.child(3).child(epoch))

    def on_epoch(self, epoch: int, phase: str, params: RbmParams, penalty: float):
        pl = None
        if _is_bottom_phase(phase) and epoch % self.config.eval.eval_every == 0:
            pl = self.pl(params, epoch)
        self.recorder.append(MetricsRow(epoch, phase, pseudo_likelihood=pl, penalty_value=penalty,
                                        wall_seconds=self.wall()))

    # ── phases ──

    def initial_layer(self) -> RbmParams:
        # train_rbm draws the bottom layer's init from rng.child(0) of the layer stream
        kind = FIRST_KIND[self.ds.kind]
        return RbmParams.init(self.config.layer_sizes[0], self.ds.n_features,
                              self.rng.child(0).child(0).child(0), kind)

    def init_row(self):
        params = self.initial_layer()
        errs: dict[str, float | None] = {}
        if self.ds.labels is not None and self.config.head.kind != 'none':
            errs = self.logistic_errors(LayerStack([params]))
        self.recorder.append(MetricsRow(0, 'init', pseudo_likelihood=self.pl(params, 0),
                                        train_err=errs.get('train_err'), valid_err=errs.get('valid_err'),
                                        wall_seconds=self.wall()))

    def logistic_errors(self, stack: LayerStack) -> dict[str, float | None]:
        X_train, y_train = self.ds.split('train')
        head = logistic_head(stack_features(stack, X_train), y_train, _n_classes(self.ds), self.config.head.l2)
        return _head_errors(head, self.ds, lambda X: stack_features(stack, X))

    def train(self) -> LayerStack:
        cfg = self.config
        X_train, _ = self.ds.split('train')
        model_rng = self.rng.child(0)
        trains, regs = cfg.train_configs(), cfg.reg_configs()
        first_kind = FIRST_KIND[self.ds.kind]
        if cfg.model in ('rbm', 'rsm', 'grbm'):
            size = cfg.layer_sizes[0]
            if cfg.model == 'rsm':
                res = rsm_train(X_train, size, trains[0], regs[0], model_rng.child(0), self.on_epoch, self.on_log)
            elif cfg.model == 'grbm':
                res = grbm_train(X_train, size, trains[0], regs[0], model_rng.child(0), self.on_epoch, self.on_log)
            else:
                res = train_rbm(X_train, size, trains[0], regs[0], model_rng.child(0), first_kind,
                                self.on_epoch, self.on_log)
            return LayerStack([res.params], [res.mask])
        if cfg.model == 'dbn':
            return dbn_pretrain(X_train, cfg.layer_sizes, trains, regs, model_rng, first_kind,
                                on_epoch=self.on_epoch, on_log=self.on_log)
        return dbm_pretrain_and_train(X_train, cfg.layer_sizes, trains, regs, cfg.joint_train, model_rng,
                                      first_kind, cfg.dbm_mf_iters, cfg.dbm_gibbs_steps,
                                      self.on_epoch, self.on_log)

    def fit_head(self, stack: LayerStack):
        cfg = self.config.head
        if self.ds.labels is None or cfg.kind == 'none':
            return None, {}
        if cfg.kind == 'logistic':
            X_train, y_train = self.ds.split('train')
            head = logistic_head(stack_features(stack, X_train), y_train, _n_classes(self.ds), cfg.l2)
            return head, _head_errors(head, self.ds, lambda X: stack_features(stack, X))
        X_train, y_train = self.ds.split('train')
        X_valid, y_valid = self.ds.split('valid')

        def record(e: int, train_err: float, valid_err: float):
            self.recorder.append(MetricsRow(e, 'finetune', train_err=train_err, valid_err=valid_err,
                                            wall_seconds=self.wall()))

        head = ffnn_finetune(stack, X_train, y_train, X_valid, y_valid, _n_classes(self.ds),
                             cfg.epochs, cfg.learning_rate, cfg.batch_size, self.rng.child(2),
                             cfg.freeze_pretrained, record, self.on_log)
        return head, _head_errors(head, self.ds, lambda X: X)

    def final_metrics(self, stack: LayerStack) -> dict[str, float | None]:
        bottom = inference_params(stack.layers[0], stack.masks[0])
        out: dict[str, float | None] = {'pseudo_likelihood': self.pl(bottom, self.config.total_epochs),
                                        'ais_loglik': None, 'ais_stderr': None}
        if self.config.eval.ais:
            X_train, _ = self.ds.split('train')
            ais = AisConfig(self.config.eval.ais_temperatures, self.config.eval.ais_runs,
                            base_rate_params(X_train, bottom.n_hidden), self.config.seed)
            log_z, stderr = ais_log_partition(bottom, ais)
            out['ais_loglik'] = float(np.mean(-free_energy(bottom, self.eval_X)) - log_z)
            out['ais_stderr'] = stderr
            self.log('INFO', 'eval', f'AIS log Z = {log_z:.4f} (stderr {stderr:.3g})')
        return out


def run_experiment(config: ExperimentConfig, on_log: Callable[[str], None] | None = None) -> RunResult:
    """Execute one configured run and write its directory.

    Files: ``config.json`` (echo, written first), ``manifest.json``,
    ``metrics.csv``, ``checkpoint.npz``, ``summary.json`` and optionally
    ``features.npy``. On failure ``error.json`` is written next to the
    config echo and the exception propagates.
    """
    errors = config.validate()
    if errors:
        raise ConfigError(errors)
    run_dir = resolve_run_dir(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / 'config.json')
    _write_json(run_dir / 'manifest.json', _manifest(config))
    run = _Run(config, run_dir, on_log)
    log = run.log
    log('INFO', 'run', f'{config.model} {config.layer_sizes} seed={config.seed} -> {run_dir}')

    try:
        ds = load_dataset(config.data, run.rng.child(1), on_log)
        run.ds = ds
        X_valid, _ = ds.split('valid')
        run.eval_X = X_valid if X_valid.shape[0] else ds.split('train')[0]
        if ds.split('train')[0].shape[0] == 0:
            raise ContractError('no training rows')
        log('INFO', 'data', f'{ds.provenance}: {ds.n_rows} rows x {ds.n_features} ({ds.kind}), '
                            f'train/valid/test = {len(ds.rows("train"))}/{len(ds.rows("valid"))}/'
                            f'{len(ds.rows("test"))}')

        run.recorder.open()
        run.init_row()
        stack = run.train()
        head, errs = run.fit_head(stack)
        final = run.final_metrics(stack)
        if config.total_epochs > 0:
            run.recorder.append(MetricsRow(config.total_epochs, 'final', final['pseudo_likelihood'],
                                           final['ais_loglik'], final['ais_stderr'], None,
                                           errs.get('train_err'), errs.get('valid_err'), run.wall()))
        run.recorder.finalize()

        ckpt_path = save_checkpoint(run_dir / 'checkpoint.npz', Checkpoint(
            stack, config.model, config.seed, config.total_epochs, head, ds.vocab,
            {'data_kind': ds.kind, 'provenance': ds.provenance}, ds.feature_mean, ds.feature_std))
        if config.eval.save_features:
            save_features(run_dir / 'features.npy', stack_features(stack, ds.X))

        summary = {
            'model': config.model,
            'seed': config.seed,
            'epochs': config.total_epochs,
            'n_train': len(ds.rows('train')),
            'n_valid': len(ds.rows('valid')),
            'n_test': len(ds.rows('test')),
            'train_err': errs.get('train_err'),
            'valid_err': errs.get('valid_err'),
            'test_err': errs.get('test_err'),
            'best_epoch': getattr(head, 'best_epoch', None),
            **final,
        }
        _write_json(run_dir / 'summary.json', summary)
    except Exception as e:
        log('ERR', 'run', f'{type(e).__name__}: {e}')
        _write_json(run_dir / 'error.json', {'error': type(e).__name__, 'message': str(e)})
        raise

    log('INFO', 'run', f'finished: valid_err={fmt_float(summary["valid_err"]) or "-"} '
                       f'test_err={fmt_float(summary["test_err"]) or "-"}')
    return RunResult(run_dir, run.recorder.path, ckpt_path, summary, list(run.recorder.rows))


# ------------------------------------------------------------------ #
# Sweep
# ------------------------------------------------------------------ #

@dataclass
class SweepRow:
    cell: int
    params: dict[str, Any]
    valid_errs: list[float | None] = field(default_factory=list)
    test_errs: list[float | None] = field(default_factory=list)
    winner: bool = False

    @property
    def replicates(self) -> int:
        return len(self.valid_errs)

    @property
    def valid_err_mean(self) -> float | None:
        vals = [v for v in self.valid_errs if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def valid_err_sd(self) -> float | None:
        vals = [v for v in self.valid_errs if v is not None]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else None

    @property
    def test_err_mean(self) -> float | None:
        vals = [v for v in self.test_errs if v is not None]
        return float(np.mean(vals)) if vals else None

    def cells(self) -> list[str]:
        return [str(self.cell), json.dumps(self.params, sort_keys=True), str(self.replicates),
                fmt_float(self.valid_err_mean), fmt_float(self.valid_err_sd),
                fmt_float(self.test_err_mean), '1' if self.winner else '0']


@dataclass
class SweepResult:
    rows: list[SweepRow]
    winner: SweepRow | None
    path: Path


def _set_path(d: dict[str, Any], dotted: str, value):
    keys = dotted.split('.')
    target: Any = d
    for i, k in enumerate(keys[:-1]):
        if not isinstance(target, dict) or k not in target:
            raise ConfigError(f'grid: unknown key "{dotted}"')
        target = target[k]
        if isinstance(target, list):
            for item in target:
                _set_path(item, '.'.join(keys[i + 1:]), value)
            return
    if not isinstance(target, dict) or (len(keys) > 1 and keys[-1] not in target):
        raise ConfigError(f'grid: unknown key "{dotted}"')
    target[keys[-1]] = value


def grid_cells(grid: dict[str, list]) -> list[dict[str, Any]]:
    """Cartesian product in grid key order; raises ConfigError for an empty grid."""
    if not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError('grid: empty grid (every key needs a non-empty list of values)')
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cell_seed(seed: int, cell: int, replicate: int = 0) -> int:
    return (seed + replicate) ^ cell


def select_winner(rows: list[SweepRow]) -> SweepRow | None:
    """Lowest mean validation error; ties go to the lower cell index."""
    eligible = [r for r in rows if r.valid_err_mean is not None]
    if not eligible:
        return None
    return min(eligible, key=lambda r: (r.valid_err_mean, r.cell))


def write_sweep_csv(path: Path, rows: list[SweepRow], winner: SweepRow | None):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as fp:
        w = csv.writer(fp, lineterminator='\n')
        w.writerow(['# schema', 'sweep_v1', 'rbmreg', LIB_VERSION])
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r.cells())
        if winner is not None:
            w.writerow(['winner'] + winner.cells()[1:])


def sweep(template: ExperimentConfig, grid: dict[str, list], replicates: int = 1,
          on_log: Callable[[str], None] | None = None) -> SweepResult:
    """Run every grid cell (x replicates) and write ``sweep.csv``.

    Cell c, replicate k runs with seed ``(seed + k) XOR c`` in its own
    ``cellCCC/repK`` subdirectory of the template's output directory.
    """
    log = make_log(on_log)
    if replicates < 1:
        raise ConfigError(f'sweep: replicates must be >= 1 (got {replicates})')
    cells = grid_cells(grid)
    base = template.to_dict()
    configs: list[list[ExperimentConfig]] = []
    for c, params in enumerate(cells):
        reps = []
        for k in range(replicates):
            d = copy.deepcopy(base)
            for key, value in params.items():
                _set_path(d, key, value)
            d['seed'] = cell_seed(template.seed, c, k)
            d['output_dir'] = str(Path(template.output_dir) / f'cell{c:03d}' / f'rep{k}')
            cfg = ExperimentConfig.from_dict(d)
            errors = cfg.validate()
            if errors:
                raise ConfigError([f'cell {c}: {e}' for e in errors])
            reps.append(cfg)
        configs.append(reps)

    log('INFO', 'sweep', f'{len(cells)} cell(s) x {replicates} replicate(s)')
    rows: list[SweepRow] = []
    for c, (params, reps) in enumerate(zip(cells, configs)):
        row = SweepRow(c, params)
        for cfg in reps:
            res = run_experiment(cfg, on_log)
            row.valid_errs.append(run_valid_error(res.rows))
            row.test_errs.append(res.summary.get('test_err'))
        log('INFO', 'sweep', f'cell {c} {json.dumps(params, sort_keys=True)}: '
                             f'valid_err={fmt_float(row.valid_err_mean) or "-"}')
        rows.append(row)

    winner = select_winner(rows)
    if winner is None:
        log('WARN', 'sweep', 'no cell reported a validation error; no winner selected')
    else:
        winner.winner = True
    path = resolve_run_dir(template.output_dir) / 'sweep.csv'
    write_sweep_csv(path, rows, winner)
    return SweepResult(rows, winner, path)


# ------------------------------------------------------------------ #
# Enumeration oracles
# ------------------------------------------------------------------ #

@dataclass
class OracleCheck:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)

    def as_dict(self) -> dict[str, Any]:
        return {'name': self.name, 'value': self.value, 'tolerance': self.tolerance, 'passed': self.passed}


def random_tiny_rbm(rng: RandomSource, n_visible: int = 6, n_hidden: int = 4, scale: float = 1.0) -> RbmParams:
    gen = rng.generator
    return RbmParams(scale * gen.standard_normal(n_visible), scale * gen.standard_normal(n_hidden),
                     scale * gen.standard_normal((n_hidden, n_visible)))


def free_energy_identity_error(params: RbmParams) -> float:
    """max relative gap between exp(-F(v)) and sum_h exp(-E(v, h))."""
    V = enumerate_binary(params.n_visible)
    H = enumerate_binary(params.n_hidden)
    worst = 0.0
    for v in V:
        lhs = np.exp(-free_energy(params, v))
        rhs = float(np.sum(np.exp(-energy(params, np.broadcast_to(v, (H.shape[0], v.size)), H))))
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    return worst


def gradient_fd_error(params: RbmParams, data, eps: float = 1e-5) -> float:
    """Relative gap ||g - g_fd|| / ||g_fd|| between exact_gradient and central
    differences of the mean negative log-likelihood."""
    g = exact_gradient(params, data).as_vector()
    theta = np.concatenate([params.b, params.c, params.W.ravel()])
    J, I = params.n_visible, params.n_hidden

    def nll(t):
        p = RbmParams(t[:J], t[J:J + I], t[J + I:].reshape(I, J), params.kind)
        return -exact_log_likelihood(p, data)

    fd = np.zeros_like(theta)
    for k in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[k] += eps
        dn[k] -= eps
        fd[k] = (nll(up) - nll(dn)) / (2.0 * eps)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))


def pl_enumeration_error(params: RbmParams, data) -> float:
    """|PL - sum_j log P(v_j | v_-j)| with the conditionals read off the
    enumerated joint distribution."""
    V, P = exact_visible_distribution(params)
    index = {tuple(v): i for i, v in enumerate(V)}
    total = 0.0
    for v in np.atleast_2d(data):
        for j in range(v.size):
            w = v.copy()
            w[j] = 1.0 - w[j]
            pv, pw = P[index[tuple(v)]], P[index[tuple(w)]]
            total += np.log(pv / (pv + pw))
    enumerated = total / np.atleast_2d(data).shape[0]
    return abs(pseudo_likelihood(params, data) - enumerated)


def run_oracle(config: ExperimentConfig, on_log: Callable[[str], None] | None = None) -> list[OracleCheck]:
    """Enumeration cross-checks on a random 6-visible / 4-hidden RBM drawn from the config seed."""
    log = make_log(on_log)
    rng = RandomSource(config.seed).child(4)
    params = random_tiny_rbm(rng.child(0))
    data = (rng.child(1).generator.random((20, params.n_visible)) < 0.5).astype(np.float64)
    ais = AisConfig(config.eval.ais_temperatures, config.eval.ais_runs, seed=config.seed)
    log_z_hat, _ = ais_log_partition(params, ais)
    checks = [
        OracleCheck('free_energy_identity', free_energy_identity_error(params), 1e-10),
        OracleCheck('exact_gradient_vs_finite_difference', gradient_fd_error(params, data), 1e-5),
        OracleCheck('pseudo_likelihood_vs_enumeration', pl_enumeration_error(params, data), 1e-10),
        OracleCheck('ais_log_z_vs_exact', abs(log_z_hat - exact_log_partition(params)), 0.1),
    ]
    for c in checks:
        log('INFO' if c.passed else 'ERR', 'oracle', f'{c.name}: {c.value:.3g} (tol {c.tolerance:g})')
    return checks
