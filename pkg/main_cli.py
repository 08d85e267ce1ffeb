# -*- coding: utf-8 -*-
"""
main_cli.py - Command-line entry point.

Usage:
    python main_cli.py train config.json
    python main_cli.py eval runs/x/checkpoint.npz --pl [--ais]
    python main_cli.py classify runs/x/checkpoint.npz data.idx --labels labels.idx
    python main_cli.py sweep template.json grid.json [--replicates 5]
    python main_cli.py oracle config.json

Results go to stdout as JSON, log lines to stderr. Exit code 0 on success,
2 for configuration errors, 1 for anything else (with a JSON error object
on stderr).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from core.checkpoint import load_checkpoint, save_features
from core.classifiers import FfnnParams
from core.config_model import ExperimentConfig
from core.constants import DEFAULT_AIS_RUNS, DEFAULT_AIS_TEMPERATURES
from core.datasets import load_bow, load_csv_features, load_idx
from core.deep_models import stack_features
from core.evaluation import AisConfig, ais_log_partition, base_rate_params, classification_error, pseudo_likelihood
from core.experiment_runner import load_dataset, run_experiment, run_oracle, sweep
from core.helpers import ConfigError
from core.numerics import RandomSource
from core.rbm import free_energy
from core.regularizers import inference_params


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args, on_log) -> int:
    cfg = ExperimentConfig.load(args.config)
    res = run_experiment(cfg, on_log)
    _emit({'run_dir': str(res.run_dir), **res.summary})
    return 0


def cmd_eval(args, on_log) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg_path = Path(args.config) if args.config else Path(args.checkpoint).parent / 'config.json'
    cfg = ExperimentConfig.load(cfg_path)
    ds = load_dataset(cfg.data, RandomSource(cfg.seed).child(1), on_log)
    X_valid, _ = ds.split('valid')
    X = X_valid if X_valid.shape[0] else ds.split('train')[0]
    bottom = inference_params(ckpt.stack.layers[0], ckpt.stack.masks[0])
    out: dict = {'checkpoint': str(args.checkpoint), 'rows': int(X.shape[0])}
    if args.pl:
        out['pseudo_likelihood'] = pseudo_likelihood(bottom, X)
    if args.ais:
        ais = AisConfig(args.ais_temperatures, args.ais_runs,
                        base_rate_params(ds.split('train')[0], bottom.n_hidden), cfg.seed)
        log_z, stderr = ais_log_partition(bottom, ais)
        out['ais_log_z'] = log_z
        out['ais_loglik'] = float(np.mean(-free_energy(bottom, X)) - log_z)
        out['ais_stderr'] = stderr
    _emit(out)
    return 0


def cmd_classify(args, on_log) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    path = Path(args.dataset)
    kind = ckpt.stack.layers[0].kind
    if kind == 'softmax':
        ds = load_bow(path, len(ckpt.vocab), vocab=ckpt.vocab, on_log=on_log)
    elif kind == 'gaussian':
        stats = None if ckpt.feature_mean is None else (ckpt.feature_mean, ckpt.feature_std)
        ds = load_csv_features(path, args.label_column, has_header=args.has_header, stats=stats)
    else:
        ds = load_idx(path, args.labels)
    features = stack_features(ckpt.stack, ds.X)
    out_dir = Path(args.out) if args.out else path.parent
    out: dict = {'rows': ds.n_rows, 'features': str(save_features(out_dir / f'{path.stem}_features.npy', features))}
    if ckpt.head is not None:
        inputs = ds.X if isinstance(ckpt.head, FfnnParams) else features
        pred = ckpt.head.predict(inputs)
        np.save(out_dir / f'{path.stem}_predictions.npy', pred)
        out['predictions'] = str(out_dir / f'{path.stem}_predictions.npy')
        if ds.labels is not None:
            out['error'] = classification_error(ckpt.head, inputs, ds.labels)
    _emit(out)
    return 0


def cmd_sweep(args, on_log) -> int:
    template = ExperimentConfig.load(args.template)
    try:
        grid = json.loads(Path(args.grid).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f'{args.grid}: not valid JSON ({e})') from None
    if not isinstance(grid, dict):
        raise ConfigError('grid: expected an object of key -> list of values')
    res = sweep(template, grid, args.replicates, on_log)
    _emit({'summary': str(res.path), 'cells': len(res.rows),
           'winner': None if res.winner is None else {'cell': res.winner.cell, 'params': res.winner.params,
                                                      'valid_err_mean': res.winner.valid_err_mean}})
    return 0


def cmd_oracle(args, on_log) -> int:
    cfg = ExperimentConfig.load(args.config)
    checks = run_oracle(cfg, on_log)
    _emit({'checks': [c.as_dict() for c in checks]})
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description='Regularized RBM / DBN / DBM training and evaluation')
    ap.add_argument('--quiet', action='store_true', help='Suppress log lines on stderr')
    sub = ap.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='Run one experiment')
    p.add_argument('config', help='Experiment configuration JSON')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='Evaluate a checkpoint')
    p.add_argument('checkpoint')
    p.add_argument('--config', default='', help='Config JSON (default: config.json beside the checkpoint)')
    p.add_argument('--pl', action='store_true', help='Pseudo-likelihood')
    p.add_argument('--ais', action='store_true', help='AIS log-likelihood')
    p.add_argument('--ais-temperatures', type=int, default=DEFAULT_AIS_TEMPERATURES)
    p.add_argument('--ais-runs', type=int, default=DEFAULT_AIS_RUNS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('classify', help='Features and predictions for a data file')
    p.add_argument('checkpoint')
    p.add_argument('dataset', help='IDX images, bag-of-words or CSV file (by model input kind)')
    p.add_argument('--labels', default=None, help='IDX label file')
    p.add_argument('--label-column', type=int, default=None, help='CSV label column')
    p.add_argument('--has-header', action='store_true')
    p.add_argument('--out', default='', help='Output directory')
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser('sweep', help='Grid search over a template config')
    p.add_argument('template')
    p.add_argument('grid', help='JSON object: dotted config key -> list of values')
    p.add_argument('--replicates', type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('oracle', help='Enumeration cross-checks on a tiny model')
    p.add_argument('config')
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    def on_log(line: str):
        if not args.quiet:
            print(line, file=sys.stderr)

    try:
        return args.func(args, on_log)
    except ConfigError as e:
        print(json.dumps({'error': 'ConfigError', 'message': str(e), 'errors': e.errors}), file=sys.stderr)
        return 2
    except Exception as e:
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
