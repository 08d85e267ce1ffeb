# -*- coding: utf-8 -*-
"""
core.config_model - Dataclass models for experiment configuration.

One JSON document describes a run: model and layer sizes, per-layer
training and regularizer settings, data source, evaluation and head
options, output directory and seed. Unknown keys are rejected at every
level so a typo in a sweep template cannot silently fall back to a default.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from core.constants import (
    DEFAULT_AIS_RUNS,
    DEFAULT_AIS_TEMPERATURES,
    DEFAULT_BATCH_SIZE,
    DEFAULT_DBM_GIBBS_STEPS,
    DEFAULT_DBM_MF_ITERS,
    DEFAULT_FINETUNE_EPOCHS,
    DEFAULT_FINETUNE_LR,
    MODEL_KINDS,
)
from core.helpers import ConfigError, reject_unknown
from core.rbm import TrainConfig
from core.regularizers import RegConfig

DATA_SOURCES = ('synthetic_digits', 'idx', 'bow', 'csv')
PL_VARIANTS = ('full', 'stochastic', 'none')
HEAD_KINDS = ('none', 'logistic', 'ffnn')

# data kind each source produces
SOURCE_KIND = {'synthetic_digits': 'binary', 'idx': 'binary', 'bow': 'counts', 'csv': 'real'}


def _num(section: str, fn, value):
    try:
        return fn(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'{section}: {e}') from None


@dataclass
class DataConfig:
    """Where the data comes from and how it is split."""
    source: str = 'synthetic_digits'
    path: str = ''
    labels_path: str = ''
    n_examples: int = 1000          # synthetic size, or a row cap for IDX files (0 = all)
    n_valid: int = 0
    n_test: int = 0
    threshold: float = 0.5
    vocab_size: int = 2000
    label_column: int | None = None
    has_header: bool = False

    _FIELDS = ('source', 'path', 'labels_path', 'n_examples', 'n_valid', 'n_test',
               'threshold', 'vocab_size', 'label_column', 'has_header')

    @property
    def kind(self) -> str:
        return SOURCE_KIND.get(self.source, '')

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DataConfig:
        reject_unknown('data', d, cls._FIELDS)
        dflt = cls()
        label_column = d.get('label_column')
        return cls(
            source=str(d.get('source', dflt.source)),
            path=str(d.get('path', '')),
            labels_path=str(d.get('labels_path', '')),
            n_examples=_num('data', int, d.get('n_examples', dflt.n_examples)),
            n_valid=_num('data', int, d.get('n_valid', 0)),
            n_test=_num('data', int, d.get('n_test', 0)),
            threshold=_num('data', float, d.get('threshold', dflt.threshold)),
            vocab_size=_num('data', int, d.get('vocab_size', dflt.vocab_size)),
            label_column=None if label_column is None else _num('data', int, label_column),
            has_header=bool(d.get('has_header', False)),
        )

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.source not in DATA_SOURCES:
            errors.append(f'data.source must be one of {", ".join(DATA_SOURCES)} (got "{self.source}").')
        elif self.source != 'synthetic_digits' and not self.path:
            errors.append(f'data.path is required for source "{self.source}".')
        if self.n_examples < 0:
            errors.append(f'data.n_examples must be >= 0 (got {self.n_examples}).')
        if self.source == 'synthetic_digits' and self.n_examples < 1:
            errors.append('data.n_examples must be >= 1 for synthetic_digits.')
        if self.n_valid < 0 or self.n_test < 0:
            errors.append('data.n_valid and data.n_test must be >= 0.')
        if not 0.0 < self.threshold < 1.0:
            errors.append(f'data.threshold must lie inside (0, 1) (got {self.threshold}).')
        if self.source == 'bow' and self.vocab_size < 1:
            errors.append(f'data.vocab_size must be >= 1 (got {self.vocab_size}).')
        return errors


@dataclass
class EvalConfig:
    """Metric options; pseudo-likelihood every ``eval_every`` epochs, AIS at the end."""
    pl: str = 'full'
    eval_every: int = 1
    ais: bool = False
    ais_temperatures: int = DEFAULT_AIS_TEMPERATURES
    ais_runs: int = DEFAULT_AIS_RUNS
    save_features: bool = False

    _FIELDS = ('pl', 'eval_every', 'ais', 'ais_temperatures', 'ais_runs', 'save_features')

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EvalConfig:
        reject_unknown('eval', d, cls._FIELDS)
        dflt = cls()
        return cls(
            pl=str(d.get('pl', dflt.pl)),
            eval_every=_num('eval', int, d.get('eval_every', dflt.eval_every)),
            ais=bool(d.get('ais', False)),
            ais_temperatures=_num('eval', int, d.get('ais_temperatures', dflt.ais_temperatures)),
            ais_runs=_num('eval', int, d.get('ais_runs', dflt.ais_runs)),
            save_features=bool(d.get('save_features', False)),
        )

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.pl not in PL_VARIANTS:
            errors.append(f'eval.pl must be one of {", ".join(PL_VARIANTS)} (got "{self.pl}").')
        if self.eval_every < 1:
            errors.append(f'eval.eval_every must be >= 1 (got {self.eval_every}).')
        if self.ais and (self.ais_temperatures < 2 or self.ais_runs < 2):
            errors.append('eval.ais_temperatures and eval.ais_runs must be >= 2.')
        return errors


@dataclass
class HeadConfig:
    """Supervised head on top of the trained features."""
    kind: str = 'logistic'
    l2: float = 1e-4
    epochs: int = DEFAULT_FINETUNE_EPOCHS
    learning_rate: float = DEFAULT_FINETUNE_LR
    batch_size: int = DEFAULT_BATCH_SIZE
    freeze_pretrained: bool = False

    _FIELDS = ('kind', 'l2', 'epochs', 'learning_rate', 'batch_size', 'freeze_pretrained')

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> HeadConfig:
        reject_unknown('head', d, cls._FIELDS)
        dflt = cls()
        return cls(
            kind=str(d.get('kind', dflt.kind)),
            l2=_num('head', float, d.get('l2', dflt.l2)),
            epochs=_num('head', int, d.get('epochs', dflt.epochs)),
            learning_rate=_num('head', float, d.get('learning_rate', dflt.learning_rate)),
            batch_size=_num('head', int, d.get('batch_size', dflt.batch_size)),
            freeze_pretrained=bool(d.get('freeze_pretrained', False)),
        )

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.kind not in HEAD_KINDS:
            errors.append(f'head.kind must be one of {", ".join(HEAD_KINDS)} (got "{self.kind}").')
        if self.l2 < 0:
            errors.append(f'head.l2 must be >= 0 (got {self.l2}).')
        if self.kind == 'ffnn':
            if self.epochs < 0:
                errors.append(f'head.epochs must be >= 0 (got {self.epochs}).')
            if self.learning_rate <= 0:
                errors.append(f'head.learning_rate must be > 0 (got {self.learning_rate}).')
            if self.batch_size < 1:
                errors.append(f'head.batch_size must be >= 1 (got {self.batch_size}).')
        return errors


def _one_or_many(section: str, raw, cls):
    if isinstance(raw, list):
        return [cls.from_dict(_section_dict(f'{section}[{i}]', r)) for i, r in enumerate(raw)]
    return cls.from_dict(_section_dict(section, raw))


def _section_dict(section: str, raw) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError(f'{section}: expected an object, got {type(raw).__name__}')
    return raw


def _dump(value):
    if isinstance(value, list):
        return [v.to_dict() for v in value]
    return value.to_dict()


@dataclass
class ExperimentConfig:
    """Full run description."""
    model: str = 'rbm'
    layer_sizes: list[int] = field(default_factory=lambda: [100])
    train: TrainConfig | list[TrainConfig] = field(default_factory=TrainConfig)
    reg: RegConfig | list[RegConfig] = field(default_factory=RegConfig)
    joint_train: TrainConfig | None = None
    dbm_mf_iters: int = DEFAULT_DBM_MF_ITERS
    dbm_gibbs_steps: int = DEFAULT_DBM_GIBBS_STEPS
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    output_dir: str = 'runs/default'
    seed: int = 0
    record_wall_time: bool = False

    _FIELDS = ('model', 'layer_sizes', 'train', 'reg', 'joint_train', 'dbm_mf_iters',
               'dbm_gibbs_steps', 'data', 'eval', 'head', 'output_dir', 'seed', 'record_wall_time')

    def train_configs(self) -> list[TrainConfig]:
        return self.train if isinstance(self.train, list) else [self.train] * len(self.layer_sizes)

    def reg_configs(self) -> list[RegConfig]:
        return self.reg if isinstance(self.reg, list) else [self.reg] * len(self.layer_sizes)

    @property
    def total_epochs(self) -> int:
        n = sum(t.epochs for t in self.train_configs())
        if self.model == 'dbm':
            n += (self.joint_train or self.train_configs()[-1]).epochs
        return n

    def to_dict(self) -> dict[str, Any]:
        return {
            'model': self.model,
            'layer_sizes': list(self.layer_sizes),
            'train': _dump(self.train),
            'reg': _dump(self.reg),
            'joint_train': self.joint_train.to_dict() if self.joint_train is not None else None,
            'dbm_mf_iters': self.dbm_mf_iters,
            'dbm_gibbs_steps': self.dbm_gibbs_steps,
            'data': self.data.to_dict(),
            'eval': self.eval.to_dict(),
            'head': self.head.to_dict(),
            'output_dir': self.output_dir,
            'seed': self.seed,
            'record_wall_time': self.record_wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        d = _section_dict('config', d)
        reject_unknown('config', d, cls._FIELDS)
        dflt = cls()
        sizes = d.get('layer_sizes', dflt.layer_sizes)
        if not isinstance(sizes, list):
            raise ConfigError(f'config: layer_sizes must be a list (got {sizes!r})')
        joint = d.get('joint_train')
        return cls(
            model=str(d.get('model', dflt.model)),
            layer_sizes=[_num('config', int, s) for s in sizes],
            train=_one_or_many('train', d.get('train', {}), TrainConfig),
            reg=_one_or_many('reg', d.get('reg', {}), RegConfig),
            joint_train=None if joint is None else TrainConfig.from_dict(_section_dict('joint_train', joint)),
            dbm_mf_iters=_num('config', int, d.get('dbm_mf_iters', dflt.dbm_mf_iters)),
            dbm_gibbs_steps=_num('config', int, d.get('dbm_gibbs_steps', dflt.dbm_gibbs_steps)),
            data=DataConfig.from_dict(_section_dict('data', d.get('data', {}))),
            eval=EvalConfig.from_dict(_section_dict('eval', d.get('eval', {}))),
            head=HeadConfig.from_dict(_section_dict('head', d.get('head', {}))),
            output_dir=str(d.get('output_dir', dflt.output_dir)),
            seed=_num('config', int, d.get('seed', 0)),
            record_wall_time=bool(d.get('record_wall_time', False)),
        )

    def save(self, path: str | Path):
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2), encoding='utf-8')

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        """Load and validate; raises ConfigError with every problem found."""
        try:
            raw = json.loads(Path(path).read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f'{path}: not valid JSON ({e})') from None
        cfg = cls.from_dict(raw)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        return cfg

    # ── Validation ──

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.model not in MODEL_KINDS:
            errors.append(f'model must be one of {", ".join(MODEL_KINDS)} (got "{self.model}").')
            return errors
        n = len(self.layer_sizes)
        if n == 0:
            errors.append('layer_sizes must name at least one hidden layer.')
        if any(s < 1 for s in self.layer_sizes):
            errors.append(f'layer sizes must be >= 1 (got {self.layer_sizes}).')
        if self.model in ('rbm', 'rsm', 'grbm') and n != 1:
            errors.append(f'model "{self.model}" has exactly one hidden layer (got {n}).')
        for name, value in (('train', self.train), ('reg', self.reg)):
            if isinstance(value, list) and len(value) != n:
                errors.append(f'{name} lists {len(value)} entries for {n} layers.')

        for t in self.train_configs():
            errors += t.validate()
        for r in self.reg_configs():
            errors += r.validate()
        if self.joint_train is not None:
            errors += [f'joint_train: {e}' for e in self.joint_train.validate()]
            if self.model != 'dbm':
                errors.append('joint_train only applies to model "dbm".')
        if self.model == 'dbm':
            if self.dbm_mf_iters < 1 or self.dbm_gibbs_steps < 1:
                errors.append('dbm_mf_iters and dbm_gibbs_steps must be >= 1.')

        errors += self.data.validate() + self.eval.validate() + self.head.validate()

        kind = self.data.kind
        needs = {'rbm': 'binary', 'dbm': 'binary', 'rsm': 'counts', 'grbm': 'real'}.get(self.model)
        if kind and needs and kind != needs:
            errors.append(f'model "{self.model}" needs {needs} data, source "{self.data.source}" gives {kind}.')
        if kind and kind != 'binary' and self.eval.pl != 'none':
            errors.append('eval.pl needs binary data; set it to "none".')
        if self.eval.ais and (self.model != 'rbm' or kind != 'binary'):
            errors.append('eval.ais applies to model "rbm" on binary data only.')
        if self.head.kind == 'ffnn' and not self.head.freeze_pretrained and self.data.n_valid < 1:
            errors.append('head "ffnn" needs data.n_valid >= 1 for early stopping.')
        if not self.output_dir:
            errors.append('output_dir must not be empty.')
        return errors
