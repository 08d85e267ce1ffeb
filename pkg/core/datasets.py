# -*- coding: utf-8 -*-
"""
core.datasets - Data ingestion for the experiment harness.

IDX image/label files (binarized), bag-of-words count files, numeric CSV
features (standardized with training statistics only), split assignment,
and a small synthetic 8x8 digit set for offline runs.
"""
from __future__ import annotations

import csv
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core.constants import STANDARDIZE_EPS
from core.helpers import make_log
from core.numerics import ContractError, RandomSource

SPLITS = ('train', 'valid', 'test')
DATASET_KINDS = ('binary', 'real', 'counts')

IDX_MAGIC_VECTORS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803
IDX_MAX_ELEMENTS = 2 ** 31 - 1


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f'{msg} (offset {offset})')


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


class CsvFormatError(ValueError):
    def __init__(self, msg: str, row: int, col: int):
        self.row = row
        self.col = col
        super().__init__(f'{msg} (row {row}, column {col})')


class BowFormatError(ValueError):
    def __init__(self, msg: str, line: int):
        self.line = line
        super().__init__(f'{msg} (line {line})')


# ------------------------------------------------------------------ #
# Dataset
# ------------------------------------------------------------------ #

@dataclass
class Dataset:
    kind: str
    X: np.ndarray
    labels: np.ndarray | None = None
    splits: np.ndarray | None = None
    provenance: str = ''
    vocab: list[str] = field(default_factory=list)
    dropped: int = 0
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.splits is None:
            self.splits = np.full(self.X.shape[0], 'train', dtype=object)
        self.splits = np.asarray(self.splits, dtype=object)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.validate()

    def validate(self) -> None:
        n = self.X.shape[0]
        if self.kind not in DATASET_KINDS:
            raise ContractError(f'Dataset: unknown kind "{self.kind}"')
        if self.labels is not None and self.labels.size != n:
            raise ContractError(f'Dataset: {self.labels.size} labels for {n} rows')
        if self.splits.size != n or not all(s in SPLITS for s in self.splits):
            raise ContractError('Dataset: every row needs one split tag out of train/valid/test')
        if self.kind == 'binary' and not np.all((self.X == 0.0) | (self.X == 1.0)):
            raise ContractError('Dataset: binary data must be 0/1')
        if self.kind == 'counts' and (np.any(self.X < 0) or np.any(self.X != np.round(self.X))):
            raise ContractError('Dataset: counts must be non-negative integers')

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def doc_lengths(self) -> np.ndarray:
        return np.sum(self.X, axis=1)

    def rows(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def split(self, split: str) -> tuple[np.ndarray, np.ndarray | None]:
        idx = self.rows(split)
        y = self.labels[idx] if self.labels is not None else None
        return self.X[idx], y

    def with_splits(self, splits: np.ndarray) -> Dataset:
        return Dataset(self.kind, self.X, self.labels, splits, self.provenance, list(self.vocab), self.dropped,
                       self.feature_mean, self.feature_std)


def assign_splits(n: int, n_valid: int, n_test: int, rng: RandomSource) -> np.ndarray:
    """Random split tags: n_test test rows, n_valid valid rows, the rest train."""
    if n_valid < 0 or n_test < 0 or n_valid + n_test > n:
        raise ContractError(f'assign_splits: cannot take {n_valid} + {n_test} rows out of {n}')
    order = rng.generator.permutation(n)
    tags = np.full(n, 'train', dtype=object)
    tags[order[:n_test]] = 'test'
    tags[order[n_test:n_test + n_valid]] = 'valid'
    return tags


def standardize(X, train_rows=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Z, mean, std) with mean/std taken from *train_rows* only (all rows if None).

    The variance is clamped at 1e-8, so a constant feature maps to zeros.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ref = X if train_rows is None else X[train_rows]
    if ref.shape[0] == 0:
        raise ContractError('standardize: no training rows')
    mean = ref.mean(axis=0)
    std = np.sqrt(np.maximum(ref.var(axis=0), STANDARDIZE_EPS))
    return (X - mean) / std, mean, std


# ------------------------------------------------------------------ #
# IDX
# ------------------------------------------------------------------ #

def _read_idx(path: str | Path, expect: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError('file too short for the magic number', len(raw))
    (magic,) = struct.unpack_from('>I', raw, 0)
    if magic not in (IDX_MAGIC_VECTORS, IDX_MAGIC_IMAGES) or (expect is not None and magic != expect):
        raise IdxMagicError(f'bad magic number 0x{magic:08x}', 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError('file ends inside the dimension header', len(raw))
    dims = struct.unpack_from(f'>{ndim}I', raw, 4)
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if total > IDX_MAX_ELEMENTS:
            raise IdxDimensionError(f'dimensions {dims} exceed {IDX_MAX_ELEMENTS} elements', 4 + 4 * i)
    if len(raw) < header + total:
        raise IdxTruncatedError(f'expected {total} data bytes, found {len(raw) - header}', len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=total, offset=header)
    return data.reshape(dims)


def load_idx_labels(path: str | Path) -> np.ndarray:
    return _read_idx(path, IDX_MAGIC_VECTORS).astype(np.int64)


def load_idx(path: str | Path, labels_path: str | Path | None = None, threshold: float = 0.5) -> Dataset:
    """Images scaled to [0, 1], binarized (>= threshold) and flattened row-major."""
    images = _read_idx(path, IDX_MAGIC_IMAGES)
    n = images.shape[0]
    flat = images.reshape(n, int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    X = (flat >= threshold).astype(np.float64)
    labels = None
    if labels_path is not None:
        labels = load_idx_labels(labels_path)
        if labels.size != n:
            raise ContractError(f'load_idx: {labels.size} labels for {n} images')
    return Dataset('binary', X, labels, provenance=f'idx:{Path(path).name}')


# ------------------------------------------------------------------ #
# Bag of words
# ------------------------------------------------------------------ #

def _parse_bow_line(line: str, lineno: int) -> tuple[int | None, Counter]:
    label = None
    if '\t' in line:
        head, line = line.split('\t', 1)
        try:
            label = int(head.strip())
        except ValueError:
            raise BowFormatError(f'bad label "{head.strip()}"', lineno) from None
    counts: Counter = Counter()
    for item in line.split():
        token, sep, num = item.rpartition(':')
        if not sep:
            counts[item] += 1
            continue
        try:
            c = int(num)
        except ValueError:
            raise BowFormatError(f'bad count in "{item}"', lineno) from None
        if c < 0:
            raise BowFormatError(f'negative count in "{item}"', lineno)
        counts[token] += c
    return label, counts


def top_vocabulary(docs: list[Counter], vocab_size: int) -> list[str]:
    """The *vocab_size* most frequent tokens, ties broken by token order."""
    total: Counter = Counter()
    for d in docs:
        total.update(d)
    ranked = sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, c in ranked[:vocab_size] if c > 0]


def _resolve_splits(splits, n: int) -> np.ndarray:
    """Split tags from None (all train), an array, or a callable of the row count."""
    if splits is None:
        return np.full(n, 'train', dtype=object)
    tags = np.asarray(splits(n) if callable(splits) else splits, dtype=object)
    if tags.size != n:
        raise ContractError(f'{tags.size} split tags for {n} rows')
    return tags


def load_bow(path: str | Path, vocab_size: int, splits=None, vocab: list[str] | None = None,
             on_log=None) -> Dataset:
    """Read one document per line (``[label<TAB>]token token:count ...``).

    The vocabulary is built from the documents tagged train (or taken from
    *vocab* as given); documents left empty after restriction are dropped
    and counted.
    """
    log = make_log(on_log)
    docs: list[Counter] = []
    labels: list[int | None] = []
    with open(path, encoding='utf-8') as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            label, counts = _parse_bow_line(line.rstrip('\n'), lineno)
            docs.append(counts)
            labels.append(label)
    tags = _resolve_splits(splits, len(docs))
    if vocab is None:
        vocab = top_vocabulary([d for d, t in zip(docs, tags) if t == 'train'], vocab_size)
    index = {t: j for j, t in enumerate(vocab)}
    X = np.zeros((len(docs), len(vocab)))
    for i, d in enumerate(docs):
        for t, c in d.items():
            j = index.get(t)
            if j is not None:
                X[i, j] = c
    keep = X.sum(axis=1) > 0
    dropped = int(np.sum(~keep))
    if dropped:
        log('WARN', 'bow', f'dropped {dropped} empty document(s)')
    y = None
    if labels and all(l is not None for l in labels):
        y = np.asarray(labels, dtype=np.int64)[keep]
    return Dataset('counts', X[keep], y, tags[keep], provenance=f'bow:{Path(path).name}',
                   vocab=list(vocab), dropped=dropped)


# ------------------------------------------------------------------ #
# CSV features
# ------------------------------------------------------------------ #

def load_csv_features(path: str | Path, label_column: int | None = None, splits=None,
                      has_header: bool = False,
                      stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Numeric CSV, optional integer label column, standardized with
    training-split statistics.

    *splits* is None (all train), an array of tags, or a callable taking
    the row count. *stats* = (mean, std) from an earlier training file
    replaces the file's own statistics.
    """
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline='', encoding='utf-8') as fp:
        for r, rec in enumerate(csv.reader(fp), start=1):
            if has_header and r == 1:
                continue
            if not rec or all(not c.strip() for c in rec):
                continue
            values: list[float] = []
            for c, cell in enumerate(rec, start=1):
                try:
                    x = float(cell)
                except ValueError:
                    raise CsvFormatError(f'non-numeric cell "{cell}"', r, c) from None
                if not np.isfinite(x):
                    raise CsvFormatError(f'non-finite cell "{cell}"', r, c)
                if label_column is not None and c - 1 == label_column % len(rec):
                    labels.append(int(x))
                else:
                    values.append(x)
            if rows and len(values) != len(rows[0]):
                raise CsvFormatError(f'expected {len(rows[0])} features, found {len(values)}', r, len(rec))
            rows.append(values)
    if not rows:
        raise CsvFormatError('no data rows', 0, 0)
    X = np.asarray(rows, dtype=np.float64)
    tags = _resolve_splits(splits, X.shape[0])
    if stats is None:
        Z, mean, std = standardize(X, np.flatnonzero(tags == 'train'))
    else:
        mean, std = (np.asarray(s, dtype=np.float64).reshape(-1) for s in stats)
        if mean.size != X.shape[1] or std.size != X.shape[1]:
            raise CsvFormatError(f'expected {mean.size} features, found {X.shape[1]}', 1, X.shape[1])
        Z = (X - mean) / std
    y = np.asarray(labels, dtype=np.int64) if label_column is not None else None
    return Dataset('real', Z, y, tags, provenance=f'csv:{Path(path).name}',
                   feature_mean=mean, feature_std=std)


# ------------------------------------------------------------------ #
# Synthetic digits
# ------------------------------------------------------------------ #

_GLYPHS = (
    ('..####..', '.#....#.', '.#....#.', '.#....#.', '.#....#.', '.#....#.', '..####..', '........'),
    ('...##...', '..###...', '...##...', '...##...', '...##...', '...##...', '..####..', '........'),
    ('..####..', '.#....#.', '......#.', '....##..', '..##....', '.#......', '.######.', '........'),
    ('..####..', '.#....#.', '......#.', '...###..', '......#.', '.#....#.', '..####..', '........'),
    ('....##..', '...#.#..', '..#..#..', '.#...#..', '.######.', '.....#..', '.....#..', '........'),
    ('.######.', '.#......', '.#####..', '......#.', '......#.', '.#....#.', '..####..', '........'),
    ('..####..', '.#......', '.#......', '.#####..', '.#....#.', '.#....#.', '..####..', '........'),
    ('.######.', '......#.', '.....#..', '....#...', '...#....', '...#....', '...#....', '........'),
    ('..####..', '.#....#.', '.#....#.', '..####..', '.#....#.', '.#....#.', '..####..', '........'),
    ('..####..', '.#....#.', '.#....#.', '..#####.', '......#.', '......#.', '..####..', '........'),
)


def digit_templates() -> np.ndarray:
    """(10, 64) binary glyphs."""
    return np.asarray([[1.0 if ch == '#' else 0.0 for row in g for ch in row] for g in _GLYPHS])


def synthetic_digits(n: int, rng: RandomSource, flip: float = 0.03, shift: int = 1) -> Dataset:
    """*n* noisy 8x8 binary digits: random template, translation by up to
    *shift* pixels, then independent bit flips with probability *flip*."""
    gen = rng.generator
    templates = digit_templates().reshape(10, 8, 8)
    labels = gen.integers(0, 10, size=n)
    dx = gen.integers(-shift, shift + 1, size=n)
    dy = gen.integers(-shift, shift + 1, size=n)
    X = np.zeros((n, 8, 8))
    for i in range(n):
        img = np.roll(templates[labels[i]], (dy[i], dx[i]), axis=(0, 1))
        X[i] = img
    X = X.reshape(n, 64)
    noise = gen.random(X.shape) < flip
    X = np.where(noise, 1.0 - X, X)
    return Dataset('binary', X, labels, provenance=f'synthetic_digits(n={n}, flip={flip}, shift={shift})')
