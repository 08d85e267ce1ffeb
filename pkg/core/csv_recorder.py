# -*- coding: utf-8 -*-
"""
core.csv_recorder - Per-epoch metrics CSV for training runs.

Fixed column order (``METRICS_COLUMNS``); unevaluated cells are blank.
The first line is a ``# schema`` marker, the second the header.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from core.constants import LIB_VERSION, METRICS_COLUMNS, METRICS_SCHEMA
from core.helpers import fmt_float, to_float


@dataclass
class MetricsRow:
    epoch: int
    phase: str
    pseudo_likelihood: float | None = None
    ais_loglik: float | None = None
    ais_stderr: float | None = None
    penalty_value: float | None = None
    train_err: float | None = None
    valid_err: float | None = None
    wall_seconds: float | None = None

    def cells(self) -> list[str]:
        out = [str(int(self.epoch)), self.phase]
        for name in METRICS_COLUMNS[2:]:
            out.append(fmt_float(getattr(self, name)))
        return out

    @classmethod
    def from_cells(cls, cells: dict[str, str]) -> MetricsRow:
        kw = {name: to_float(cells.get(name) or None) for name in METRICS_COLUMNS[2:]}
        return cls(epoch=int(cells['epoch']), phase=cells['phase'], **kw)


class MetricsRecorder:
    """Writes MetricsRow records to ``path`` as they arrive.

    Rows appended before ``open()`` are buffered and flushed on open.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._open = False
        self._buffer: list[MetricsRow] = []
        self.rows: list[MetricsRow] = []

    def open(self) -> str:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'w', newline='', encoding='utf-8') as fp:
            w = csv.writer(fp, lineterminator='\n')
            w.writerow(['# schema', METRICS_SCHEMA, 'rbmreg', LIB_VERSION])
            w.writerow(METRICS_COLUMNS)
        self._open = True
        self._flush_buffer()
        return str(self.path)

    def append(self, row: MetricsRow):
        self.rows.append(row)
        if not self._open:
            self._buffer.append(row)
            return
        with open(self.path, 'a', newline='', encoding='utf-8') as fp:
            csv.writer(fp, lineterminator='\n').writerow(row.cells())

    def finalize(self):
        self._flush_buffer()

    def _flush_buffer(self):
        if not self._open or not self._buffer:
            return
        with open(self.path, 'a', newline='', encoding='utf-8') as fp:
            w = csv.writer(fp, lineterminator='\n')
            for row in self._buffer:
                w.writerow(row.cells())
        self._buffer.clear()


def read_metrics(path: str | Path) -> list[MetricsRow]:
    """Parse a metrics CSV written by MetricsRecorder."""
    with open(path, newline='', encoding='utf-8') as fp:
        lines = [rec for rec in csv.reader(fp) if rec]
    if lines and lines[0][0] == '# schema':
        if len(lines[0]) < 2 or lines[0][1] != METRICS_SCHEMA:
            raise ValueError(f'{path}: unsupported metrics schema {lines[0][1:2]}')
        lines = lines[1:]
    if not lines or tuple(lines[0]) != METRICS_COLUMNS:
        raise ValueError(f'{path}: header does not match {METRICS_SCHEMA}')
    return [MetricsRow.from_cells(dict(zip(METRICS_COLUMNS, rec))) for rec in lines[1:]]


def run_valid_error(rows: list[MetricsRow]) -> float | None:
    """Validation error a run reports: its ``final`` row, else the best row."""
    finals = [r.valid_err for r in rows if r.phase == 'final' and r.valid_err is not None]
    if finals:
        return finals[-1]
    errs = [r.valid_err for r in rows if r.valid_err is not None]
    return min(errs) if errs else None
