# -*- coding: utf-8 -*-
"""
core.checkpoint - Model files.

A checkpoint is one ``.npz`` archive: float64 arrays per layer (and per
mask and head) plus a ``header`` entry holding a JSON document with the
format version, model kind, layer kinds and sizes, mask kinds, seed and
epoch. Gaussian-input models also keep the training-split feature mean
and std used for standardization. Arrays are stored as-is, so a load reproduces parameters exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from core.classifiers import FfnnParams, LogisticHead
from core.constants import CHECKPOINT_FORMAT, LIB_VERSION
from core.deep_models import LayerStack
from core.numerics import ContractError
from core.rbm import RbmParams
from core.regularizers import MaskSpec


class CheckpointError(ContractError):
    pass


@dataclass
class Checkpoint:
    stack: LayerStack
    model: str = 'rbm'
    seed: int = 0
    epoch: int = 0
    head: LogisticHead | FfnnParams | None = None
    vocab: list[str] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    @property
    def params(self) -> RbmParams:
        """The single layer of a one-layer model."""
        return self.stack.layers[0]


def _head_arrays(head) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if head is None:
        return {'kind': 'none'}, {}
    if isinstance(head, LogisticHead):
        return {'kind': 'logistic'}, {'head_W': head.W, 'head_b': head.b}
    arrays = {'head_out_W': head.out_W, 'head_out_b': head.out_b}
    for l, (W, c) in enumerate(zip(head.hidden_W, head.hidden_c)):
        arrays[f'head_W{l}'] = W
        arrays[f'head_c{l}'] = c
    info = {'kind': 'ffnn', 'depth': len(head.hidden_W), 'first_kind': head.first_kind,
            'best_epoch': head.best_epoch}
    return info, arrays


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    stack = ckpt.stack
    arrays: dict[str, np.ndarray] = {}
    masks: list[dict[str, Any] | None] = []
    for l, (params, mask) in enumerate(zip(stack.layers, stack.masks)):
        arrays[f'layer{l}_b'] = params.b
        arrays[f'layer{l}_c'] = params.c
        arrays[f'layer{l}_W'] = params.W
        if mask is None or mask.kind == 'none':
            masks.append(None)
        else:
            masks.append({'kind': mask.kind, 'frozen': bool(mask.frozen)})
            arrays[f'mask{l}_probs'] = np.asarray(mask.retain_probs, dtype=np.float64)
    head_info, head_arrays = _head_arrays(ckpt.head)
    arrays.update(head_arrays)
    if ckpt.feature_mean is not None:
        arrays['feature_mean'] = np.asarray(ckpt.feature_mean, dtype=np.float64)
        arrays['feature_std'] = np.asarray(ckpt.feature_std, dtype=np.float64)
    header = {
        'format': CHECKPOINT_FORMAT,
        'lib_version': LIB_VERSION,
        'model': ckpt.model,
        'flavor': stack.flavor,
        'kinds': [q.kind for q in stack.layers],
        'sizes': stack.sizes,
        'masks': masks,
        'seed': int(ckpt.seed),
        'epoch': int(ckpt.epoch),
        'head': head_info,
        'vocab': list(ckpt.vocab),
        'meta': ckpt.meta,
    }
    arrays['header'] = np.array(json.dumps(header, sort_keys=True))
    with open(p, 'wb') as fp:
        np.savez(fp, **arrays)
    return p


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        archive = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f'{path}: not a checkpoint archive ({e})') from None
    with archive:
        if 'header' not in archive.files:
            raise CheckpointError(f'{path}: missing header')
        header = json.loads(str(archive['header']))
        if header.get('format') != CHECKPOINT_FORMAT:
            raise CheckpointError(f'{path}: checkpoint format {header.get("format")} '
                                  f'(this version reads {CHECKPOINT_FORMAT})')
        layers: list[RbmParams] = []
        masks: list[MaskSpec | None] = []
        for l, kind in enumerate(header['kinds']):
            layers.append(RbmParams(archive[f'layer{l}_b'], archive[f'layer{l}_c'],
                                    archive[f'layer{l}_W'], kind))
            m = header['masks'][l]
            masks.append(None if m is None else MaskSpec(m['kind'], archive[f'mask{l}_probs'], m['frozen']))
        head_info = header['head']
        head = None
        if head_info['kind'] == 'logistic':
            head = LogisticHead(archive['head_W'], archive['head_b'])
        elif head_info['kind'] == 'ffnn':
            depth = head_info['depth']
            head = FfnnParams([archive[f'head_W{l}'] for l in range(depth)],
                              [archive[f'head_c{l}'] for l in range(depth)],
                              archive['head_out_W'], archive['head_out_b'],
                              head_info['first_kind'], head_info['best_epoch'])
        stats = ((archive['feature_mean'], archive['feature_std'])
                 if 'feature_mean' in archive.files else (None, None))
    stack = LayerStack(layers, masks, header['flavor'])
    return Checkpoint(stack, header['model'], header['seed'], header['epoch'], head,
                      header.get('vocab', []), header.get('meta', {}), *stats)


def save_features(path: str | Path, features) -> Path:
    """Feature matrix as a ``.npy`` file."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    np.save(p, np.asarray(features, dtype=np.float64), allow_pickle=False)
    return p
