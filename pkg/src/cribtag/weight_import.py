"""Convert externally exported raw tensors into a native checkpoint.

Input is a directory of ``*.tensor`` files, each holding one bare tensor
entry (same wire format as a checkpoint tensor). Names must follow the
native parameter naming; two adaptations bridge vision-transformer exports:

* ``patch_embed.weight`` with shape (3, p, p, d) has its channels averaged
  and is flattened to (p*p, d); (1, p, p, d) and (p, p, d) are flattened
  directly.
* ``pos_embed`` given as a (F, T, d) grid is center-cut / bilinearly
  interpolated to the configured patch grid and prepended with a CLS row
  (an optional ``pos_embed_cls`` entry, zeros otherwise).

Parameters absent from the directory keep their scratch initialization;
names that match nothing are collected and reported as an error.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, read_raw_tensor
from .errors import ConfigError, DataError
from .model import (
    AstClassifier,
    ModelConfig,
    adapt_channel_weights,
    interpolate_pos_embed,
    pos_embed_grid_to_seq,
)

log = logging.getLogger(__name__)

POS_CLS_KEY = "pos_embed_cls"


def _adapt_patch_kernel(arr: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    p = cfg.patch
    if arr.ndim == 4 and arr.shape[:3] == (3, p, p):
        arr = adapt_channel_weights(arr)[0]
    elif arr.ndim == 4 and arr.shape[:3] == (1, p, p):
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[:2] == (p, p):
        arr = arr.reshape(p * p, arr.shape[2])
    return arr


def _adapt_pos_embed(arr: np.ndarray, cls_row, cfg: ModelConfig) -> np.ndarray:
    f_p, t_p = cfg.patch_grid()
    if arr.ndim == 2 and arr.shape[0] == 1 + f_p * t_p:
        return arr
    if arr.ndim == 3:
        grid = interpolate_pos_embed(arr, (f_p, t_p))
        if cls_row is None:
            cls_row = np.zeros(arr.shape[2], dtype=arr.dtype)
        return pos_embed_grid_to_seq(cls_row, grid)
    raise ConfigError(
        f"pos_embed shape {arr.shape} is neither a ({1 + f_p * t_p}, d) table nor a 3-D grid"
    )


def import_raw_tensors(tensor_dir, cfg: ModelConfig, seed: int = 0) -> Checkpoint:
    """Build a native checkpoint from a directory of raw tensor files."""
    tensor_dir = Path(tensor_dir)
    files = sorted(tensor_dir.glob("*.tensor"))
    if not files:
        raise DataError(f"{tensor_dir}: no .tensor files found")
    raw = {}
    for f in files:
        name, arr = read_raw_tensor(f)
        if name in raw:
            raise DataError(f"{tensor_dir}: duplicate tensor name {name!r} (in {f.name})")
        raw[name] = arr

    model = AstClassifier.init_scratch(cfg, seed=seed)
    expected = {name: p.shape for name, p in model.params.items()}
    cls_row = raw.pop(POS_CLS_KEY, None)

    adapted = {}
    unmapped = []
    for name, arr in raw.items():
        if name == "patch_embed.weight":
            arr = _adapt_patch_kernel(arr, cfg)
        elif name == "pos_embed":
            arr = _adapt_pos_embed(arr, cls_row, cfg)
        if name not in expected:
            unmapped.append(name)
            continue
        if tuple(arr.shape) != expected[name]:
            raise ConfigError(f"tensor {name}: imported shape {tuple(arr.shape)}, model expects {expected[name]}")
        adapted[name] = arr
    if unmapped:
        raise ConfigError(f"unmapped tensor names: {', '.join(sorted(unmapped))}")

    weights = model.weights_snapshot()
    weights.update({k: v.astype(np.float32) for k, v in adapted.items()})
    missing = sorted(set(expected) - set(adapted))
    if missing:
        log.warning("%d parameters not present in import, keeping scratch init (e.g. %s)", len(missing), missing[0])
    metadata = {"imported": True, "imported_tensors": sorted(adapted), "scratch_tensors": missing}
    return Checkpoint(weights=weights, config=cfg, metadata=metadata)
