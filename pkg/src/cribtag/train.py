"""Fine-tuning loop: BCE on sigmoid outputs, multistep LR schedule, freeze
policies, best-checkpoint selection.

Each epoch shuffles the training segments, recomputes their (optionally
augmented) normalized spectrograms, and runs forward / BCE / backward /
Adam at the scheduled learning rate. After every epoch the model is scored
on the held-out validation split; the weights with the best validation
macro-F1 (earliest epoch on ties) are returned. With no validation split
the lowest training loss picks the checkpoint instead.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .audio import Waveform
from .augment import AugmentConfig, add_noise, derive_rng, freq_mask, time_mask
from .checkpoint import Checkpoint
from .dataset import Scheme, Segment, labels_to_multihot
from .errors import ConfigError, ContractError, DimensionError, TrainingDiverged
from .frontend import FrontendConfig, NormStats, log_mel, normalize
from .metrics import DecisionMode, evaluate
from .model import AstClassifier, extract_patches

log = logging.getLogger(__name__)


class FreezePolicy(Enum):
    WHOLE_MODEL = "whole_model"
    LAST_TWO_LAYERS = "last_two_layers"


def _default_milestones(epochs: int) -> tuple:
    return tuple(range(5, epochs, 5))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr0: float = 1e-5  # scratch tiny-preset runs typically pass 1e-3
    gamma: float = 0.85
    milestones: Optional[tuple] = None  # None = every 5 epochs
    batch_size: int = 16
    freeze_policy: FreezePolicy = FreezePolicy.WHOLE_MODEL
    scheme: Scheme = Scheme.MIXED
    seed: int = 0
    val_fraction: float = 0.1
    resample_cap: float = 4.0

    def __post_init__(self):
        if self.milestones is not None:
            object.__setattr__(self, "milestones", tuple(self.milestones))
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        ms = self.effective_milestones
        if any(m <= 0 or m >= self.epochs for m in ms) or list(ms) != sorted(set(ms)):
            raise ConfigError(f"milestones must be strictly increasing and inside (0, epochs), got {ms}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    @property
    def effective_milestones(self) -> tuple:
        return _default_milestones(self.epochs) if self.milestones is None else self.milestones


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * gamma^(number of milestones at or before this epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(1 for m in cfg.effective_milestones if m <= epoch)
    return cfg.lr0 * cfg.gamma**passed


def bce_loss(probs: "T.Tensor", targets: np.ndarray) -> "T.Tensor":
    """Mean binary cross-entropy over batch and classes.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    targets = np.asarray(targets, dtype=probs.dtype)
    if targets.shape != probs.shape:
        raise DimensionError(f"targets shape {targets.shape} does not match probs {probs.shape}")
    p = T.clip(probs, 1e-7, 1.0 - 1e-7)
    t = T.Tensor(targets)
    one_minus_t = T.Tensor(1.0 - targets)
    ll = T.add(T.mul(t, T.log(p)), T.mul(one_minus_t, T.log(T.add(T.neg(p), 1.0))))
    return T.neg(T.mean(ll))


def apply_freeze_policy(model: AstClassifier, policy: FreezePolicy) -> list:
    """Names of the parameters that stay trainable under ``policy``.

    LAST_TWO_LAYERS keeps the final two encoder blocks, the FC head, and
    the output layer; everything earlier is frozen.
    """
    names = model.parameter_names()
    if policy is FreezePolicy.WHOLE_MODEL:
        return names
    n = model.cfg.n_layers
    keep_prefixes = (f"blocks.{n - 2}.", f"blocks.{n - 1}.", "head.")
    return [name for name in names if name.startswith(keep_prefixes)]


def split_validation(segments: Sequence[Segment], fraction: float, seed: int) -> tuple:
    """Deterministically carve a validation subset out of the training
    segments. Returns (train, val); val is empty when the set is too small."""
    n = len(segments)
    n_val = int(round(n * fraction))
    if n_val == 0 or n_val >= n:
        return list(segments), []
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [segments[i] for i in range(n) if i not in val_idx]
    val = [segments[i] for i in range(n) if i in val_idx]
    return train, val


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list  # per-epoch dicts: epoch, lr, train_loss, val metrics
    best_epoch: int
    best_metric: float


def _segment_spectrogram(
    seg: Segment,
    index: int,
    epoch: int,
    stats: NormStats,
    frontend: FrontendConfig,
    augment: Optional[AugmentConfig],
) -> np.ndarray:
    w = Waveform(seg.samples, 16_000)
    if augment is not None:
        rng = derive_rng(augment.seed, index, epoch)
        w = add_noise(w, augment.noise_snr_db, rng)
        s = normalize(log_mel(w, frontend), stats)
        s = freq_mask(s, augment, rng)
        s = time_mask(s, augment, rng)
        return s.values
    return normalize(log_mel(w, frontend), stats).values


def fit(
    model: AstClassifier,
    train_segments: Sequence[Segment],
    val_segments: Sequence[Segment],
    cfg: TrainConfig,
    *,
    stats: NormStats,
    frontend: FrontendConfig = FrontendConfig(),
    augment: Optional[AugmentConfig] = None,
) -> FitResult:
    """Train ``model`` in place and return the best checkpoint plus the
    epoch log. Augmentation, when given, touches only the training side."""
    if not train_segments:
        raise ContractError("fit: training set is empty")
    trainable_names = apply_freeze_policy(model, cfg.freeze_policy)
    params = model.parameters(trainable_names)
    state = T.AdamState(params)
    epoch_rng = np.random.default_rng(cfg.seed)
    targets_all = np.stack([labels_to_multihot(seg.labels) for seg in train_segments])

    history = []
    best_metric = -np.inf
    best_loss = np.inf
    best_epoch = -1
    best_weights = model.weights_snapshot()

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = epoch_rng.permutation(len(train_segments))
        losses = []
        t_start = time.monotonic()
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            specs = [
                _segment_spectrogram(train_segments[i], int(i), epoch, stats, frontend, augment)
                for i in idx
            ]
            patches = np.stack([extract_patches(s, model.cfg) for s in specs])
            targets = targets_all[idx]
            with T.Tape():
                probs = model.forward_batch(patches)
                loss = bce_loss(probs, targets)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}, lr {lr:g}"
                    )
                T.backward(loss)
            grads = [p.grad for p in params]
            T.adam_step(params, grads, state, lr)
            T.zero_grads(params)
            losses.append(loss_val)
        train_loss = float(np.mean(losses))

        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "seconds": round(time.monotonic() - t_start, 3),
        }
        if val_segments:
            report = evaluate(
                model, val_segments, DecisionMode.SINGLE_LABEL, stats=stats, frontend=frontend,
                batch_size=cfg.batch_size,
            )
            entry["val_macro_f1"] = report.macro_f1
            entry["val_accuracy"] = report.accuracy
            improved = report.macro_f1 > best_metric
            if improved:
                best_metric = report.macro_f1
        else:
            improved = train_loss < best_loss
            if improved:
                best_loss = train_loss
                best_metric = -train_loss
        if improved:
            best_epoch = epoch
            best_weights = model.weights_snapshot()
        history.append(entry)
        log.info(
            "epoch %d: lr %.3g loss %.4f%s",
            epoch, lr, train_loss,
            f" val_f1 {entry['val_macro_f1']:.4f}" if "val_macro_f1" in entry else "",
        )

    metadata = {
        "best_epoch": best_epoch,
        "best_metric": float(best_metric),
        "metric": "val_macro_f1" if val_segments else "neg_train_loss",
        "epochs": cfg.epochs,
        "norm_stats": {"mean": stats.mean, "std": stats.std},
        "scheme": cfg.scheme.value,
        "freeze_policy": cfg.freeze_policy.value,
        "seed": cfg.seed,
    }
    ckpt = Checkpoint(weights=best_weights, config=model.cfg, metadata=metadata)
    return FitResult(checkpoint=ckpt, history=history, best_epoch=best_epoch, best_metric=float(best_metric))
