"""Training-time augmentation: spectrogram masking, additive noise, mixup.

Mask widths are drawn uniformly from {0..max}; the masked region is filled
with the configured value (0 on normalized spectrograms, i.e. the training
mean). Noise is injected in the waveform domain at a target SNR. Mixup
splices a time-frequency rectangle of one sample into another and unions the
labels; it ships disabled.

Everything is driven by an explicit ``numpy.random.Generator`` so results
are reproducible and parallelizable with per-sample generators.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .audio import Waveform
from .dataset import Label
from .errors import ConfigError, DimensionError
from .frontend import LogMelSpectrogram

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    max_freq_mask: int = 24
    max_time_mask: int = 96
    n_freq_masks: int = 1
    n_time_masks: int = 1
    noise_snr_db: Optional[float] = 20.0  # None disables noise injection
    mixup_enabled: bool = False
    mask_fill: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.max_freq_mask <= 128:
            raise ConfigError(f"max_freq_mask must be in [0, 128], got {self.max_freq_mask}")
        if self.max_time_mask < 0:
            raise ConfigError(f"max_time_mask must be >= 0, got {self.max_time_mask}")
        if self.n_freq_masks < 0 or self.n_time_masks < 0:
            raise ConfigError("mask counts must be >= 0")


def derive_rng(global_seed: int, sample_id: int, epoch: int) -> np.random.Generator:
    """Per-sample generator hashed from (global seed, sample id, epoch)."""
    return np.random.default_rng(np.random.SeedSequence((global_seed, sample_id, epoch)))


def freq_mask(s: LogMelSpectrogram, cfg: AugmentConfig, rng: np.random.Generator) -> LogMelSpectrogram:
    """Fill up to ``n_freq_masks`` random row bands, each at most
    ``max_freq_mask`` rows wide."""
    v = s.values.copy()
    n_mels = v.shape[0]
    limit = min(cfg.max_freq_mask, n_mels)
    for _ in range(cfg.n_freq_masks):
        f = int(rng.integers(0, limit + 1))
        f0 = int(rng.integers(0, n_mels - f + 1))
        if f:
            v[f0 : f0 + f, :] = cfg.mask_fill
    return LogMelSpectrogram(values=v, frame_rate=s.frame_rate)


def time_mask(s: LogMelSpectrogram, cfg: AugmentConfig, rng: np.random.Generator) -> LogMelSpectrogram:
    """Fill up to ``n_time_masks`` random column bands, each at most
    ``max_time_mask`` columns wide."""
    v = s.values.copy()
    n_frames = v.shape[1]
    limit = min(cfg.max_time_mask, n_frames)
    for _ in range(cfg.n_time_masks):
        t = int(rng.integers(0, limit + 1))
        t0 = int(rng.integers(0, n_frames - t + 1))
        if t:
            v[:, t0 : t0 + t] = cfg.mask_fill
    return LogMelSpectrogram(values=v, frame_rate=s.frame_rate)


def add_noise(w: Waveform, snr_db: Optional[float], rng: np.random.Generator) -> Waveform:
    """Add Gaussian noise scaled so the signal-to-noise ratio is ``snr_db``.

    ``None`` or infinite SNR returns the input unchanged; silent input is
    returned unchanged with a warning.
    """
    if snr_db is None or math.isinf(snr_db):
        return Waveform(samples=w.samples.copy(), sample_rate=w.sample_rate)
    p_signal = float(np.mean(w.samples.astype(np.float64) ** 2))
    if p_signal <= 0:
        log.warning("add_noise: silent input, returning unchanged")
        return Waveform(samples=w.samples.copy(), sample_rate=w.sample_rate)
    p_noise = p_signal / (10.0 ** (snr_db / 10.0))
    noise = rng.standard_normal(len(w.samples)) * math.sqrt(p_noise)
    return Waveform(samples=(w.samples + noise).astype(np.float32), sample_rate=w.sample_rate)


def spec_mixup(
    a: LogMelSpectrogram,
    a_labels: frozenset,
    b: LogMelSpectrogram,
    b_labels: frozenset,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    region: Optional[tuple] = None,
) -> tuple:
    """Replace a random time-frequency rectangle of ``a`` with ``b``'s values.

    Returns (mixed spectrogram, label set). A zero-area region leaves ``a``
    and its labels untouched; any positive-area splice unions the labels.
    ``region`` = (f0, f, t0, t) overrides the random draw.
    """
    if a.values.shape != b.values.shape:
        raise DimensionError(f"spec_mixup: shapes {a.values.shape} and {b.values.shape} differ")
    n_mels, n_frames = a.values.shape
    if region is None:
        f_limit = min(cfg.max_freq_mask, n_mels)
        t_limit = min(cfg.max_time_mask, n_frames)
        f = int(rng.integers(0, f_limit + 1))
        f0 = int(rng.integers(0, n_mels - f + 1))
        t = int(rng.integers(0, t_limit + 1))
        t0 = int(rng.integers(0, n_frames - t + 1))
    else:
        f0, f, t0, t = region
        if not (0 <= f0 <= f0 + f <= n_mels and 0 <= t0 <= t0 + t <= n_frames):
            raise DimensionError(f"spec_mixup: region {region} outside shape {a.values.shape}")
    v = a.values.copy()
    if f == 0 or t == 0:
        return LogMelSpectrogram(values=v, frame_rate=a.frame_rate), frozenset(a_labels)
    v[f0 : f0 + f, t0 : t0 + t] = b.values[f0 : f0 + f, t0 : t0 + t]
    return LogMelSpectrogram(values=v, frame_rate=a.frame_rate), frozenset(a_labels) | frozenset(b_labels)
