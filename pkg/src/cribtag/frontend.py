"""16 kHz waveform -> normalized 128-bin log-Mel spectrogram.

The frame geometry is 25 ms periodic Hamming windows sliding by 10 ms
(400/160 samples at 16 kHz), zero-padded to a 512-point real FFT. Mel
filters are triangles with centers uniform on the mel scale; each filter's
weight at an FFT bin is the triangle integrated over that bin's width, so
narrow low-frequency filters keep nonzero support at this grid resolution.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .audio import Waveform
from .errors import ConfigError, ContractError, DataError


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16_000
    win_length: int = 400
    hop: int = 160
    fft_size: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 8_000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.fft_size < self.win_length:
            raise ConfigError(f"fft_size {self.fft_size} smaller than win_length {self.win_length}")
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size {self.fft_size} is not a power of two")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(f"need 0 <= fmin < fmax <= Nyquist, got fmin={self.fmin} fmax={self.fmax}")
        if self.hop <= 0 or self.win_length <= 0 or self.n_mels <= 0:
            raise ConfigError("hop, win_length and n_mels must be positive")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def frame_rate(self) -> int:
        return self.sample_rate // self.hop

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise ContractError(f"input of {n_samples} samples is shorter than one window ({self.win_length})")
        return (n_samples - self.win_length) // self.hop + 1


@dataclass
class LogMelSpectrogram:
    """n_mels x T matrix of log-Mel energies at 100 frames/s."""

    values: np.ndarray
    frame_rate: int = 100

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if self.values.ndim != 2:
            raise ContractError(f"spectrogram must be 2-D, got shape {self.values.shape}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    """Scalar mean/std of the training split's spectrogram values."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DataError(f"normalization std must be positive, got {self.std}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _periodic_hamming(n: int) -> np.ndarray:
    return (0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float32)


def frame_and_window(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Slice into hop-spaced windows and apply the periodic Hamming taper.

    Returns a T x win_length float32 matrix.
    """
    if w.sample_rate != cfg.sample_rate:
        raise ContractError(f"expected {cfg.sample_rate} Hz input, got {w.sample_rate} Hz")
    n = len(w.samples)
    t = cfg.n_frames(n)
    starts = np.arange(t) * cfg.hop
    frames = w.samples[starts[:, None] + np.arange(cfg.win_length)[None, :]]
    return frames * _periodic_hamming(cfg.win_length)


def power_spectrum(frames: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Squared magnitude of the one-sided FFT of zero-padded frames."""
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return (spec.real**2 + spec.imag**2).astype(np.float64)


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """n_mels x n_bins triangular filter matrix.

    Filter i is the triangle rising from mel point i to i+1 and falling to
    i+2, integrated over each FFT bin's width (bin center +- half spacing)
    and normalized by that width. Every filter is nonnegative and unimodal,
    and every bin strictly inside (fmin, fmax) is covered by some filter.
    """
    mel_points = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_width = cfg.sample_rate / cfg.fft_size
    bin_centers = np.arange(cfg.n_bins) * bin_width
    lo_edges = bin_centers - bin_width / 2.0
    hi_edges = bin_centers + bin_width / 2.0

    def tri_integral(fl, fc, fr, a, b):
        # integral of the unit triangle (fl -> peak at fc -> fr) over [a, b]
        def ramp_up(x):
            x = np.clip(x, fl, fc)
            return (x - fl) ** 2 / (2.0 * (fc - fl)) if fc > fl else np.zeros_like(x)

        def ramp_down(x):
            x = np.clip(x, fc, fr)
            return (x - fc) - (x - fc) ** 2 / (2.0 * (fr - fc)) if fr > fc else np.zeros_like(x)

        return (ramp_up(b) - ramp_up(a)) + (ramp_down(b) - ramp_down(a))

    fb = np.zeros((cfg.n_mels, cfg.n_bins), dtype=np.float64)
    for i in range(cfg.n_mels):
        fl, fc, fr = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        fb[i] = tri_integral(fl, fc, fr, lo_edges, hi_edges) / bin_width
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"{empty.size} mel filters have no FFT-bin support (first: {empty[0]}); "
            f"reduce n_mels or increase fft_size"
        )
    return fb


def log_mel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> LogMelSpectrogram:
    """Full frontend: frames -> power spectrum -> mel energies -> ln with a
    floor of cfg.log_floor."""
    frames = frame_and_window(w, cfg)
    power = power_spectrum(frames, cfg)
    mel = mel_filterbank(cfg) @ power.T
    np.maximum(mel, cfg.log_floor, out=mel)
    return LogMelSpectrogram(values=np.log(mel), frame_rate=cfg.frame_rate)


def normalize(s: LogMelSpectrogram, stats: NormStats) -> LogMelSpectrogram:
    """x -> (x - mean) / (2 std); maps the training split to mean 0, std 0.5."""
    out = (s.values - np.float32(stats.mean)) / np.float32(2.0 * stats.std)
    return LogMelSpectrogram(values=out, frame_rate=s.frame_rate)


def compute_stats(spectrograms: Iterable[LogMelSpectrogram]) -> NormStats:
    """Scalar mean/std over every value of every training spectrogram."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for s in spectrograms:
        v = s.values.astype(np.float64)
        total += v.sum()
        total_sq += (v * v).sum()
        count += v.size
    if count == 0:
        raise ContractError("compute_stats: no spectrograms given")
    mean = total / count
    var = total_sq / count - mean * mean
    if var <= 0:
        raise DataError("training spectrograms have zero variance; cannot normalize")
    return NormStats(mean=mean, std=math.sqrt(var))
