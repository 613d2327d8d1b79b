"""WAV decoding, mono mixdown, and band-limited resampling.

Only RIFF/WAVE is handled, little-endian, fmt tags 1 (PCM-16) and
3 (IEEE float-32), one or two channels. The decoder is written against the
container layout directly so its failure modes stay auditable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import AudioFormatError, DataError

PIPELINE_RATE = 16_000

_FMT_PCM16 = 1
_FMT_FLOAT32 = 3


@dataclass
class Waveform:
    """Mono float32 samples in [-1, 1] plus their sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float32).reshape(-1))
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class WavInfo:
    """Header-level facts about a WAV file, read without decoding samples."""

    sample_rate: int
    n_channels: int
    n_frames: int

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate


def _parse_header(f, path) -> tuple[int, int, int, int, int]:
    """Return (fmt_tag, n_channels, sample_rate, bits, data_size) with the
    stream positioned at the start of the data chunk."""
    riff = f.read(12)
    if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    while True:
        head = f.read(8)
        if len(head) < 8:
            if fmt is None:
                raise DataError(f"{path}: truncated before fmt chunk")
            raise DataError(f"{path}: truncated before data chunk")
        cid, size = struct.unpack("<4sI", head)
        if cid == b"fmt ":
            body = f.read(size)
            if len(body) < 16:
                raise DataError(f"{path}: truncated fmt chunk")
            fmt_tag, n_ch, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            fmt = (fmt_tag, n_ch, rate, bits)
        elif cid == b"data":
            if fmt is None:
                raise DataError(f"{path}: data chunk precedes fmt chunk")
            fmt_tag, n_ch, rate, bits = fmt
            return fmt_tag, n_ch, rate, bits, size
        else:
            f.seek(size + (size & 1), 1)


def _check_format(fmt_tag: int, n_ch: int, bits: int, path) -> None:
    if fmt_tag not in (_FMT_PCM16, _FMT_FLOAT32):
        raise AudioFormatError(f"{path}: unsupported fmt tag {fmt_tag} (want 1=PCM or 3=float)")
    if fmt_tag == _FMT_PCM16 and bits != 16:
        raise AudioFormatError(f"{path}: PCM must be 16-bit, got {bits}")
    if fmt_tag == _FMT_FLOAT32 and bits != 32:
        raise AudioFormatError(f"{path}: float WAV must be 32-bit, got {bits}")
    if n_ch not in (1, 2):
        raise AudioFormatError(f"{path}: want 1 or 2 channels, got {n_ch}")


def wav_info(path: Union[str, Path]) -> WavInfo:
    """Sample rate / channel count / frame count from the header alone."""
    with open(path, "rb") as f:
        fmt_tag, n_ch, rate, bits, data_size = _parse_header(f, path)
    _check_format(fmt_tag, n_ch, bits, path)
    bytes_per_frame = n_ch * (bits // 8)
    return WavInfo(sample_rate=rate, n_channels=n_ch, n_frames=data_size // bytes_per_frame)


def read_wav(path: Union[str, Path]) -> Waveform:
    """Decode a WAV file to a mono float32 waveform.

    PCM-16 is scaled by 1/32768; stereo is averaged to mono.
    """
    with open(path, "rb") as f:
        fmt_tag, n_ch, rate, bits, data_size = _parse_header(f, path)
        _check_format(fmt_tag, n_ch, bits, path)
        raw = f.read(data_size)
    if len(raw) < data_size:
        raise DataError(f"{path}: data chunk truncated ({len(raw)} of {data_size} bytes)")
    if fmt_tag == _FMT_PCM16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    else:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if n_ch == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    return Waveform(samples=x, sample_rate=rate)


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    """Write a mono IEEE float-32 WAV file."""
    data = np.asarray(w.samples, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(b"RIFF")
            f.write(struct.pack("<I", 4 + 8 + 16 + 8 + len(data)))
            f.write(b"WAVE")
            f.write(struct.pack("<4sIHHIIHH", b"fmt ", 16, _FMT_FLOAT32, 1, w.sample_rate, w.sample_rate * 4, 4, 32))
            f.write(struct.pack("<4sI", b"data", len(data)))
            f.write(data)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


_TAPS_HALF = 32  # 64-tap kernel
_KAISER_BETA = 8.0


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc (Kaiser, beta=8, 64 taps) resampling.

    Identity when the rates already match. Output length is
    round(len * target / source).
    """
    if target_rate <= 0:
        raise DataError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(samples=w.samples.copy(), sample_rate=w.sample_rate)
    n_in = len(w.samples)
    n_out = int(round(n_in * target_rate / w.sample_rate))
    if n_in == 0 or n_out == 0:
        return Waveform(samples=np.zeros(n_out, dtype=np.float32), sample_rate=target_rate)

    ratio = w.sample_rate / target_rate
    # cutoff at the narrower Nyquist to avoid aliasing on downsampling
    cutoff = min(1.0, 1.0 / ratio)

    pos = np.arange(n_out, dtype=np.float64) * ratio
    base = np.floor(pos).astype(np.int64)
    frac = pos - base

    k = np.arange(-_TAPS_HALF + 1, _TAPS_HALF + 1, dtype=np.float64)  # 64 taps
    t = k[None, :] - frac[:, None]
    kernel = cutoff * np.sinc(cutoff * t)
    xw = t / _TAPS_HALF
    inside = np.abs(xw) <= 1.0
    window = np.where(inside, np.i0(_KAISER_BETA * np.sqrt(np.clip(1.0 - xw * xw, 0.0, 1.0))), 0.0)
    window /= np.i0(_KAISER_BETA)
    kernel *= window

    padded = np.zeros(n_in + 2 * _TAPS_HALF, dtype=np.float64)
    padded[_TAPS_HALF : _TAPS_HALF + n_in] = w.samples
    idx = base[:, None] + k[None, :].astype(np.int64) + _TAPS_HALF
    out = np.einsum("ij,ij->i", padded[idx], kernel)
    return Waveform(samples=out.astype(np.float32), sample_rate=target_rate)


def to_pipeline_rate(w: Waveform) -> Waveform:
    """Resample to the 16 kHz rate the rest of the pipeline assumes."""
    return resample(w, PIPELINE_RATE)
