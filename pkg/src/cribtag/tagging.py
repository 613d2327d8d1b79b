"""Sliding-window tagging of long recordings.

A recording is resampled to 16 kHz and scanned with 4 s windows placed
every ``hop_s`` seconds; each window gets the full frontend + model pass
and yields one timeline entry with the argmax label and all class
probabilities. Windows never extend past the end of the file.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .audio import PIPELINE_RATE, Waveform, resample
from .dataset import LABELS, SEGMENT_SAMPLES, SEGMENT_SECONDS
from .errors import ContractError, DataError
from .frontend import FrontendConfig, NormStats, log_mel, normalize
from .model import AstClassifier, extract_patches


def window_starts(duration_s: float, hop_s: float) -> list:
    """Window onset times: multiples of hop_s whose 4 s window fits."""
    if hop_s <= 0:
        raise ContractError(f"hop_s must be positive, got {hop_s}")
    starts = []
    k = 0
    while True:
        start = k * hop_s
        if start + SEGMENT_SECONDS > duration_s + 1e-9:
            break
        starts.append(start)
        k += 1
    return starts


def tag_waveform(
    model: AstClassifier,
    w: Waveform,
    stats: NormStats,
    hop_s: float = 4.0,
    frontend: FrontendConfig = FrontendConfig(),
    batch_size: int = 16,
) -> list:
    """Tag a recording; returns timeline dicts with onset_s, offset_s,
    label, and per-class probs."""
    if w.sample_rate != PIPELINE_RATE:
        w = resample(w, PIPELINE_RATE)
    duration = len(w.samples) / PIPELINE_RATE
    if duration < SEGMENT_SECONDS:
        raise DataError(f"recording is {duration:.2f} s, need at least {SEGMENT_SECONDS} s to tag")
    starts = window_starts(duration, hop_s)
    specs = []
    for s in starts:
        i0 = int(round(s * PIPELINE_RATE))
        i0 = min(i0, len(w.samples) - SEGMENT_SAMPLES)
        chunk = w.samples[i0 : i0 + SEGMENT_SAMPLES]
        specs.append(normalize(log_mel(Waveform(chunk, PIPELINE_RATE), frontend), stats))
    probs = model.predict_spectrograms(specs, batch_size=batch_size)
    timeline = []
    for s, p in zip(starts, probs):
        timeline.append(
            {
                "onset_s": round(s, 6),
                "offset_s": round(s + SEGMENT_SECONDS, 6),
                "label": LABELS[int(np.argmax(p))].value,
                "probs": {lab.value: float(p[i]) for i, lab in enumerate(LABELS)},
            }
        )
    return timeline
