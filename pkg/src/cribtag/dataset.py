"""Labeled-interval manifests and 4-second training segments.

A manifest is JSONL: one record per line with keys ``path``, ``onset_s``,
``offset_s``, ``labels`` (list), ``family_id``, ``source``. Audio paths may
be relative to the manifest file. Intervals are cut into exact 4 s segments:
long intervals tile into non-overlapping windows, short ones get neighboring
audio appended evenly on both sides, spilling the deficit to the opposite
side at file edges.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .audio import PIPELINE_RATE, Waveform, read_wav, resample, wav_info
from .errors import ConfigError, DataError, ManifestError

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 4.0
SEGMENT_SAMPLES = int(SEGMENT_SECONDS * PIPELINE_RATE)  # 64000

# trailing remainders shorter than this are dropped instead of padded
MIN_REMAINDER_SECONDS = 1.0


class Label(enum.Enum):
    """The 7-way tagging taxonomy. Enum order fixes the class index."""

    CHILD_VOICE = "child_voice"
    ADULT_SPEECH = "adult_speech"
    TV = "tv"
    PERCUSSIVE_NOISE = "percussive_noise"
    WHITE_NOISE = "white_noise"
    MUSIC = "music"
    HOUSEHOLD_APPLIANCE = "household_appliance"


LABELS: tuple = tuple(Label)
LABEL_INDEX = {lab: i for i, lab in enumerate(LABELS)}
N_CLASSES = len(LABELS)


def parse_label(name: str) -> Label:
    try:
        return Label(name)
    except ValueError:
        known = ", ".join(l.value for l in LABELS)
        raise ManifestError(f"unknown label {name!r} (known: {known})") from None


def labels_to_multihot(labels: Iterable[Label]) -> np.ndarray:
    out = np.zeros(N_CLASSES, dtype=np.float32)
    for lab in labels:
        out[LABEL_INDEX[lab]] = 1.0
    return out


class Source(enum.Enum):
    CHIME_HOME = "CHIME_HOME"
    ESC24 = "ESC24"
    GTZAN = "GTZAN"
    LIBRITTS = "LIBRITTS"
    LB_HOME = "LB_HOME"
    SYNTH = "SYNTH"


@dataclass(frozen=True)
class ManifestRecord:
    """One labeled audio interval."""

    path: str
    onset_s: float
    offset_s: float
    labels: frozenset
    family_id: str
    source: Source

    def __post_init__(self):
        if not self.labels:
            raise ManifestError(f"{self.path}: record has no labels")
        if not 0 <= self.onset_s < self.offset_s:
            raise ManifestError(f"{self.path}: need 0 <= onset < offset, got [{self.onset_s}, {self.offset_s}]")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s

    @property
    def key(self) -> str:
        return f"{self.path}:{self.onset_s:.6f}:{self.offset_s:.6f}"


@dataclass
class Segment:
    """Exactly 4 s of 16 kHz audio with its label set and provenance."""

    samples: np.ndarray
    labels: frozenset
    record: ManifestRecord
    window: tuple  # (start_s, end_s) within the source file

    def __post_init__(self):
        self.samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float32).reshape(-1))
        if len(self.samples) != SEGMENT_SAMPLES:
            raise DataError(f"segment must be exactly {SEGMENT_SAMPLES} samples, got {len(self.samples)}")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test fraction must lie strictly between 0 and 1")


# ---------------------------------------------------------------------------
# manifests


def _record_from_json(obj: dict, base_dir: Optional[Path]) -> ManifestRecord:
    try:
        path = obj["path"]
        onset = float(obj["onset_s"])
        offset = float(obj["offset_s"])
        raw_labels = obj["labels"]
        family = str(obj["family_id"])
        source = Source(obj["source"])
    except KeyError as e:
        raise ManifestError(f"missing field {e.args[0]!r}") from None
    except ValueError as e:
        raise ManifestError(str(e)) from None
    if not isinstance(raw_labels, list) or not raw_labels:
        raise ManifestError("labels must be a nonempty list")
    if base_dir is not None and not Path(path).is_absolute():
        path = str(base_dir / path)
    return ManifestRecord(
        path=path,
        onset_s=onset,
        offset_s=offset,
        labels=frozenset(parse_label(l) for l in raw_labels),
        family_id=family,
        source=source,
    )


def load_manifest(path: Union[str, Path], check_audio: bool = True) -> list:
    """Parse and validate a JSONL manifest.

    With ``check_audio``, each record's offset is checked against the audio
    header's duration.
    """
    path = Path(path)
    base_dir = path.parent
    records = []
    infos: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = _record_from_json(obj, base_dir)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {e}") from None
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            if check_audio:
                if rec.path not in infos:
                    infos[rec.path] = wav_info(rec.path)
                dur = infos[rec.path].duration_s
                if rec.offset_s > dur + 1e-6:
                    raise ManifestError(
                        f"{path}:{lineno}: offset {rec.offset_s}s beyond file duration {dur:.3f}s"
                    )
            records.append(rec)
    return records


def save_manifest(path: Union[str, Path], records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "path": rec.path,
                "onset_s": rec.onset_s,
                "offset_s": rec.offset_s,
                "labels": sorted(l.value for l in rec.labels),
                "family_id": rec.family_id,
                "source": rec.source.value,
            }
            f.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# segmentation


def _pad_window(a: float, b: float, file_dur: float) -> tuple:
    """Center a 4 s window on [a, b], spilling any edge deficit to the
    opposite side. Assumes file_dur >= 4 s."""
    pad = (SEGMENT_SECONDS - (b - a)) / 2.0
    start = a - pad
    end = b + pad
    if start < 0:
        start, end = 0.0, SEGMENT_SECONDS
    elif end > file_dur:
        start, end = file_dur - SEGMENT_SECONDS, file_dur
    return start, end


def extract_segments(record: ManifestRecord, waveform: Optional[Waveform] = None) -> list:
    """Cut a record into exact 4 s segments at 16 kHz.

    Intervals of 4 s or more tile into consecutive non-overlapping windows;
    a trailing remainder of at least 1 s is kept as a short interval. Short
    intervals are centered with even context padding. Files shorter than
    4 s yield no segments (logged).
    """
    if waveform is None:
        waveform = read_wav(record.path)
    if waveform.sample_rate != PIPELINE_RATE:
        waveform = resample(waveform, PIPELINE_RATE)
    n = len(waveform.samples)
    if n < SEGMENT_SAMPLES:
        log.warning("%s: file shorter than 4 s (%.2f s), skipping record", record.path, n / PIPELINE_RATE)
        return []
    file_dur = n / PIPELINE_RATE

    windows = []
    length = record.duration_s
    if length < SEGMENT_SECONDS:
        windows.append(_pad_window(record.onset_s, record.offset_s, file_dur))
    else:
        k = int(length // SEGMENT_SECONDS)
        for i in range(k):
            a = record.onset_s + i * SEGMENT_SECONDS
            windows.append((a, a + SEGMENT_SECONDS))
        rem = length - k * SEGMENT_SECONDS
        if rem >= MIN_REMAINDER_SECONDS:
            windows.append(_pad_window(record.onset_s + k * SEGMENT_SECONDS, record.offset_s, file_dur))

    segments = []
    for start_s, end_s in windows:
        start = int(round(start_s * PIPELINE_RATE))
        start = max(0, min(start, n - SEGMENT_SAMPLES))
        chunk = waveform.samples[start : start + SEGMENT_SAMPLES]
        segments.append(
            Segment(
                samples=chunk.copy(),
                labels=record.labels,
                record=record,
                window=(start / PIPELINE_RATE, start / PIPELINE_RATE + SEGMENT_SECONDS),
            )
        )
    return segments


def load_segments(records: Sequence[ManifestRecord], threads: int = 1) -> list:
    """Extract segments for many records, optionally with a worker pool."""
    if threads <= 1:
        nested = [extract_segments(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            nested = list(pool.map(extract_segments, records))
    return [seg for group in nested for seg in group]


# ---------------------------------------------------------------------------
# splitting and balancing


def split(records: Sequence[ManifestRecord], spec: SplitSpec) -> tuple:
    """Deterministic family-stratified partition at record granularity.

    Every family with at least two records contributes to both sides;
    single-record families go to train.
    """
    by_family: dict = {}
    for rec in records:
        by_family.setdefault(rec.family_id, []).append(rec)
    rng = np.random.default_rng(spec.seed)
    test_keys = set()
    for family in sorted(by_family):
        fam = sorted(by_family[family], key=lambda r: r.key)
        n = len(fam)
        if n < 2:
            continue
        n_test = min(max(1, int(round(spec.test_fraction * n))), n - 1)
        order = rng.permutation(n)
        for i in order[:n_test]:
            test_keys.add(fam[i].key)
    train = [r for r in records if r.key not in test_keys]
    test = [r for r in records if r.key in test_keys]
    return train, test


def _class_counts(segments: Sequence[Segment]) -> dict:
    counts: dict = {}
    for seg in segments:
        for lab in seg.labels:
            counts[lab] = counts.get(lab, 0) + 1
    return counts


def balance_by_resampling(
    segments: Sequence[Segment],
    cap: float = 4.0,
    seed: int = 0,
    classes: Optional[Sequence[Label]] = None,
) -> list:
    """Oversample minority classes with replacement toward the max-class
    count, never past ``cap`` times a class's original count. Originals are
    always kept.
    """
    if cap < 1:
        raise ConfigError(f"resampling cap must be >= 1, got {cap}")
    counts = _class_counts(segments)
    if classes is None:
        classes = [c for c in LABELS if counts.get(c, 0) > 0]
        if not classes:
            raise DataError("no segments to balance")
    else:
        for c in classes:
            if counts.get(c, 0) == 0:
                raise DataError(f"class {c.value} has zero segments; cannot balance")
    target = max(counts[c] for c in classes)
    rng = np.random.default_rng(seed)
    out = list(segments)
    for c in classes:
        cur = counts[c]
        allowed = min(target, int(cap * cur))
        extra = allowed - cur
        if extra <= 0:
            continue
        pool = [s for s in segments if c in s.labels]
        picks = rng.integers(0, len(pool), size=extra)
        out.extend(pool[i] for i in picks)
    return out


def synthesize_white_noise(n_segments: int, seed: int = 0) -> list:
    """Gaussian-noise segments (unit sigma, scaled to 0.1 full-scale,
    clipped to [-1, 1]) labeled as white noise."""
    if n_segments < 1:
        raise ConfigError(f"n_segments must be >= 1, got {n_segments}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_segments):
        raw = rng.standard_normal(SEGMENT_SAMPLES)
        samples = np.clip(0.1 * raw, -1.0, 1.0).astype(np.float32)
        rec = ManifestRecord(
            path=f"synth://white_noise/{seed}/{i}",
            onset_s=0.0,
            offset_s=SEGMENT_SECONDS,
            labels=frozenset({Label.WHITE_NOISE}),
            family_id="synth",
            source=Source.SYNTH,
        )
        out.append(Segment(samples=samples, labels=rec.labels, record=rec, window=(0.0, SEGMENT_SECONDS)))
    return out


class Scheme(enum.Enum):
    PUBLIC = "public"
    RESAMPLED = "resampled"
    MIXED = "mixed"


def compose_scheme(
    scheme: Scheme,
    public_segments: Sequence[Segment],
    lb_segments: Sequence[Segment],
    cap: float = 4.0,
    seed: int = 0,
) -> list:
    """Assemble the training set for one of the three schemes.

    PUBLIC uses the public corpora as-is. RESAMPLED balances the in-domain
    segments by oversampling. MIXED starts from the in-domain segments and
    tops every class up toward the max-class count, preferring real public
    segments over duplicates; only a residual deficit is oversampled.
    """
    if scheme is Scheme.PUBLIC:
        if not public_segments:
            raise ConfigError("PUBLIC scheme requires a nonempty public corpus")
        return list(public_segments)
    if scheme is Scheme.RESAMPLED:
        if not lb_segments:
            raise ConfigError("RESAMPLED scheme requires a nonempty in-domain corpus")
        return balance_by_resampling(lb_segments, cap=cap, seed=seed)
    if scheme is Scheme.MIXED:
        if not lb_segments or not public_segments:
            raise ConfigError("MIXED scheme requires nonempty in-domain and public corpora")
        lb_counts = _class_counts(lb_segments)
        pub_pools = {c: [s for s in public_segments if c in s.labels] for c in LABELS}
        classes = [c for c in LABELS if lb_counts.get(c, 0) > 0 or pub_pools[c]]
        target = max(lb_counts.get(c, 0) for c in classes)
        rng = np.random.default_rng(seed)
        out = list(lb_segments)
        for c in classes:
            deficit = target - lb_counts.get(c, 0)
            if deficit <= 0:
                continue
            pool = pub_pools[c]
            take = min(deficit, len(pool))
            if take:
                picks = rng.permutation(len(pool))[:take]
                out.extend(pool[i] for i in picks)
                deficit -= take
            lb_pool = [s for s in lb_segments if c in s.labels]
            if deficit > 0 and lb_pool:
                cur = lb_counts[c]
                extra = min(deficit, int(cap * cur) - cur)
                if extra > 0:
                    picks = rng.integers(0, len(lb_pool), size=extra)
                    out.extend(lb_pool[i] for i in picks)
        return out
    raise ConfigError(f"unknown scheme {scheme!r}")
