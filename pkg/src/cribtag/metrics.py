"""Confusion matrices and the evaluation metric suite.

Single-label evaluation builds a 7x7 confusion matrix (rows = truth,
columns = prediction) and reports accuracy, unweighted (macro) precision /
recall / F1, and Cohen's kappa with its observed/chance agreement
components. Multi-label evaluation reports per-class and macro metrics from
thresholded decisions plus per-label accuracy; kappa and the square
confusion matrix only exist in single-label mode.

Conventions: a class with a zero denominator contributes precision/recall 0
(reported, not skipped); kappa with chance agreement 1 is an explicit error
rather than 0.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import LABELS, N_CLASSES, Label, Segment
from .errors import ContractError, DataError, NumericError
from .frontend import FrontendConfig, NormStats, log_mel, normalize


class DecisionMode(enum.Enum):
    SINGLE_LABEL = "single_label"
    MULTI_LABEL = "multi_label"


@dataclass
class ConfusionMatrix:
    """Counts[t, p] = samples with truth t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise ContractError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ContractError("confusion matrix counts must be nonnegative")

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict  # label value -> {"precision", "recall", "f1"}
    kappa: Optional[float] = None
    p_observed: Optional[float] = None
    p_expected: Optional[float] = None
    confusion: Optional[ConfusionMatrix] = None
    n: int = 0
    mode: DecisionMode = DecisionMode.SINGLE_LABEL


def predict_labels(probs: np.ndarray, mode: DecisionMode, threshold: float = 0.5) -> frozenset:
    """Turn one probability vector into a label set.

    Single-label: argmax, ties broken toward the lowest class index.
    Multi-label: every class at or above the threshold, falling back to the
    argmax when none reaches it.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (N_CLASSES,):
        raise ContractError(f"expected {N_CLASSES} probabilities, got shape {probs.shape}")
    if mode is DecisionMode.SINGLE_LABEL:
        return frozenset({LABELS[int(np.argmax(probs))]})
    chosen = [LABELS[i] for i in range(N_CLASSES) if probs[i] >= threshold]
    if not chosen:
        chosen = [LABELS[int(np.argmax(probs))]]
    return frozenset(chosen)


def confusion(preds: Sequence[Label], truths: Sequence[Label]) -> ConfusionMatrix:
    """Count single-label (truth, prediction) pairs."""
    if len(preds) != len(truths):
        raise ContractError(f"got {len(preds)} predictions for {len(truths)} truths")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for p, t in zip(preds, truths):
        counts[LABELS.index(t), LABELS.index(p)] += 1
    return ConfusionMatrix(counts=counts)


def macro_metrics(cm: ConfusionMatrix) -> tuple:
    """(macro precision, macro recall, macro F1, per-class dict)."""
    if cm.n == 0:
        raise ContractError("cannot compute metrics on an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    per_class = {
        LABELS[i].value: {"precision": float(precision[i]), "recall": float(recall[i]), "f1": float(f1[i])}
        for i in range(N_CLASSES)
    }
    return float(precision.mean()), float(recall.mean()), float(f1.mean()), per_class


def cohen_kappa(cm: ConfusionMatrix) -> tuple:
    """(kappa, observed agreement, chance agreement)."""
    n = cm.n
    if n == 0:
        raise ContractError("cannot compute kappa on an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    p_o = float(np.trace(c) / n)
    p_e = float(np.dot(c.sum(axis=1) / n, c.sum(axis=0) / n))
    if p_e >= 1.0:
        raise NumericError("kappa undefined: chance agreement is 1 (all mass in one class)")
    return (p_o - p_e) / (1.0 - p_e), p_o, p_e


def report_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    mp, mr, mf1, per_class = macro_metrics(cm)
    kappa, p_o, p_e = cohen_kappa(cm)
    accuracy = float(np.trace(cm.counts) / cm.n)
    return MetricsReport(
        accuracy=accuracy,
        macro_precision=mp,
        macro_recall=mr,
        macro_f1=mf1,
        per_class=per_class,
        kappa=kappa,
        p_observed=p_o,
        p_expected=p_e,
        confusion=cm,
        n=cm.n,
        mode=DecisionMode.SINGLE_LABEL,
    )


def _multilabel_report(pred_sets: list, truth_sets: list) -> MetricsReport:
    n = len(truth_sets)
    pred = np.zeros((n, N_CLASSES), dtype=bool)
    truth = np.zeros((n, N_CLASSES), dtype=bool)
    for i, (ps, ts) in enumerate(zip(pred_sets, truth_sets)):
        for lab in ps:
            pred[i, LABELS.index(lab)] = True
        for lab in ts:
            truth[i, LABELS.index(lab)] = True
    tp = (pred & truth).sum(axis=0).astype(np.float64)
    fp = (pred & ~truth).sum(axis=0).astype(np.float64)
    fn = (~pred & truth).sum(axis=0).astype(np.float64)
    precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
    recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
    f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    per_class = {
        LABELS[i].value: {"precision": float(precision[i]), "recall": float(recall[i]), "f1": float(f1[i])}
        for i in range(N_CLASSES)
    }
    # per-label accuracy: fraction of (sample, class) decisions that agree
    accuracy = float((pred == truth).mean())
    return MetricsReport(
        accuracy=accuracy,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        per_class=per_class,
        n=n,
        mode=DecisionMode.MULTI_LABEL,
    )


def evaluate(
    model,
    segments: Sequence[Segment],
    mode: DecisionMode = DecisionMode.SINGLE_LABEL,
    *,
    stats: NormStats,
    frontend: FrontendConfig = FrontendConfig(),
    threshold: float = 0.5,
    batch_size: int = 16,
) -> MetricsReport:
    """Run the model over test segments (never augmented) and assemble the
    report."""
    if not segments:
        raise DataError("cannot evaluate an empty test set")
    from .audio import Waveform  # local import to keep module deps one-way

    specs = [
        normalize(log_mel(Waveform(seg.samples, 16_000), frontend), stats)
        for seg in segments
    ]
    probs = model.predict_spectrograms(specs, batch_size=batch_size)
    pred_sets = [predict_labels(p, mode, threshold) for p in probs]
    truth_sets = [seg.labels for seg in segments]
    if mode is DecisionMode.SINGLE_LABEL:
        for seg in segments:
            if len(seg.labels) != 1:
                raise ContractError(
                    "single-label evaluation requires single-label truths; use multi-label mode"
                )
        preds = [next(iter(s)) for s in pred_sets]
        truths = [next(iter(s)) for s in truth_sets]
        return report_from_confusion(confusion(preds, truths))
    return _multilabel_report(pred_sets, truth_sets)


# ---------------------------------------------------------------------------
# report emission


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "accuracy": report.accuracy,
        "macro": {
            "precision": report.macro_precision,
            "recall": report.macro_recall,
            "f1": report.macro_f1,
        },
        "per_class": report.per_class,
        "kappa": report.kappa,
        "p_o": report.p_observed,
        "p_e": report.p_expected,
        "confusion": report.confusion.counts.tolist() if report.confusion is not None else None,
        "n": report.n,
        "mode": report.mode.value,
    }


def report_from_dict(d: dict) -> MetricsReport:
    cm = ConfusionMatrix(np.asarray(d["confusion"])) if d.get("confusion") is not None else None
    return MetricsReport(
        accuracy=d["accuracy"],
        macro_precision=d["macro"]["precision"],
        macro_recall=d["macro"]["recall"],
        macro_f1=d["macro"]["f1"],
        per_class=d["per_class"],
        kappa=d.get("kappa"),
        p_observed=d.get("p_o"),
        p_expected=d.get("p_e"),
        confusion=cm,
        n=d["n"],
        mode=DecisionMode(d.get("mode", "single_label")),
    )


def emit_report(report: MetricsReport, fmt: str = "json") -> str:
    """Render the report as machine-readable JSON or a text table."""
    if fmt == "json":
        return json.dumps(report_to_dict(report), indent=2)
    if fmt != "text":
        raise ContractError(f"unknown report format {fmt!r}")
    lines = []
    header = f"{'Accuracy':>10} {'Precision':>10} {'Recall':>10} {'F1-score':>10} {'Kappa':>10}"
    kappa = f"{report.kappa:.4f}" if report.kappa is not None else "n/a"
    row = (
        f"{report.accuracy:>10.4f} {report.macro_precision:>10.4f} "
        f"{report.macro_recall:>10.4f} {report.macro_f1:>10.4f} {kappa:>10}"
    )
    lines += [header, row, ""]
    lines.append(f"{'class':<22} {'precision':>10} {'recall':>10} {'f1':>10}")
    for name, m in report.per_class.items():
        lines.append(f"{name:<22} {m['precision']:>10.4f} {m['recall']:>10.4f} {m['f1']:>10.4f}")
    if report.confusion is not None:
        lines += ["", "confusion (rows = truth, cols = predicted):"]
        for i, lab in enumerate(LABELS):
            cells = " ".join(f"{c:>6d}" for c in report.confusion.counts[i])
            lines.append(f"{lab.value:<22} {cells}")
    lines.append("")
    lines.append(f"n = {report.n} ({report.mode.value})")
    return "\n".join(lines)
