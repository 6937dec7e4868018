"""Aggregate per-trial predictions into per-subject diagnoses and compute
confusion matrices and classification metrics."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from tapdx import errors
from tapdx.classify import Prediction
from tapdx.ingest import CLASS_ORDER, Label

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


def round2(value: float) -> float:
    """Half-up rounding to two decimals, as in the published tables."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# Subject-level aggregation
# ---------------------------------------------------------------------------

def aggregate_subject(predictions: Sequence[Prediction]) -> Prediction:
    """Modal predicted label over a subject's trials.

    Frequency ties go to the tied label with the larger probability summed
    across all of the subject's trials; any residual exact tie falls back
    to class order.
    """
    if not predictions:
        raise errors.DataError("no predictions to aggregate")
    class_order = list(predictions[0].probabilities)
    counts = Counter(p.label for p in predictions)
    top = max(counts.values())
    tied = [c for c in class_order if counts.get(c, 0) == top]
    if len(tied) == 1:
        winner = tied[0]
    else:
        summed = {c: sum(p.probabilities.get(c, 0.0) for p in predictions)
                  for c in tied}
        best = max(summed.values())
        winner = next(c for c in tied if summed[c] == best)
    mean_probs = {
        c: float(np.mean([p.probabilities.get(c, 0.0) for p in predictions]))
        for c in class_order
    }
    return Prediction(
        label=winner,
        probabilities=mean_probs,
        person_id=predictions[0].person_id,
        trial_id="",
    )


# ---------------------------------------------------------------------------
# Confusion matrix and metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    classes: list
    counts: np.ndarray  # rows = true, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))


def confusion(
    true: Sequence[Hashable],
    pred: Sequence[Hashable],
    classes: Sequence | None = None,
) -> ConfusionMatrix:
    if len(true) != len(pred):
        raise errors.LengthMismatch(
            f"{len(true)} true labels vs {len(pred)} predictions"
        )
    if classes is None:
        classes = list(CLASS_ORDER) if all(
            isinstance(v, Label) for v in list(true) + list(pred)
        ) else sorted(set(true) | set(pred))
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=int)
    for t, p in zip(true, pred):
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(classes=list(classes), counts=counts)


@dataclass
class MetricSet:
    """All values are percentages."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class: dict  # class -> {"precision": _, "recall": _, "f1": _}


def metrics(cm: ConfusionMatrix) -> MetricSet:
    if cm.total == 0:
        raise errors.DataError("empty confusion matrix")
    counts = cm.counts.astype(float)
    diag = np.diag(counts)
    col_sums = counts.sum(axis=0)
    row_sums = counts.sum(axis=1)
    per_class = {}
    precisions, recalls, f1s = [], [], []
    for i, cls in enumerate(cm.classes):
        if col_sums[i] == 0:
            logger.info("class %s never predicted; precision set to 0", cls)
            precision = 0.0
        else:
            precision = diag[i] / col_sums[i]
        recall = diag[i] / row_sums[i] if row_sums[i] > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        per_class[cls] = {
            "precision": precision * 100.0,
            "recall": recall * 100.0,
            "f1": f1 * 100.0,
        }
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    support = row_sums / cm.total
    return MetricSet(
        accuracy=cm.correct / cm.total * 100.0,
        macro_precision=float(np.mean(precisions)) * 100.0,
        macro_recall=float(np.mean(recalls)) * 100.0,
        macro_f1=float(np.mean(f1s)) * 100.0,
        weighted_precision=float(np.dot(support, precisions)) * 100.0,
        weighted_recall=float(np.dot(support, recalls)) * 100.0,
        weighted_f1=float(np.dot(support, f1s)) * 100.0,
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _class_name(cls) -> str:
    return cls.value if isinstance(cls, Label) else str(cls)


def _confusion_csv(cm: ConfusionMatrix, path: Path) -> None:
    names = [_class_name(c) for c in cm.classes]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("true\\pred," + ",".join(names) + "\n")
        for name, row in zip(names, cm.counts):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")


def _confusion_svg(cm: ConfusionMatrix, path: Path, title: str) -> None:
    names = [_class_name(c) for c in cm.classes]
    k = len(names)
    cell, margin = 70, 90
    width = margin + k * cell + 20
    height = margin + k * cell + 20
    peak = max(1, int(cm.counts.max()))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{margin + k * cell / 2}" y="25" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    for i, name in enumerate(names):
        parts.append(
            f'<text x="{margin - 8}" y="{margin + i * cell + cell / 2 + 5}" '
            f'text-anchor="end" font-family="sans-serif" font-size="13">{name}</text>'
        )
        parts.append(
            f'<text x="{margin + i * cell + cell / 2}" y="{margin - 10}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="13">{name}</text>'
        )
    for i in range(k):
        for j in range(k):
            value = int(cm.counts[i, j])
            shade = value / peak
            red = int(round(255 - 155 * shade))
            green = int(round(255 - 105 * shade))
            parts.append(
                f'<rect x="{margin + j * cell}" y="{margin + i * cell}" '
                f'width="{cell}" height="{cell}" fill="rgb({red},{green},255)" '
                f'stroke="black"/>'
            )
            parts.append(
                f'<text x="{margin + j * cell + cell / 2}" '
                f'y="{margin + i * cell + cell / 2 + 5}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="14">{value}</text>'
            )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def _metric_doc(ms: MetricSet) -> dict:
    return {
        "accuracy": round2(ms.accuracy),
        "macro": {
            "precision": round2(ms.macro_precision),
            "recall": round2(ms.macro_recall),
            "f1": round2(ms.macro_f1),
        },
        "weighted": {
            "precision": round2(ms.weighted_precision),
            "recall": round2(ms.weighted_recall),
            "f1": round2(ms.weighted_f1),
        },
        "per_class": {
            _class_name(c): {key: round2(v) for key, v in stats.items()}
            for c, stats in ms.per_class.items()
        },
    }


def emit_report(
    out_dir: str | Path,
    trial_true: Sequence,
    trial_predictions: Sequence[Prediction],
    subject_true: Sequence,
    subject_predictions: Sequence[Prediction],
) -> dict[str, Path]:
    """Write report.json, the two confusion CSVs and SVGs, and metrics.csv.

    Outputs are deterministic functions of the inputs (no timestamps), so
    regeneration from identical inputs is byte-identical.
    """
    if not trial_predictions or not subject_predictions:
        raise errors.DataError("cannot emit a report without predictions")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cm_data = confusion(trial_true, [p.label for p in trial_predictions])
    cm_subject = confusion(subject_true, [p.label for p in subject_predictions])
    ms_data = metrics(cm_data)
    ms_subject = metrics(cm_subject)

    paths = {
        "report": out_dir / "report.json",
        "confusion_data": out_dir / "confusion_data.csv",
        "confusion_subject": out_dir / "confusion_subject.csv",
        "metrics": out_dir / "metrics.csv",
        "confusion_data_svg": out_dir / "confusion_data.svg",
        "confusion_subject_svg": out_dir / "confusion_subject.svg",
    }

    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "per_data": {
            "classes": [_class_name(c) for c in cm_data.classes],
            "confusion": cm_data.counts.tolist(),
            "metrics": _metric_doc(ms_data),
        },
        "per_subject": {
            "classes": [_class_name(c) for c in cm_subject.classes],
            "confusion": cm_subject.counts.tolist(),
            "metrics": _metric_doc(ms_subject),
        },
    }
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

    _confusion_csv(cm_data, paths["confusion_data"])
    _confusion_csv(cm_subject, paths["confusion_subject"])
    _confusion_svg(cm_data, paths["confusion_data_svg"], "Confusion (per data)")
    _confusion_svg(cm_subject, paths["confusion_subject_svg"],
                   "Confusion (per subject)")

    with open(paths["metrics"], "w", newline="\n", encoding="utf-8") as fh:
        fh.write("scope,class,precision,recall,f1,accuracy\n")
        for scope, ms in (("data", ms_data), ("subject", ms_subject)):
            for cls, stats in ms.per_class.items():
                fh.write(
                    f"{scope},{_class_name(cls)},{round2(stats['precision'])},"
                    f"{round2(stats['recall'])},{round2(stats['f1'])},\n"
                )
            fh.write(
                f"{scope},macro,{round2(ms.macro_precision)},"
                f"{round2(ms.macro_recall)},{round2(ms.macro_f1)},"
                f"{round2(ms.accuracy)}\n"
            )
            fh.write(
                f"{scope},weighted,{round2(ms.weighted_precision)},"
                f"{round2(ms.weighted_recall)},{round2(ms.weighted_f1)},"
                f"{round2(ms.accuracy)}\n"
            )
    return paths
