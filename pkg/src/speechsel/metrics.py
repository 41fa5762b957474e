"""Classification metrics and the unimodal-vs-multimodal discrepancy report.

Conventions: rows of the confusion matrix are gold labels, columns are
predictions. A class with no gold and no predicted examples contributes an
F1 of exactly 0 to the macro average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import LabelOutOfRange, LengthMismatch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows gold / cols predicted
    class_names: Optional[List[str]] = None

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def to_lists(self) -> List[List[int]]:
        return self.counts.tolist()


def confusion_matrix(
    gold: Sequence[int],
    pred: Sequence[int],
    n_classes: int,
    class_names: Optional[List[str]] = None,
) -> ConfusionMatrix:
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise LengthMismatch(f"gold has {gold.shape[0]} labels, pred has {pred.shape[0]}")
    for name, arr in (("gold", gold), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(
                f"{name} labels must lie in [0, {n_classes}), got "
                f"[{arr.min()}, {arr.max()}]"
            )
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (gold, pred), 1)
    return ConfusionMatrix(counts, class_names)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """F1 per class; 0 when a class has no true positives and no support."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    out = np.zeros(cm.n_classes, dtype=np.float64)
    nz = denom > 0
    out[nz] = 2.0 * tp[nz] / denom[nz]
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1 over all classes, absent ones included."""
    return float(per_class_f1(cm).mean())


def positive_f1(cm: ConfusionMatrix, positive: int = 1) -> float:
    """F1 of one designated class (binary detection convention)."""
    if not 0 <= positive < cm.n_classes:
        raise LabelOutOfRange(f"positive class {positive} outside [0, {cm.n_classes})")
    return float(per_class_f1(cm)[positive])


def metrics_summary(
    gold: Sequence[int],
    pred: Sequence[int],
    n_classes: int,
    class_names: Optional[List[str]] = None,
    positive: int = 1,
) -> Dict:
    """Bundle of everything the eval stage persists for one prediction set."""
    cm = confusion_matrix(gold, pred, n_classes, class_names)
    f1s = per_class_f1(cm)
    return {
        "n_classes": n_classes,
        "class_names": class_names,
        "n_samples": int(len(gold)),
        "confusion": cm.to_lists(),
        "per_class_f1": [float(x) for x in f1s],
        "macro_f1": float(f1s.mean()),
        "positive_f1": float(f1s[positive]) if n_classes > positive else None,
    }


# --- discrepancy report -------------------------------------------------------

@dataclass
class DiscrepancyReport:
    """Where two prediction sets (for example text-only vs multimodal)
    disagree, plus per-token class association over the gold labels."""

    disagreements: List[Dict] = field(default_factory=list)
    flip_counts: Dict[str, int] = field(default_factory=dict)
    token_stats: Dict[int, Dict] = field(default_factory=dict)
    n_classes: int = 0

    def to_json(self) -> str:
        payload = {
            "n_classes": self.n_classes,
            "disagreements": self.disagreements,
            "flip_counts": self.flip_counts,
            "token_stats": {str(k): v for k, v in sorted(self.token_stats.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        lines = ["# Prediction discrepancy report", ""]
        lines.append(f"Disagreements: {len(self.disagreements)}")
        lines.append("")
        lines.append("## Flips (a -> b: count)")
        lines.append("")
        for key in sorted(self.flip_counts):
            lines.append(f"- {key}: {self.flip_counts[key]}")
        lines.append("")
        lines.append("## Token class association")
        lines.append("")
        header = "| token | total | " + " | ".join(
            f"class {c}" for c in range(self.n_classes)
        ) + " | top lift |"
        lines.append(header)
        lines.append("|" + "---|" * (self.n_classes + 3))
        ranked = sorted(
            self.token_stats.items(),
            key=lambda kv: -max(kv[1]["lift"]),
        )
        for tok, stats in ranked:
            row = (
                f"| {tok} | {stats['total']} | "
                + " | ".join(str(c) for c in stats["per_class"])
                + f" | {max(stats['lift']):.3f} |"
            )
            lines.append(row)
        lines.append("")
        return "\n".join(lines)


def discrepancy_report(
    gold: Sequence[int],
    preds_a: Sequence[int],
    preds_b: Sequence[int],
    token_occurrences: Sequence[Sequence[int]],
    n_classes: int,
) -> DiscrepancyReport:
    """Compare two prediction sets sample by sample.

    ``token_occurrences[i]`` lists the selected audio tokens present in
    sample ``i``; per-token class counts are taken over gold labels so the
    counts across classes sum to the token's corpus frequency exactly.
    """
    gold = list(gold)
    preds_a = list(preds_a)
    preds_b = list(preds_b)
    if not (len(gold) == len(preds_a) == len(preds_b) == len(token_occurrences)):
        raise LengthMismatch(
            f"gold/preds_a/preds_b/tokens lengths differ: "
            f"{len(gold)}/{len(preds_a)}/{len(preds_b)}/{len(token_occurrences)}"
        )
    report = DiscrepancyReport(n_classes=n_classes)
    class_totals = np.zeros(n_classes, dtype=np.int64)
    for g in gold:
        if not 0 <= g < n_classes:
            raise LabelOutOfRange(f"gold label {g} outside [0, {n_classes})")
        class_totals[g] += 1
    per_token: Dict[int, np.ndarray] = {}
    for i, (g, a, b) in enumerate(zip(gold, preds_a, preds_b)):
        if a != b:
            report.disagreements.append({"index": i, "gold": g, "a": a, "b": b})
            key = f"{a}->{b}"
            report.flip_counts[key] = report.flip_counts.get(key, 0) + 1
        for tok in token_occurrences[i]:
            if tok not in per_token:
                per_token[tok] = np.zeros(n_classes, dtype=np.int64)
            per_token[tok][g] += 1
    n = max(1, len(gold))
    prior = class_totals / n
    for tok, counts in per_token.items():
        total = int(counts.sum())
        freq = counts / total
        lift = [
            float(freq[c] / prior[c]) if prior[c] > 0 else 0.0
            for c in range(n_classes)
        ]
        report.token_stats[int(tok)] = {
            "per_class": [int(c) for c in counts],
            "total": total,
            "lift": lift,
        }
    return report
