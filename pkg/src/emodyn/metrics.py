"""Weighted accuracy / F1 with per-class breakdown and confusion exports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .tensor import ContractError


@dataclass
class ClassReport:
    label: str
    support: int
    prevalence: float
    accuracy: float | None  # recall; None when the class has no gold support
    precision: float | None  # None when the class has neither support nor predictions
    f1: float | None


@dataclass
class EvalReport:
    per_class: list[ClassReport]
    weighted_acc: float
    weighted_f1: float
    confusion: list[list[int]]  # rows gold, cols predicted

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.per_class]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([ClassReport(**c) for c in d["per_class"]], d["weighted_acc"], d["weighted_f1"], d["confusion"])


def evaluate(gold: Sequence[int], pred: Sequence[int], labels: Sequence[str] | None = None) -> EvalReport:
    """Per-class scores weighted by gold prevalence.

    Classes in ``labels`` that never occur in ``gold`` get prevalence 0 and
    null accuracy/F1; they do not enter the weighted sums.
    """
    if len(gold) != len(pred):
        raise ContractError(f"gold has {len(gold)} items, pred has {len(pred)}")
    if not gold:
        raise ContractError("cannot evaluate an empty prediction set")
    g = np.asarray(gold, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    n_class = len(labels) if labels is not None else int(max(g.max(), p.max())) + 1
    if g.min() < 0 or p.min() < 0 or g.max() >= n_class or p.max() >= n_class:
        raise ContractError(f"class index outside [0, {n_class})")
    if labels is None:
        labels = [str(c) for c in range(n_class)]
    conf = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(conf, (g, p), 1)
    total = len(g)
    per_class = []
    wacc = wf1 = 0.0
    for c in range(n_class):
        support = int(conf[c].sum())
        n_pred = int(conf[:, c].sum())
        tp = int(conf[c, c])
        prec = tp / n_pred if n_pred else (0.0 if support else None)
        if support == 0:
            per_class.append(ClassReport(labels[c], 0, 0.0, None, prec, None))
            continue
        rec = tp / support
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        prev = support / total
        wacc += prev * rec
        wf1 += prev * f1
        per_class.append(ClassReport(labels[c], support, prev, rec, prec, f1))
    return EvalReport(per_class, wacc, wf1, conf.tolist())


def row_normalized(report: EvalReport) -> np.ndarray:
    conf = np.asarray(report.confusion, dtype=np.float64)
    sums = conf.sum(axis=1, keepdims=True)
    return np.divide(conf, sums, out=np.zeros_like(conf), where=sums > 0)


def _svg(labels: Sequence[str], mat: np.ndarray) -> str:
    cell, margin = 40, 110
    n = len(labels)
    size = margin + cell * n + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">',
        f'<text x="{margin + cell * n / 2:.0f}" y="14" text-anchor="middle">predicted</text>',
        f'<text x="12" y="{margin + cell * n / 2:.0f}" text-anchor="middle" transform="rotate(-90 12 {margin + cell * n / 2:.0f})">gold</text>',
    ]
    for j, lab in enumerate(labels):
        x = margin + cell * j + cell / 2
        out.append(f'<text x="{x:.0f}" y="{margin - 6}" text-anchor="end" transform="rotate(-45 {x:.0f} {margin - 6})">{escape(lab)}</text>')
    for i, lab in enumerate(labels):
        y = margin + cell * i
        out.append(f'<text x="{margin - 6}" y="{y + cell / 2 + 4:.0f}" text-anchor="end">{escape(lab)}</text>')
        for j in range(n):
            v = float(mat[i, j])
            shade = int(round(255 * (1.0 - v)))
            ink = "#fff" if v > 0.5 else "#000"
            x = margin + cell * j
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})" stroke="#888"/>')
            out.append(f'<text x="{x + cell / 2:.0f}" y="{y + cell / 2 + 4:.0f}" text-anchor="middle" fill="{ink}">{v:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def confusion_heat_export(report: EvalReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (row-normalised) and ``<path>.svg``; returns both paths."""
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    mat = row_normalized(report)
    labels = report.labels
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gold\\pred", *labels])
            for lab, row in zip(labels, mat):
                w.writerow([lab, *(repr(float(v)) for v in row)])
        svg_path.write_text(_svg(labels, mat), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write confusion export at {base}: {exc.strerror}") from exc
    return csv_path, svg_path
