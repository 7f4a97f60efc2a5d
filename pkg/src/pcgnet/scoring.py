"""Quality-weighted challenge sensitivity, specificity and overall score.

True classes are ``A`` (abnormal) and ``N`` (normal); predictions are
``a``, ``n`` or ``q`` (unsure); subscript 1 marks good signal quality and
2 poor. An unsure answer counts as correct on poor-quality recordings and
as wrong on good-quality ones::

    Se = wa1 * Aa1 / (Aa1 + Aq1 + An1) + wa2 * (Aa2 + Aq2) / (Aa2 + Aq2 + An2)
    Sp = wn1 * Nn1 / (Na1 + Nq1 + Nn1) + wn2 * (Nn2 + Nq2) / (Na2 + Nq2 + Nn2)
    overall = (Se + Sp) / 2
"""

from __future__ import annotations

import csv
import dataclasses
from decimal import ROUND_DOWN, Decimal
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ScoreError, TallyError
from .pcg_io import DatasetManifest, Label, Quality

CELLS = ("Aa1", "Aq1", "An1", "Aa2", "Aq2", "An2", "Na1", "Nq1", "Nn1", "Na2", "Nq2", "Nn2")


@dataclasses.dataclass
class ChallengeCounts:
    Aa1: int = 0
    Aq1: int = 0
    An1: int = 0
    Aa2: int = 0
    Aq2: int = 0
    An2: int = 0
    Na1: int = 0
    Nq1: int = 0
    Nn1: int = 0
    Na2: int = 0
    Nq2: int = 0
    Nn2: int = 0

    def __post_init__(self):
        for c in CELLS:
            if getattr(self, c) < 0:
                raise ValueError(f"count {c} is negative")

    @property
    def abnormal_total(self) -> int:
        return sum(getattr(self, c) for c in CELLS if c[0] == "A")

    @property
    def normal_total(self) -> int:
        return sum(getattr(self, c) for c in CELLS if c[0] == "N")


@dataclasses.dataclass
class QualityWeights:
    wa1: float
    wa2: float
    wn1: float
    wn2: float


@dataclasses.dataclass
class ScoreReport:
    se: float
    sp: float

    @property
    def overall(self) -> float:
        return (self.se + self.sp) / 2


def _normalize_prediction(p) -> str:
    if isinstance(p, Label):
        p = {Label.NORMAL: "n", Label.ABNORMAL: "a"}.get(p, "q")
    p = str(p).strip().lower()
    if p not in ("a", "n", "q"):
        raise TallyError(f"prediction must be a, n or q, got {p!r}")
    return p


def tally(predictions: Iterable[tuple]) -> tuple[ChallengeCounts, QualityWeights]:
    """Count ``(true label, quality, predicted)`` triples into the twelve cells.

    Weights are the good/poor quality shares among the truly abnormal and
    truly normal recordings (zero for a class with no recordings).
    """
    counts = ChallengeCounts()
    for truth, quality, predicted in predictions:
        truth = Label(truth)
        quality = Quality(quality)
        if truth is Label.UNKNOWN:
            raise TallyError("scoring needs a known true label")
        if quality is Quality.UNKNOWN:
            raise TallyError("scoring needs a known signal quality")
        cell = ("A" if truth is Label.ABNORMAL else "N") + _normalize_prediction(predicted) + \
            ("1" if quality is Quality.GOOD else "2")
        setattr(counts, cell, getattr(counts, cell) + 1)

    def share(cls):
        good = sum(getattr(counts, c) for c in CELLS if c[0] == cls and c[2] == "1")
        total = counts.abnormal_total if cls == "A" else counts.normal_total
        return (good / total, 1.0 - good / total) if total else (0.0, 0.0)

    wa1, wa2 = share("A")
    wn1, wn2 = share("N")
    return counts, QualityWeights(wa1, wa2, wn1, wn2)


def _term(weight, numerator, denominator, name):
    if denominator == 0:
        if weight != 0:
            raise ScoreError(f"{name}: no recordings in this cell group but weight {weight}")
        return 0.0
    return weight * numerator / denominator


def challenge_score(counts: ChallengeCounts, weights: QualityWeights) -> ScoreReport:
    c = counts
    se = _term(weights.wa1, c.Aa1, c.Aa1 + c.Aq1 + c.An1, "abnormal/good") + \
        _term(weights.wa2, c.Aa2 + c.Aq2, c.Aa2 + c.Aq2 + c.An2, "abnormal/poor")
    sp = _term(weights.wn1, c.Nn1, c.Na1 + c.Nq1 + c.Nn1, "normal/good") + \
        _term(weights.wn2, c.Nn2 + c.Nq2, c.Na2 + c.Nq2 + c.Nn2, "normal/poor")
    return ScoreReport(se=se, sp=sp)


def truncate4(x: float) -> str:
    """Four decimals, truncated toward zero.

    The value is first rounded to 10 decimals so binary noise such as
    0.70569999999 is not truncated to 0.7056.
    """
    d = Decimal(repr(round(float(x), 10))).quantize(Decimal("0.0001"), rounding=ROUND_DOWN)
    return f"{d:.4f}"


def format_report(report: ScoreReport) -> str:
    return f"Se {truncate4(report.se)} Sp {truncate4(report.sp)} Overall {truncate4(report.overall)}"


# predictions file

def write_predictions(path: str | Path, predictions: Mapping[str, str] | Iterable[tuple[str, str]]) -> None:
    items = predictions.items() if isinstance(predictions, Mapping) else predictions
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "predicted"])
        for rid, p in items:
            w.writerow([rid, _normalize_prediction(p)])


def read_predictions(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise TallyError(f"predictions file not found: {path}")
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != ["record_id", "predicted"]:
            raise TallyError("predictions header must be record_id,predicted")
        for row in reader:
            if row["record_id"] in out:
                raise TallyError(f"duplicate prediction for {row['record_id']!r}")
            out[row["record_id"]] = _normalize_prediction(row["predicted"])
    return out


def score_predictions(predictions: Mapping[str, str], manifest: DatasetManifest):
    """Join predictions with manifest truth; returns ``(counts, weights, report)``."""
    entries = manifest.by_id()
    missing = [rid for rid in entries if rid not in predictions]
    if missing:
        raise TallyError(f"no prediction for {len(missing)} manifest record(s), e.g. {missing[0]!r}")
    unknown = [rid for rid in predictions if rid not in entries]
    if unknown:
        raise TallyError(f"prediction for record {unknown[0]!r} absent from manifest")
    items = [(e.label, e.quality, predictions[e.record_id]) for e in manifest]
    counts, weights = tally(items)
    return counts, weights, challenge_score(counts, weights)
