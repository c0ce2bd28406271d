"""Presentation-attack detection error rates (ISO/IEC 30107-3 vocabulary).

Rates are kept as exact fractions of counts and rounded to two decimals only when
formatted, so derived quantities (HTER, error reduction) never accumulate rounding.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .common import Label, atomic_write_text

REPORT_HEADER = ("dataset", "partition", "method", "accuracy", "apcer", "bpcer", "hter")
NA = "n/a"


def exact(value) -> Fraction:
    """Exact rational for ints, Fractions, Decimals and decimal strings; floats go through repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def hter(apcer, bpcer) -> Fraction:
    return (exact(apcer) + exact(bpcer)) / 2


def error_reduction(baseline, new) -> Fraction:
    """Relative HTER reduction in percent: 100 * (baseline - new) / baseline."""
    baseline, new = exact(baseline), exact(new)
    if baseline == 0:
        raise ValueError("error reduction is undefined for a zero baseline")
    return 100 * (baseline - new) / baseline


def fmt(value: Fraction | None, places: int = 2) -> str:
    if value is None:
        return NA
    q = Decimal(value.numerator) / Decimal(value.denominator)
    return str(q.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class EvalReport:
    """Confusion counts of one method on one partition; rates are percentages."""

    partition: str
    true_bona_fide: int
    false_attack: int
    true_attack: int
    false_bona_fide: int
    dataset: str = ""
    method: str = ""
    sample_ids: tuple[str, ...] = field(default=(), compare=False, repr=False)

    @property
    def n_bona_fide(self) -> int:
        return self.true_bona_fide + self.false_attack

    @property
    def n_attack(self) -> int:
        return self.true_attack + self.false_bona_fide

    @property
    def total(self) -> int:
        return self.n_bona_fide + self.n_attack

    @property
    def accuracy(self) -> Fraction | None:
        if not self.total:
            return None
        return Fraction(100 * (self.true_bona_fide + self.true_attack), self.total)

    @property
    def apcer(self) -> Fraction | None:
        return Fraction(100 * self.false_bona_fide, self.n_attack) if self.n_attack else None

    @property
    def bpcer(self) -> Fraction | None:
        return Fraction(100 * self.false_attack, self.n_bona_fide) if self.n_bona_fide else None

    @property
    def hter(self) -> Fraction | None:
        a, b = self.apcer, self.bpcer
        return None if a is None or b is None else (a + b) / 2

    def row(self) -> dict[str, str]:
        return {"dataset": self.dataset, "partition": self.partition, "method": self.method,
                "accuracy": fmt(self.accuracy), "apcer": fmt(self.apcer),
                "bpcer": fmt(self.bpcer), "hter": fmt(self.hter)}


def evaluate(decisions: Sequence[int], labels: Sequence[int], partition: str,
             sample_ids: Sequence[str] = (), dataset: str = "", method: str = "") -> EvalReport:
    decisions = np.asarray(decisions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if decisions.shape != labels.shape or decisions.ndim != 1:
        raise ValueError("decisions and labels must be 1-D sequences of equal length")
    if sample_ids and len(sample_ids) != len(labels):
        raise ValueError("sample_ids must match decisions in length")
    live = labels == Label.BONA_FIDE
    said_live = decisions == Label.BONA_FIDE
    return EvalReport(
        partition=partition,
        true_bona_fide=int(np.sum(live & said_live)),
        false_attack=int(np.sum(live & ~said_live)),
        true_attack=int(np.sum(~live & ~said_live)),
        false_bona_fide=int(np.sum(~live & said_live)),
        dataset=dataset, method=method, sample_ids=tuple(sample_ids))


def overall_report(known: EvalReport, unknown: EvalReport | None) -> EvalReport:
    """Report over the pooled samples of both test partitions (not averaged rates)."""
    if unknown is None or unknown.total == 0:
        return EvalReport("overall", known.true_bona_fide, known.false_attack, known.true_attack,
                          known.false_bona_fide, known.dataset, known.method, known.sample_ids)
    overlap = set(known.sample_ids) & set(unknown.sample_ids)
    if overlap:
        raise ValueError(f"sample ids present in both partitions: {sorted(overlap)[:5]}")
    return EvalReport(
        "overall",
        known.true_bona_fide + unknown.true_bona_fide,
        known.false_attack + unknown.false_attack,
        known.true_attack + unknown.true_attack,
        known.false_bona_fide + unknown.false_bona_fide,
        known.dataset or unknown.dataset, known.method or unknown.method,
        known.sample_ids + unknown.sample_ids)


# -- report files -------------------------------------------------------------------------

def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_reports(path: str | Path, reports: Iterable[EvalReport]) -> None:
    atomic_write_text(path, reports_to_csv(reports))


def read_report_rows(path: str | Path) -> list[dict[str, object]]:
    """Rows of a report CSV with rates parsed to Decimal (None for n/a)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if tuple(row) != REPORT_HEADER:
                raise ValueError(f"{path}: unexpected report header {list(row)}")
            parsed: dict[str, object] = dict(row)
            for key in ("accuracy", "apcer", "bpcer", "hter"):
                parsed[key] = None if row[key] == NA else Decimal(row[key])
            rows.append(parsed)
    return rows


PARTITION_SHORT = {"test_known": "K", "test_unknown": "U", "overall": "O"}


def format_table(rows: Sequence[dict[str, object]], methods: Sequence[str]) -> str:
    """Markdown table: one row per dataset/partition, APCER/BPCER/HTER per method."""
    index: dict[tuple[str, str], dict[str, dict[str, object]]] = {}
    for r in rows:
        index.setdefault((str(r["dataset"]), str(r["partition"])), {})[str(r["method"])] = r
    head = ["Dataset", "Set"]
    for m in methods:
        head += [f"{m} APCER", f"{m} BPCER", f"{m} HTER"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    order = {"test_known": 0, "test_unknown": 1, "overall": 2}
    for (ds, part) in sorted(index, key=lambda k: (k[0], order.get(k[1], 9), k[1])):
        cells = [ds, PARTITION_SHORT.get(part, part)]
        for m in methods:
            r = index[(ds, part)].get(m)
            for key in ("apcer", "bpcer", "hter"):
                v = None if r is None else r[key]
                cells.append(NA if v is None else f"{v:.2f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
