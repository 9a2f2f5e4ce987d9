"""Accuracy reporting: LLT/PT levels, certainty brackets, class-frequency
bins, and deployment-style coverage back-testing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from xtars.ensemble import BracketPartition

#: Exact class-frequency bins reported individually; everything between listed
#: values lands in "other" so cell counts always total N.
FREQUENCY_BINS = (0, 1, 2, 3, 5, 10)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    record_id: str
    llt_code: str
    confidence: float
    entropy: float
    model_tag: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.confidence) and np.isfinite(self.entropy)):
            raise EvalError(f"prediction {self.record_id!r} has non-finite confidence/entropy")


@dataclass
class Cell:
    """One report cell; accuracy is None when the cell is empty."""

    count: int
    llt_accuracy: Optional[float]
    pt_accuracy: Optional[float]

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "llt_accuracy": self.llt_accuracy,
            "pt_accuracy": self.pt_accuracy,
        }


def _cell(predictions, gold, ontology) -> Cell:
    n = len(predictions)
    if n == 0:
        return Cell(count=0, llt_accuracy=None, pt_accuracy=None)
    llt_hits = 0
    pt_hits = 0
    for pred in predictions:
        if pred.record_id not in gold:
            raise EvalError(f"prediction for unknown record id {pred.record_id!r}")
        gold_code = gold[pred.record_id]
        if pred.llt_code == gold_code:
            llt_hits += 1
            pt_hits += 1
        elif ontology.pt_of(pred.llt_code)[0] == ontology.pt_of(gold_code)[0]:
            pt_hits += 1
    return Cell(count=n, llt_accuracy=llt_hits / n, pt_accuracy=pt_hits / n)


def accuracy(predictions, gold: dict[str, str], ontology) -> tuple[float, float]:
    """(LLT accuracy, PT accuracy) over all predictions."""
    cell = _cell(list(predictions), gold, ontology)
    if cell.count == 0:
        raise EvalError("no predictions to score")
    return cell.llt_accuracy, cell.pt_accuracy


def bracket_report(predictions, gold, partition: BracketPartition, ontology) -> dict[str, Cell]:
    """Accuracy restricted to each certainty bracket."""
    predictions = list(predictions)
    covered = partition.brackets["all"]
    missing = [p.record_id for p in predictions if p.record_id not in covered]
    if missing:
        raise EvalError(f"partition does not cover prediction ids: {missing[:5]}")
    report = {}
    for name, members in partition.brackets.items():
        subset = [p for p in predictions if p.record_id in members]
        report[name] = _cell(subset, gold, ontology)
    return report


def frequency_report(predictions, gold, freq: dict[str, int], ontology) -> dict[str, Cell]:
    """Accuracy binned by the gold class's raw training-sample count k."""
    bins: dict[str, list] = {f"k={b}": [] for b in FREQUENCY_BINS}
    bins["k>=100"] = []
    bins["other"] = []
    for pred in predictions:
        if pred.record_id not in gold:
            raise EvalError(f"prediction for unknown record id {pred.record_id!r}")
        k = freq.get(gold[pred.record_id], 0)
        if k in FREQUENCY_BINS:
            bins[f"k={k}"].append(pred)
        elif k >= 100:
            bins["k>=100"].append(pred)
        else:
            bins["other"].append(pred)
    return {name: _cell(preds, gold, ontology) for name, preds in bins.items()}


def backtest(predictions, gold, threshold: float, ontology) -> tuple[float, Optional[float]]:
    """(coverage, LLT accuracy over covered predictions).

    Coverage is the fraction of predictions whose confidence clears the
    threshold; accuracy is None when nothing is covered.
    """
    predictions = list(predictions)
    if not predictions:
        raise EvalError("no predictions to back-test")
    covered = [p for p in predictions if p.confidence >= threshold]
    coverage = len(covered) / len(predictions)
    cell = _cell(covered, gold, ontology)
    return coverage, cell.llt_accuracy


def candidate_recall_at_n(scorer, records, n: int) -> float:
    """Fraction of records whose gold label is among the scorer's top-n.

    This is an exact upper bound on candidate-limited matcher accuracy.
    """
    from xtars.classifier import top_n as _top_n

    records = list(records)
    if not records:
        raise EvalError("no records")
    probs = scorer.predict_proba([r.rt for r in records])
    hits = 0
    for rec, row in zip(records, probs):
        cands = {code for code, _ in _top_n(row, scorer.label_index_, n)}
        hits += rec.llt_code in cands
    return hits / len(records)


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    model_tag: str
    brackets: dict[str, Cell] = field(default_factory=dict)
    frequency: dict[str, Cell] = field(default_factory=dict)
    backtest: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "brackets": {k: v.to_json() for k, v in self.brackets.items()},
            "frequency": {k: v.to_json() for k, v in self.frequency.items()},
            "backtest": self.backtest,
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def render_text(self) -> str:
        lines = [f"model: {self.model_tag}", ""]
        if self.brackets:
            lines += _render_cells("accuracy by certainty bracket", self.brackets)
        if self.frequency:
            lines += _render_cells("accuracy by class frequency", self.frequency)
        if self.backtest:
            lines.append("back-testing")
            cov = self.backtest.get("coverage")
            acc = self.backtest.get("llt_accuracy_on_covered")
            thr = self.backtest.get("threshold")
            acc_s = "-" if acc is None else f"{100 * acc:.1f}"
            lines.append(
                f"  threshold {thr}: coverage {100 * cov:.1f}% | LLT accuracy {acc_s}%"
            )
            lines.append("")
        return "\n".join(lines)


def _render_cells(title: str, cells: dict[str, Cell]) -> list[str]:
    headers = list(cells)
    width = max(8, max(len(h) for h in headers) + 2)

    def row(label, values):
        return label.ljust(14) + "".join(v.rjust(width) for v in values)

    def fmt(x):
        return "-" if x is None else f"{100 * x:.1f}"

    lines = [title]
    lines.append(row("", headers))
    lines.append(row("count", [str(cells[h].count) for h in headers]))
    lines.append(row("LLT acc [%]", [fmt(cells[h].llt_accuracy) for h in headers]))
    lines.append(row("PT acc [%]", [fmt(cells[h].pt_accuracy) for h in headers]))
    lines.append("")
    return lines


def build_report(predictions, gold, ontology, partition=None, freq=None,
                 threshold=None, model_tag="") -> EvalReport:
    report = EvalReport(model_tag=model_tag)
    if partition is not None:
        report.brackets = bracket_report(predictions, gold, partition, ontology)
    else:
        report.brackets = {"all": _cell(list(predictions), gold, ontology)}
    if freq is not None:
        report.frequency = frequency_report(predictions, gold, freq, ontology)
    if threshold is not None:
        coverage, acc = backtest(predictions, gold, threshold, ontology)
        report.backtest = {
            "threshold": threshold,
            "coverage": coverage,
            "llt_accuracy_on_covered": acc,
        }
    return report
