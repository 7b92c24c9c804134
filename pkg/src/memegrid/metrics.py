"""Classification metrics and run evaluation.

Conventions: precision, recall, and F1 return 0.0 when their denominator is
zero. AUROC uses the rank formulation of the Mann-Whitney statistic with
average ranks for ties and refuses single-class inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .dataset import Record
from .parsing import DEFAULT_THRESHOLD, HateLabel

if TYPE_CHECKING:
    from .gridrun import Prediction

POLICIES = ("pessimistic", "exclude")


class DegenerateLabels(ValueError):
    """Raised when AUROC is requested for single-class ground truth."""


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predictions: Sequence[int], truths: Sequence[int]) -> Confusion:
    """Tally a confusion matrix from aligned hard labels."""
    if len(predictions) != len(truths):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths"
        )
    if not predictions:
        raise ValueError("cannot build a confusion matrix from zero pairs")
    tp = fp = tn = fn = 0
    for pred, truth in zip(predictions, truths):
        if truth not in (0, 1) or pred not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got pred={pred!r} truth={truth!r}")
        if truth == 1:
            if pred == 1:
                tp += 1
            else:
                fn += 1
        else:
            if pred == 1:
                fp += 1
            else:
                tn += 1
    return Confusion(tp=tp, fp=fp, tn=tn, fn=fn)


def accuracy(c: Confusion) -> float:
    return (c.tp + c.tn) / c.n


def precision(c: Confusion) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def recall(c: Confusion) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def f1(c: Confusion) -> float:
    p = precision(c)
    r = recall(c)
    return 2 * p * r / (p + r) if p + r else 0.0


def auroc(scores: Sequence[float], truths: Sequence[int]) -> float:
    """Area under the ROC curve via average ranks (ties share their mean rank)."""
    y = np.asarray(truths)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("scores and truths must be equal-length one-dimensional sequences")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("truths must contain only 0 and 1")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes for AUROC, got {n_pos} positive / {n_neg} negative")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    ranks = (starts + (counts + 1) / 2.0)[inverse]
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation summary for one run."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float | None
    auroc_note: str | None
    parse_failure_rate: float
    n: int
    policy: str
    threshold_used: int
    confusion: Confusion

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auroc": self.auroc,
            "auroc_note": self.auroc_note,
            "parse_failure_rate": self.parse_failure_rate,
            "n": self.n,
            "policy": self.policy,
            "threshold_used": self.threshold_used,
            "confusion": {
                "tp": self.confusion.tp,
                "fp": self.confusion.fp,
                "tn": self.confusion.tn,
                "fn": self.confusion.fn,
            },
        }


def evaluate_run(
    predictions: Sequence["Prediction"],
    truths: Sequence[Record],
    *,
    policy: str = "pessimistic",
    threshold_used: int = DEFAULT_THRESHOLD,
) -> MetricsReport:
    """Score one run's predictions against labeled records.

    ``pessimistic`` counts parse failures as not-hateful with a 0.5 ranking
    score; ``exclude`` drops them from every metric. The parse failure rate
    is always measured over all predictions. Prediction and truth id sets
    must match exactly.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")

    truth_by_id: dict[str, int] = {}
    for record in truths:
        if record.label is None:
            raise ValueError(f"record {record.id!r} has no label; evaluation needs labeled data")
        truth_by_id[record.id] = record.label

    seen: set[str] = set()
    for pred in predictions:
        if pred.record_id in seen:
            raise ValueError(f"duplicate prediction for record {pred.record_id!r}")
        seen.add(pred.record_id)
        if pred.record_id not in truth_by_id:
            raise ValueError(f"prediction for unknown record {pred.record_id!r}")
    missing = [rid for rid in truth_by_id if rid not in seen]
    if missing:
        raise ValueError(f"missing predictions for {len(missing)} record(s), e.g. {missing[0]!r}")

    total = len(predictions)
    failures = sum(1 for p in predictions if p.outcome.status != "ok")
    parse_failure_rate = failures / total

    hard: list[int] = []
    scores: list[float] = []
    ys: list[int] = []
    for pred in predictions:
        if pred.outcome.status != "ok":
            if policy == "exclude":
                continue
            hard.append(int(HateLabel.NOT_HATEFUL))
            scores.append(0.5)
        else:
            hard.append(int(pred.outcome.binary))
            scores.append(pred.outcome.score)
        ys.append(truth_by_id[pred.record_id])

    if not hard:
        raise ValueError("no evaluable predictions left after excluding parse failures")
    c = confusion(hard, ys)
    try:
        area: float | None = auroc(scores, ys)
        note = None
    except DegenerateLabels as exc:
        area = None
        note = str(exc)
    return MetricsReport(
        accuracy=accuracy(c),
        precision=precision(c),
        recall=recall(c),
        f1=f1(c),
        auroc=area,
        auroc_note=note,
        parse_failure_rate=parse_failure_rate,
        n=c.n,
        policy=policy,
        threshold_used=threshold_used,
        confusion=c,
    )


def report_from_dict(obj: Mapping) -> MetricsReport:
    """Rehydrate a MetricsReport from its to_dict() form."""
    c = obj["confusion"]
    return MetricsReport(
        accuracy=obj["accuracy"],
        precision=obj["precision"],
        recall=obj["recall"],
        f1=obj["f1"],
        auroc=obj["auroc"],
        auroc_note=obj.get("auroc_note"),
        parse_failure_rate=obj["parse_failure_rate"],
        n=obj["n"],
        policy=obj["policy"],
        threshold_used=obj["threshold_used"],
        confusion=Confusion(tp=c["tp"], fp=c["fp"], tn=c["tn"], fn=c["fn"]),
    )
