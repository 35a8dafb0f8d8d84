"""Episodic evaluation: confusion matrix, accuracy, per-class precision/recall,
and report rendering (pipe-separated table plus a TSV record file).

The table surfaces the precision/recall of class 0, the scenario's headline
class (scenario remapping names the positive class so it sorts first).
Undefined metrics (empty denominator) render as ``n/a``, never as 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import DataError
from .head import classify_batch, compute_prototypes

log = logging.getLogger(__name__)

REPORT_HEADER = "scenario | shots | model | accuracy | precision | recall"
RECORD_COLUMNS = (
    "way", "shots", "model", "episodes", "queries",
    "accuracy", "precision", "recall", "precision_per_class", "recall_per_class",
)


class ConfusionMatrix:
    """K x K count grid; rows are true classes, columns predictions."""

    def __init__(self, way: int):
        if way < 2:
            raise DataError(f"confusion matrix needs way >= 2, got {way}")
        self.way = way
        self.counts = np.zeros((way, way), dtype=np.int64)

    def accumulate(self, true: int, predicted: int) -> None:
        if not (0 <= true < self.way and 0 <= predicted < self.way):
            raise DataError(
                f"confusion matrix ids out of range [0,{self.way}): true={true} predicted={predicted}"
            )
        self.counts[true, predicted] += 1

    def accumulate_batch(self, true, predicted) -> None:
        for t, p in zip(np.asarray(true).ravel(), np.asarray(predicted).ravel()):
            self.accumulate(int(t), int(p))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def metrics_from_cm(cm: ConfusionMatrix):
    """(accuracy, precision per class, recall per class); None means undefined."""
    total = cm.total
    if total == 0:
        raise DataError("metrics_from_cm: empty confusion matrix")
    accuracy = float(np.trace(cm.counts)) / total
    precision: list[float | None] = []
    recall: list[float | None] = []
    for k in range(cm.way):
        col = int(cm.counts[:, k].sum())
        row = int(cm.counts[k, :].sum())
        diag = int(cm.counts[k, k])
        precision.append(diag / col if col else None)
        recall.append(diag / row if row else None)
    return accuracy, precision, recall


@dataclass
class EvalReport:
    way: int
    shot: int
    encoder: str
    episodes: int
    accuracy: float
    precision: list  # per class, None when undefined
    recall: list
    queries: int = 0
    confusion: np.ndarray | None = None


@dataclass
class QueryOutcome:
    """One evaluated query, kept for explainability selection."""

    episode: int
    true: int
    predicted: int
    prob_true: float
    probabilities: np.ndarray
    sample: np.ndarray | None = None


def evaluate(model, sampler, n_episodes: int, collect_outcomes: bool = False):
    """Run episodic evaluation, pooling all queries into one confusion matrix.

    Support sets drawn from the sampler build the prototypes; queries are
    classified against them. No parameter updates occur. Returns an
    EvalReport, plus the query outcomes when ``collect_outcomes`` is set.
    """
    if n_episodes < 1:
        raise DataError(f"evaluate: n_episodes must be >= 1, got {n_episodes}")
    cm = ConfusionMatrix(sampler.way)
    outcomes: list[QueryOutcome] = []
    for e in range(n_episodes):
        episode = sampler.sample()
        support = model.embed(episode.support_x)
        protos = compute_prototypes(support, episode.support_y, episode.way)
        queries = model.embed(episode.query_x)
        scores = classify_batch(queries, protos, model.distance)
        cm.accumulate_batch(episode.query_y, scores.predicted)
        if collect_outcomes:
            for i, true in enumerate(episode.query_y):
                outcomes.append(
                    QueryOutcome(
                        episode=e,
                        true=int(true),
                        predicted=int(scores.predicted[i]),
                        prob_true=float(scores.probabilities[i, true]),
                        probabilities=scores.probabilities[i].copy(),
                        sample=episode.query_x[i],
                    )
                )
    accuracy, precision, recall = metrics_from_cm(cm)
    report = EvalReport(
        way=sampler.way,
        shot=sampler.shot,
        encoder=model.name,
        episodes=n_episodes,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        queries=cm.total,
        confusion=cm.counts.copy(),
    )
    if collect_outcomes:
        return report, outcomes
    return report


def _round4(value) -> str:
    if value is None:
        return "n/a"
    return str(Decimal(repr(float(value))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP))


def format_report(reports: list[EvalReport]) -> str:
    """Render the summary table, one row per scenario, 4 decimal places."""
    lines = [REPORT_HEADER]
    for r in reports:
        lines.append(
            f"{r.way}-way | {r.shot} | {r.encoder} | "
            f"{_round4(r.accuracy)} | {_round4(r.precision[0])} | {_round4(r.recall[0])}"
        )
    return "\n".join(lines) + "\n"


def _joined(values) -> str:
    return ";".join(_round4(v) for v in values)


def write_report_records(path, reports: list[EvalReport]) -> None:
    """Machine-readable TSV, one record per scenario."""
    lines = ["\t".join(RECORD_COLUMNS)]
    for r in reports:
        lines.append(
            "\t".join(
                [
                    str(r.way), str(r.shot), r.encoder, str(r.episodes), str(r.queries),
                    _round4(r.accuracy), _round4(r.precision[0]), _round4(r.recall[0]),
                    _joined(r.precision), _joined(r.recall),
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
