"""Filtered ranking metrics over hard answers, faithfulness AUC and cardinality quality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol

import numpy as np
import pandas as pd

from pipeline_utils import (
    FORMAT_VERSION,
    BoundsError,
    ContractViolationError,
    InvalidInputError,
    UndefinedMetricError,
    get_logger,
)
from query_ast import QueryGraph, QueryInstance

HITS_AT = (1, 3, 10)
METRIC_COLUMNS = ["mrr", *(f"hits@{k}" for k in HITS_AT)]

logger = get_logger("eval")


class Engine(Protocol):
    name: str

    def scores(self, query: QueryGraph) -> np.ndarray: ...


def filtered_rank(scores: np.ndarray, target: int, filter_set: Iterable[int]) -> int:
    """1 + #strictly better + floor(#tied / 2), over entities outside the filter set."""
    values = np.asarray(scores, dtype=np.float64)
    filtered = set(int(e) for e in filter_set)
    if not 0 <= target < values.shape[0]:
        raise BoundsError(f"Target {target} outside score vector of length {values.shape[0]}")
    if target in filtered:
        raise ContractViolationError(f"Target {target} is inside its own filter set")
    keep = np.ones(values.shape[0], dtype=bool)
    if filtered:
        keep[sorted(filtered)] = False
    keep[target] = False
    others = values[keep]
    pivot = values[target]
    return 1 + int(np.count_nonzero(others > pivot)) + int(np.count_nonzero(others == pivot)) // 2


@dataclass
class CardinalityReport:
    spearman: float
    pearson: float
    mape: float
    records: int
    excluded: int
    theta: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta": self.theta,
            "spearman": self.spearman,
            "pearson": self.pearson,
            "mape": self.mape,
            "records": self.records,
            "excluded_zero_count": self.excluded,
        }


@dataclass
class RankingReport:
    engine: str
    patterns: pd.DataFrame
    overall: dict[str, Any]
    ranks: pd.DataFrame
    skipped: int = 0
    faithfulness_auc: float | None = None
    cardinality: CardinalityReport | None = None
    settings: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        patterns = {
            str(pattern): {
                "queries": int(rec["queries"]),
                "hard_answers": int(rec["hard_answers"]),
                **{col: float(rec[col]) for col in METRIC_COLUMNS},
            }
            for pattern, rec in self.patterns.iterrows()
        }
        payload: dict[str, Any] = {
            "format_version": FORMAT_VERSION,
            "engine": self.engine,
            **self.settings,
            "patterns": patterns,
            "overall": self.overall,
            "skipped_records": self.skipped,
        }
        if self.faithfulness_auc is not None:
            payload["faithfulness_auc"] = self.faithfulness_auc
        if self.cardinality is not None:
            payload["cardinality"] = self.cardinality.to_dict()
        return payload

    def format_table(self) -> str:
        header = f"{'pattern':<16}{'queries':>8}{'hard':>8}{'MRR':>10}{'H@1':>10}{'H@3':>10}{'H@10':>10}"
        lines = [header, "-" * len(header)]

        def line(label: str, queries: int, hard: int, metrics: dict[str, float]) -> str:
            cells = "".join(f"{metrics[col]:>10.4f}" for col in METRIC_COLUMNS)
            return f"{label:<16}{queries:>8}{hard:>8}{cells}"

        for pattern, rec in self.patterns.iterrows():
            lines.append(line(str(pattern), int(rec["queries"]), int(rec["hard_answers"]), rec.to_dict()))
        lines.append("-" * len(header))
        for scope in ("micro", "macro"):
            lines.append(line(f"overall/{scope}", self.overall["queries"], self.overall["hard_answers"], self.overall[scope]))
        if self.faithfulness_auc is not None:
            lines.append(f"faithfulness AUC: {self.faithfulness_auc:.4f}")
        if self.cardinality is not None:
            c = self.cardinality
            lines.append(f"cardinality (theta={c.theta}): spearman {c.spearman:.4f} pearson {c.pearson:.4f} MAPE {c.mape:.2f}%")
        return "\n".join(lines)


def _empty_metrics() -> dict[str, float]:
    return {col: 0.0 for col in METRIC_COLUMNS}


def evaluate(dataset: list[QueryInstance], engine: Engine) -> RankingReport:
    """Rank every hard answer against all entities with the other answers filtered out."""
    rank_rows: list[dict[str, Any]] = []
    query_rows: list[dict[str, Any]] = []
    skipped = 0
    for instance in dataset:
        if not instance.hard:
            skipped += 1
            continue
        scores = engine.scores(instance.query)
        answers = instance.easy | instance.hard
        ranks = []
        for target in sorted(instance.hard):
            rank = filtered_rank(scores, target, answers - {target})
            ranks.append(rank)
            rank_rows.append({"qid": instance.qid, "pattern": instance.pattern, "answer": target, "rank": rank})
        arr = np.asarray(ranks, dtype=np.float64)
        query_rows.append(
            {
                "qid": instance.qid,
                "pattern": instance.pattern,
                "hard_answers": len(ranks),
                "mrr": float(np.mean(1.0 / arr)),
                **{f"hits@{k}": float(np.mean(arr <= k)) for k in HITS_AT},
            }
        )
    if skipped:
        logger.warning("Skipped %d record(s) without hard answers", skipped)

    queries = pd.DataFrame(query_rows, columns=["qid", "pattern", "hard_answers", *METRIC_COLUMNS])
    grouped = queries.groupby("pattern", sort=True).agg(
        queries=("qid", "size"),
        hard_answers=("hard_answers", "sum"),
        **{col: (col, "mean") for col in METRIC_COLUMNS},
    )
    overall = {
        "queries": int(queries.shape[0]),
        "hard_answers": int(queries["hard_answers"].sum()) if queries.shape[0] else 0,
        "micro": {col: float(queries[col].mean()) for col in METRIC_COLUMNS} if queries.shape[0] else _empty_metrics(),
        "macro": {col: float(grouped[col].mean()) for col in METRIC_COLUMNS} if grouped.shape[0] else _empty_metrics(),
    }
    ranks = pd.DataFrame(rank_rows, columns=["qid", "pattern", "answer", "rank"])
    return RankingReport(engine=engine.name, patterns=grouped, overall=overall, ranks=ranks, skipped=skipped)


def _pairwise_auc(positive: np.ndarray, negative: np.ndarray) -> float:
    diff = positive[:, None] - negative[None, :]
    return float((np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)) / diff.size)


def faithfulness_auc(dataset: list[QueryInstance], engine: Engine) -> float:
    """Macro-averaged AUC of easy answers (positives) against hard answers (negatives)."""
    aucs: list[float] = []
    for instance in dataset:
        if not instance.easy or not instance.hard:
            continue
        scores = engine.scores(instance.query)
        aucs.append(_pairwise_auc(scores[sorted(instance.easy)], scores[sorted(instance.hard)]))
    if not aucs:
        raise UndefinedMetricError("Faithfulness needs at least one record with both easy and hard answers")
    return float(np.mean(aucs))


def cardinality_metrics(dataset: list[QueryInstance], engine: Engine, theta: float = 0.5) -> CardinalityReport:
    """Predicted |{e : score >= theta}| against the oracle answer count."""
    if not 0.0 < theta < 1.0:
        raise InvalidInputError(f"theta must lie in (0, 1), got {theta}")
    rows = [
        {
            "predicted": int(np.count_nonzero(engine.scores(inst.query) >= theta)),
            "oracle": len(inst.easy | inst.hard),
        }
        for inst in dataset
    ]
    frame = pd.DataFrame(rows, columns=["predicted", "oracle"]).astype(float)
    if frame.shape[0] < 2:
        raise UndefinedMetricError("Cardinality correlation needs at least two records")
    spearman = float(frame.corr(method="spearman").loc["predicted", "oracle"])
    pearson = float(frame.corr(method="pearson").loc["predicted", "oracle"])

    included = frame[frame["oracle"] > 0]
    excluded = int(frame.shape[0] - included.shape[0])
    if excluded:
        logger.warning("Excluded %d record(s) with zero oracle count from MAPE", excluded)
    if included.shape[0]:
        mape = float(((included["predicted"] - included["oracle"]).abs() / included["oracle"]).mean() * 100.0)
    else:
        mape = float("nan")
    return CardinalityReport(
        spearman=spearman, pearson=pearson, mape=mape, records=int(frame.shape[0]), excluded=excluded, theta=theta
    )
