"""Fuzzy neuro-symbolic execution: t-norm kernels, scorers, a continuous executor and a top-k beam executor."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from kg_store import KnowledgeGraph
from pipeline_utils import (
    BoundsError,
    DomainError,
    InvalidInputError,
    InvalidStateError,
    UnsupportedOperatorError,
    get_logger,
)
from query_ast import QueryGraph, demorgan_union, evaluate_plan, plan, to_dnf, validate

LOGICS = ("product", "godel", "lukasiewicz")
UNION_STRATEGIES = ("tconorm", "dnf", "demorgan")
DOMAIN_TOLERANCE = 1e-9
DEFAULT_EPSILON = 1e-4
DEFAULT_CACHE_ROWS = 64

logger = get_logger("fuzzy_engine")


def _unit(value: float | np.ndarray) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if np.isnan(arr).any() or (arr < -DOMAIN_TOLERANCE).any() or (arr > 1.0 + DOMAIN_TOLERANCE).any():
        raise DomainError("Fuzzy operand outside [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def _out(result: np.ndarray) -> float | np.ndarray:
    result = np.clip(result, 0.0, 1.0)
    return float(result) if result.ndim == 0 else result


def _check_logic(logic: str) -> None:
    if logic not in LOGICS:
        raise InvalidInputError(f"Unknown logic {logic!r}; expected one of {', '.join(LOGICS)}")


def tnorm(logic: str, x: float | np.ndarray, y: float | np.ndarray) -> float | np.ndarray:
    _check_logic(logic)
    a, b = _unit(x), _unit(y)
    if logic == "product":
        return _out(a * b)
    if logic == "godel":
        return _out(np.minimum(a, b))
    return _out(np.maximum(a + b - 1.0, 0.0))


def tconorm(logic: str, x: float | np.ndarray, y: float | np.ndarray) -> float | np.ndarray:
    _check_logic(logic)
    a, b = _unit(x), _unit(y)
    if logic == "product":
        return _out(a + b - a * b)
    if logic == "godel":
        return _out(np.maximum(a, b))
    return _out(np.minimum(a + b, 1.0))


def fnot(x: float | np.ndarray) -> float | np.ndarray:
    return _out(1.0 - _unit(x))


class Scorer(Protocol):
    name: str
    entity_count: int
    relation_count: int

    def row(self, relation: int, head: int) -> np.ndarray: ...


class BooleanScorer:
    """Rows are exactly the adjacency indicators of the backing graph."""

    name = "boolean"

    def __init__(self, graph: KnowledgeGraph) -> None:
        self.graph = graph
        self.entity_count = graph.entity_count
        self.relation_count = graph.relation_count

    def row(self, relation: int, head: int) -> np.ndarray:
        return self.graph.boolean_row(relation, head)


class MaterializedScorer:
    """LRU row cache in front of another scorer; insertion is serialized by a lock."""

    name = "materialized"

    def __init__(self, base: Scorer, capacity: int = DEFAULT_CACHE_ROWS) -> None:
        if capacity < 1:
            raise InvalidInputError(f"Cache capacity must be >= 1, got {capacity}")
        self.base = base
        self.capacity = capacity
        self.entity_count = base.entity_count
        self.relation_count = base.relation_count
        self.hits = 0
        self.misses = 0
        self._rows: OrderedDict[tuple[int, int], np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def row(self, relation: int, head: int) -> np.ndarray:
        key = (relation, head)
        with self._lock:
            cached = self._rows.get(key)
            if cached is not None:
                self._rows.move_to_end(key)
                self.hits += 1
                return cached
        values = np.array(self.base.row(relation, head), dtype=np.float64)
        values.flags.writeable = False
        with self._lock:
            self.misses += 1
            self._rows[key] = values
            self._rows.move_to_end(key)
            while len(self._rows) > self.capacity:
                self._rows.popitem(last=False)
        return values

    def __len__(self) -> int:
        return len(self._rows)


class TensorScorer:
    """Every (relation, head) row of another scorer materialized up front as an |R| x |E| x |E| tensor."""

    name = "tensor"

    def __init__(self, base: Scorer) -> None:
        self.entity_count = base.entity_count
        self.relation_count = base.relation_count
        self.tensor = np.stack(
            [np.stack([base.row(r, h) for h in range(base.entity_count)]) for r in range(base.relation_count)]
        ).astype(np.float64)
        self.tensor.flags.writeable = False
        logger.debug("materialized %d x %d x %d score tensor", *self.tensor.shape)

    def row(self, relation: int, head: int) -> np.ndarray:
        return self.tensor[relation, head]


@dataclass
class OperationCounter:
    """Score entries read by projections."""

    projections: int = 0
    entries: int = 0

    def record(self, rows: int, width: int) -> None:
        self.projections += 1
        self.entries += rows * width


def indicator(entity: int, entity_count: int) -> np.ndarray:
    if not 0 <= entity < entity_count:
        raise BoundsError(f"Entity id {entity} outside [0, {entity_count})")
    values = np.zeros(entity_count, dtype=np.float64)
    values[entity] = 1.0
    return values


def project(
    values: np.ndarray,
    relation: int,
    scorer: Scorer,
    logic: str = "product",
    *,
    epsilon: float = DEFAULT_EPSILON,
    counter: OperationCounter | None = None,
) -> np.ndarray:
    """out[t] = max_h T(in[h], S_r[h, t]) over heads with in[h] >= epsilon."""
    n = scorer.entity_count
    values = _unit(values)
    if values.shape != (n,):
        raise InvalidStateError(f"Fuzzy set of length {values.shape} does not match {n} entities")
    if not 0 <= relation < scorer.relation_count:
        raise BoundsError(f"Relation id {relation} outside [0, {scorer.relation_count})")
    heads = np.flatnonzero((values > 0.0) & (values >= epsilon))
    out = np.zeros(n, dtype=np.float64)
    for head in heads.tolist():
        row = scorer.row(relation, head)
        if row.shape != (n,):
            raise InvalidStateError(f"Scorer row of length {row.shape} does not match {n} entities")
        np.maximum(out, tnorm(logic, values[head], row), out=out)
    if counter is not None:
        counter.record(int(heads.shape[0]), n)
    return out


class _FuzzyOps:
    def __init__(self, scorer: Scorer, logic: str, epsilon: float, counter: OperationCounter | None) -> None:
        self.scorer = scorer
        self.logic = logic
        self.epsilon = epsilon
        self.counter = counter

    def anchor(self, entity: int) -> np.ndarray:
        return indicator(entity, self.scorer.entity_count)

    def project(self, value: np.ndarray, relation: int) -> np.ndarray:
        return project(value, relation, self.scorer, self.logic, epsilon=self.epsilon, counter=self.counter)

    def negate(self, value: np.ndarray) -> np.ndarray:
        return fnot(value)  # type: ignore[return-value]

    def intersect(self, values: list[np.ndarray]) -> np.ndarray:
        result = values[0]
        for value in values[1:]:
            result = tnorm(self.logic, result, value)  # type: ignore[assignment]
        return result

    def union(self, values: list[np.ndarray]) -> np.ndarray:
        result = values[0]
        for value in values[1:]:
            result = tconorm(self.logic, result, value)  # type: ignore[assignment]
        return result


def execute(
    query: QueryGraph,
    scorer: Scorer,
    logic: str = "product",
    *,
    union: str = "tconorm",
    epsilon: float = DEFAULT_EPSILON,
    counter: OperationCounter | None = None,
) -> np.ndarray:
    """Target fuzzy set of a path/tree query; `union` picks t-conorm, DNF-then-max or De Morgan unions."""
    _check_logic(logic)
    if union not in UNION_STRATEGIES:
        raise InvalidInputError(f"Unknown union strategy {union!r}; expected one of {', '.join(UNION_STRATEGIES)}")
    steps = plan(query)
    validate(query, require_grounded=True)
    ops = _FuzzyOps(scorer, logic, epsilon, counter)
    if union == "dnf" and query.unions:
        branches = [evaluate_plan(plan(branch), ops) for branch in to_dnf(query)]
        return np.maximum.reduce(branches)
    if union == "demorgan" and query.unions:
        return evaluate_plan(plan(demorgan_union(query)), ops)
    return evaluate_plan(steps, ops)


class _BeamOps(_FuzzyOps):
    """Dense vectors that stay zero outside the beam; each projection keeps its k best entities."""

    def __init__(self, scorer: Scorer, logic: str, epsilon: float, k: int) -> None:
        super().__init__(scorer, logic, epsilon, None)
        self.k = k

    def project(self, value: np.ndarray, relation: int) -> np.ndarray:
        out = super().project(value, relation)
        support = np.flatnonzero(out > 0.0)
        if support.shape[0] > self.k:
            order = np.lexsort((support, -out[support]))
            dropped = support[order[self.k :]]
            out[dropped] = 0.0
        return out

    def negate(self, value: np.ndarray) -> np.ndarray:
        raise UnsupportedOperatorError("Beam execution does not support negation")


def ranked(values: np.ndarray) -> list[tuple[int, float]]:
    """Positive entries sorted by score descending, then entity id ascending."""
    support = np.flatnonzero(values > 0.0)
    order = np.lexsort((support, -values[support]))
    return [(int(support[i]), float(values[support[i]])) for i in order]


def execute_beam(
    query: QueryGraph,
    scorer: Scorer,
    k: int,
    logic: str = "product",
    *,
    epsilon: float = DEFAULT_EPSILON,
) -> list[tuple[int, float]]:
    if k < 1:
        raise InvalidInputError(f"Beam width must be >= 1, got {k}")
    _check_logic(logic)
    if query.has_negation():
        raise UnsupportedOperatorError("Beam execution supports EPFO queries only; query contains negation")
    steps = plan(query)
    validate(query, require_grounded=True)
    return ranked(evaluate_plan(steps, _BeamOps(scorer, logic, epsilon, k)))


class ContinuousEngine:
    name = "continuous"

    def __init__(
        self,
        scorer: Scorer,
        logic: str = "product",
        *,
        union: str = "tconorm",
        epsilon: float = DEFAULT_EPSILON,
        counter: OperationCounter | None = None,
    ) -> None:
        self.scorer = scorer
        self.logic = logic
        self.union = union
        self.epsilon = epsilon
        self.counter = counter

    def scores(self, query: QueryGraph) -> np.ndarray:
        return execute(query, self.scorer, self.logic, union=self.union, epsilon=self.epsilon, counter=self.counter)


class BeamEngine:
    name = "beam"

    def __init__(self, scorer: Scorer, k: int, logic: str = "product", *, epsilon: float = DEFAULT_EPSILON) -> None:
        self.scorer = scorer
        self.k = k
        self.logic = logic
        self.epsilon = epsilon

    def candidates(self, query: QueryGraph) -> list[tuple[int, float]]:
        return execute_beam(query, self.scorer, self.k, self.logic, epsilon=self.epsilon)

    def scores(self, query: QueryGraph) -> np.ndarray:
        """Dense scores with 0 for entities outside the candidate list."""
        values = np.zeros(self.scorer.entity_count, dtype=np.float64)
        for entity, value in self.candidates(query):
            values[entity] = value
        return values
