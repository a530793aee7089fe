"""Exact query answering over one graph layer: the ground-truth oracle for every other engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kg_store import KnowledgeGraph
from query_ast import QueryGraph, classify, evaluate_plan, plan, to_dnf, validate
from pipeline_utils import UnsupportedPatternError, ValidationError

Mapping = dict[int, int]


@dataclass(frozen=True)
class AnswerLabels:
    easy: frozenset[int]
    hard: frozenset[int]
    false_positive: frozenset[int]


class _SetOps:
    """Plan handlers over frozensets of entity ids; negation is the complement over E."""

    def __init__(self, graph: KnowledgeGraph) -> None:
        self.graph = graph

    def anchor(self, entity: int) -> frozenset[int]:
        self.graph.check_entity(entity)
        return frozenset((entity,))

    def project(self, value: frozenset[int], relation: int) -> frozenset[int]:
        if not value:
            return frozenset()
        reached = np.concatenate([self.graph.neighbors(relation, head, "fwd") for head in sorted(value)])
        return frozenset(reached.tolist())

    def negate(self, value: frozenset[int]) -> frozenset[int]:
        return frozenset(range(self.graph.entity_count)) - value

    def intersect(self, values: list[frozenset[int]]) -> frozenset[int]:
        return frozenset.intersection(*values)

    def union(self, values: list[frozenset[int]]) -> frozenset[int]:
        return frozenset().union(*values)


def execute_tree(query: QueryGraph, graph: KnowledgeGraph) -> frozenset[int]:
    steps = plan(query)
    validate(query, require_grounded=True)
    return evaluate_plan(steps, _SetOps(graph))


def _initial_candidates(query: QueryGraph, graph: KnowledgeGraph, node_id: int) -> np.ndarray:
    candidates: np.ndarray | None = None
    anchored: list[np.ndarray] = []
    loose: list[np.ndarray] = []
    for atom in query.atoms:
        if atom.negated or node_id not in (atom.head, atom.tail):
            continue
        other = query.node(atom.head if atom.tail == node_id else atom.tail)
        if other.kind == "anchor":
            direction = "bwd" if atom.tail == other.node_id else "fwd"
            anchored.append(graph.neighbors(atom.relation, other.entity, direction))  # type: ignore[arg-type]
        elif atom.tail == node_id:
            loose.append(graph.relation_tails(atom.relation))  # type: ignore[arg-type]
        else:
            loose.append(graph.relation_heads(atom.relation))  # type: ignore[arg-type]
    for values in anchored or loose:
        candidates = values if candidates is None else np.intersect1d(candidates, values, assume_unique=True)
    if candidates is None:
        return np.arange(graph.entity_count, dtype=np.int64)
    return candidates


def execute_bgq(query: QueryGraph, graph: KnowledgeGraph) -> list[Mapping]:
    """All homomorphisms of a conjunctive query into the graph, as variable -> entity mappings.

    Variables are bound in a fixed order (fewest initial candidates first, then node id); distinct
    variables may share an entity. A zero-variable query yields `[{}]` when every atom holds.
    """
    if query.unions:
        raise UnsupportedPatternError("Graph-pattern matching needs a conjunctive query; split unions with to_dnf")
    validate(query, require_target=False, require_grounded=True)

    bound: dict[int, int] = {n.node_id: n.entity for n in query.anchors()}  # type: ignore[misc]
    for atom in query.atoms:
        if atom.head in bound and atom.tail in bound:
            if graph.has_edge(bound[atom.head], atom.relation, bound[atom.tail]) == atom.negated:  # type: ignore[arg-type]
                return []

    initial = {n.node_id: _initial_candidates(query, graph, n.node_id) for n in query.variables()}
    order = sorted(initial, key=lambda node_id: (initial[node_id].shape[0], node_id))
    results: list[Mapping] = []

    def candidates_for(node_id: int) -> np.ndarray:
        values = initial[node_id]
        for atom in query.atoms:
            if atom.negated:
                continue
            if atom.tail == node_id and atom.head in bound:
                values = np.intersect1d(values, graph.neighbors(atom.relation, bound[atom.head], "fwd"), assume_unique=True)  # type: ignore[arg-type]
            elif atom.head == node_id and atom.tail in bound:
                values = np.intersect1d(values, graph.neighbors(atom.relation, bound[atom.tail], "bwd"), assume_unique=True)  # type: ignore[arg-type]
        return values

    def violates_negation(node_id: int, entity: int) -> bool:
        for atom in query.atoms:
            if not atom.negated:
                continue
            if atom.head == node_id and atom.tail in bound:
                if graph.has_edge(entity, atom.relation, bound[atom.tail]):  # type: ignore[arg-type]
                    return True
            elif atom.tail == node_id and atom.head in bound:
                if graph.has_edge(bound[atom.head], atom.relation, entity):  # type: ignore[arg-type]
                    return True
        return False

    def search(depth: int) -> None:
        if depth == len(order):
            results.append({node_id: bound[node_id] for node_id in order})
            return
        node_id = order[depth]
        for entity in candidates_for(node_id).tolist():
            if violates_negation(node_id, entity):
                continue
            bound[node_id] = entity
            search(depth + 1)
            del bound[node_id]

    search(0)
    return results


def project_target(mappings: list[Mapping], target: int) -> frozenset[int]:
    return frozenset(mapping[target] for mapping in mappings)


def answer(query: QueryGraph, graph: KnowledgeGraph) -> frozenset[int]:
    """Target answers of any grounded query: tree plans where possible, graph matching otherwise."""
    if query.target is None:
        raise ValidationError("Query has no target node to answer")
    if classify(query) in ("path", "tree"):
        return execute_tree(query, graph)
    answers: frozenset[int] = frozenset()
    for branch in to_dnf(query):
        answers |= project_target(execute_bgq(branch, graph), query.target)
    return answers


def label_answers(query: QueryGraph, g_small: KnowledgeGraph, g_big: KnowledgeGraph) -> AnswerLabels:
    small = answer(query, g_small)
    big = answer(query, g_big)
    return AnswerLabels(easy=small & big, hard=big - small, false_positive=small - big)


def cardinality(query: QueryGraph, graph: KnowledgeGraph) -> int:
    return len(execute_tree(query, graph))


class SymbolicBaseline:
    """Scores every entity by membership in the exact answer set on a fixed layer."""

    name = "symbolic"

    def __init__(self, graph: KnowledgeGraph) -> None:
        self.graph = graph

    def scores(self, query: QueryGraph) -> np.ndarray:
        values = np.zeros(self.graph.entity_count, dtype=np.float64)
        hits = answer(query, self.graph)
        if hits:
            values[sorted(hits)] = 1.0
        return values
