"""Query computation graphs: the 14 benchmark patterns, structure classes, plans, rewrites, JSONL codec.

A query is a set of relation atoms between anchor, variable and target nodes. Atoms that are not
part of a union group are conjunctive; a union group lists alternative branches (each a list of
atom indices) that meet at one merge node. Plans are post-order stack programs consumed by every
executor through `evaluate_plan`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Protocol, Sequence, TypeVar

import networkx as nx

from kg_store import Dictionary
from pipeline_utils import ParseError, UnsupportedPatternError, ValidationError, read_jsonl_lines

PATTERNS = ("1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up", "2in", "3in", "inp", "pni", "pin")
TRAINING_PATTERNS = ("1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pni", "pin")
NEGATION_PATTERNS = ("2in", "3in", "inp", "pni", "pin")
UNION_PATTERNS = ("2u", "up")

NODE_KINDS = ("anchor", "var", "target")
UNION_MODES = ("or", "demorgan")

NodeKind = Literal["anchor", "var", "target"]
PatternClass = Literal["path", "tree", "dag", "cyclic"]
PlanOp = Literal["anchor", "project", "negate", "intersect", "union"]

# pattern -> (node kinds, atoms as (head, tail, negated), union groups as branch atom-index lists)
_TEMPLATES: dict[str, tuple[str, list[tuple[int, int, bool]], list[list[list[int]]]]] = {
    "1p": ("AT", [(0, 1, False)], []),
    "2p": ("AVT", [(0, 1, False), (1, 2, False)], []),
    "3p": ("AVVT", [(0, 1, False), (1, 2, False), (2, 3, False)], []),
    "2i": ("AAT", [(0, 2, False), (1, 2, False)], []),
    "3i": ("AAAT", [(0, 3, False), (1, 3, False), (2, 3, False)], []),
    "ip": ("AAVT", [(0, 2, False), (1, 2, False), (2, 3, False)], []),
    "pi": ("AVAT", [(0, 1, False), (1, 3, False), (2, 3, False)], []),
    "2u": ("AAT", [(0, 2, False), (1, 2, False)], [[[0], [1]]]),
    "up": ("AAVT", [(0, 2, False), (1, 2, False), (2, 3, False)], [[[0], [1]]]),
    "2in": ("AAT", [(0, 2, False), (1, 2, True)], []),
    "3in": ("AAAT", [(0, 3, False), (1, 3, False), (2, 3, True)], []),
    "inp": ("AAVT", [(0, 2, False), (1, 2, True), (2, 3, False)], []),
    "pni": ("AVAT", [(0, 1, False), (1, 3, True), (2, 3, False)], []),
    "pin": ("AVAT", [(0, 1, False), (1, 3, False), (2, 3, True)], []),
}
_KIND_CODES = {"A": "anchor", "V": "var", "T": "target"}


@dataclass(frozen=True)
class QueryNode:
    node_id: int
    kind: NodeKind
    entity: int | None = None


@dataclass(frozen=True)
class QueryAtom:
    head: int
    relation: int | None
    tail: int
    negated: bool = False


@dataclass(frozen=True)
class UnionGroup:
    branches: tuple[tuple[int, ...], ...]
    mode: str = "or"


@dataclass(frozen=True)
class QueryGraph:
    nodes: tuple[QueryNode, ...]
    atoms: tuple[QueryAtom, ...]
    target: int | None
    unions: tuple[UnionGroup, ...] = ()
    pattern: str | None = None
    _by_id: dict[int, QueryNode] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {node.node_id: node for node in self.nodes})

    def node(self, node_id: int) -> QueryNode:
        try:
            return self._by_id[node_id]
        except KeyError as exc:
            raise ValidationError(f"Dangling node reference: {node_id}") from exc

    def anchors(self) -> tuple[QueryNode, ...]:
        return tuple(n for n in self.nodes if n.kind == "anchor")

    def variables(self) -> tuple[QueryNode, ...]:
        return tuple(n for n in self.nodes if n.kind != "anchor")

    def incoming(self, node_id: int) -> list[int]:
        return [idx for idx, atom in enumerate(self.atoms) if atom.tail == node_id]

    def has_negation(self) -> bool:
        return any(atom.negated for atom in self.atoms) or any(g.mode == "demorgan" for g in self.unions)

    def is_grounded(self) -> bool:
        return all(n.entity is not None for n in self.anchors()) and all(a.relation is not None for a in self.atoms)


@dataclass(frozen=True)
class QueryInstance:
    """A grounded query with its oracle answer labels."""

    qid: str
    pattern: str
    query: QueryGraph
    easy: frozenset[int] = frozenset()
    hard: frozenset[int] = frozenset()
    false_positive: frozenset[int] = frozenset()
    answers: frozenset[int] | None = None


@dataclass(frozen=True)
class PlanStep:
    op: PlanOp
    node: int
    atom: int | None = None
    relation: int | None = None
    entity: int | None = None
    arity: int = 0


def template(name: str) -> QueryGraph:
    """Ungrounded skeleton of a standard pattern: anchors and relations are None."""
    if name not in _TEMPLATES:
        raise UnsupportedPatternError(f"Unknown query pattern: {name!r}")
    kinds, atoms, unions = _TEMPLATES[name]
    nodes = tuple(QueryNode(idx, _KIND_CODES[code]) for idx, code in enumerate(kinds))  # type: ignore[arg-type]
    return QueryGraph(
        nodes=nodes,
        atoms=tuple(QueryAtom(head, None, tail, negated) for head, tail, negated in atoms),
        target=len(kinds) - 1,
        unions=tuple(UnionGroup(tuple(tuple(b) for b in group)) for group in unions),
        pattern=name,
    )


def _atom_group_index(query: QueryGraph) -> dict[int, tuple[int, int]]:
    index: dict[int, tuple[int, int]] = {}
    for g_idx, group in enumerate(query.unions):
        for b_idx, branch in enumerate(group.branches):
            for atom_idx in branch:
                if atom_idx in index:
                    raise ValidationError(f"Atom {atom_idx} appears in more than one union branch")
                index[atom_idx] = (g_idx, b_idx)
    return index


def union_merge_node(query: QueryGraph, group: UnionGroup) -> int:
    """Node where the branches of a union group meet."""
    sinks: set[int] = set()
    for branch in group.branches:
        heads = {query.atoms[i].head for i in branch}
        branch_sinks = {query.atoms[i].tail for i in branch if query.atoms[i].tail not in heads}
        if not branch_sinks:
            raise ValidationError("Union branch has no sink node")
        sinks |= branch_sinks
    if len(sinks) != 1:
        raise ValidationError(f"Union branches must meet at one node, found {sorted(sinks)}")
    return sinks.pop()


def validate(query: QueryGraph, *, require_target: bool = True, require_grounded: bool = False) -> None:
    ids = [node.node_id for node in query.nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("Duplicate node ids")
    for node in query.nodes:
        if node.kind not in NODE_KINDS:
            raise ValidationError(f"Node {node.node_id} has unknown kind {node.kind!r}")
        if node.kind != "anchor" and node.entity is not None:
            raise ValidationError(f"Non-anchor node {node.node_id} carries an entity")

    targets = [node.node_id for node in query.nodes if node.kind == "target"]
    if len(targets) > 1:
        raise ValidationError(f"Query has {len(targets)} target nodes")
    if require_target and not targets:
        raise ValidationError("Query has no target node")
    if query.target != (targets[0] if targets else None):
        raise ValidationError("Query target does not match its target node")

    for idx, atom in enumerate(query.atoms):
        query.node(atom.head)
        query.node(atom.tail)
        if atom.head == atom.tail:
            raise ValidationError(f"Atom {idx} is a self-loop on node {atom.head}")

    group_of = _atom_group_index(query)
    for g_idx, group in enumerate(query.unions):
        if group.mode not in UNION_MODES:
            raise ValidationError(f"Union group {g_idx} has unknown mode {group.mode!r}")
        if not group.branches or any(not branch for branch in group.branches):
            raise ValidationError(f"Union group {g_idx} is empty")
        for branch in group.branches:
            for atom_idx in branch:
                if not 0 <= atom_idx < len(query.atoms):
                    raise ValidationError(f"Union group {g_idx} references missing atom {atom_idx}")
                if query.atoms[atom_idx].negated:
                    raise ValidationError(f"Negated atom {atom_idx} inside union group {g_idx}")
        union_merge_node(query, group)

    # negation may only feed an intersection with at least one positive operand
    for node in query.nodes:
        incoming = query.incoming(node.node_id)
        if incoming and all(query.atoms[i].negated and i not in group_of for i in incoming):
            raise ValidationError(f"Node {node.node_id} is only reached through negated atoms")

    if require_grounded:
        for node in query.anchors():
            if node.entity is None:
                raise ValidationError(f"Ungrounded anchor node {node.node_id}")
        for idx, atom in enumerate(query.atoms):
            if atom.relation is None:
                raise ValidationError(f"Ungrounded relation on atom {idx}")


def structure_graph(query: QueryGraph) -> nx.MultiDiGraph:
    """Nodes and atoms as a multigraph; edge keys are atom indices."""
    graph = nx.MultiDiGraph()
    graph.add_nodes_from(node.node_id for node in query.nodes)
    for idx, atom in enumerate(query.atoms):
        graph.add_edge(atom.head, atom.tail, key=idx, relation=atom.relation, negated=atom.negated)
    return graph


def classify(query: QueryGraph) -> PatternClass:
    graph = structure_graph(query)
    if not nx.is_directed_acyclic_graph(graph):
        return "cyclic"

    out_deg, in_deg = graph.out_degree, graph.in_degree
    if query.target is None or out_deg[query.target] > 0:
        return "dag"
    for node in query.variables():
        if node.node_id != query.target and out_deg[node.node_id] != 1:
            return "dag"

    used = [n for n in graph.nodes if in_deg[n] or out_deg[n]]
    if all(in_deg[n] <= 1 and out_deg[n] <= 1 for n in used) and sum(1 for n in used if in_deg[n] == 0) == 1:
        return "path"
    return "tree"


def plan(query: QueryGraph) -> tuple[PlanStep, ...]:
    """Post-order stack program for a path/tree query; ties broken by atom index."""
    pattern_class = classify(query)
    if pattern_class not in ("path", "tree"):
        raise UnsupportedPatternError(f"Cannot plan a {pattern_class} query; tree execution needs path or tree")
    validate(query)
    group_of = _atom_group_index(query)
    merge_at = [union_merge_node(query, group) for group in query.unions]

    def atom_steps(atom_idx: int) -> list[PlanStep]:
        atom = query.atoms[atom_idx]
        steps = visit(atom.head)
        steps.append(PlanStep("project", node=atom.tail, atom=atom_idx, relation=atom.relation))
        if atom.negated:
            steps.append(PlanStep("negate", node=atom.tail))
        return steps

    def group_steps(node_id: int, group: UnionGroup) -> list[PlanStep]:
        steps: list[PlanStep] = []
        for branch in group.branches:
            entries = sorted(i for i in branch if query.atoms[i].tail == node_id)
            for atom_idx in entries:
                steps.extend(atom_steps(atom_idx))
            if len(entries) > 1:
                steps.append(PlanStep("intersect", node=node_id, arity=len(entries)))
            if group.mode == "demorgan":
                steps.append(PlanStep("negate", node=node_id))
        if group.mode == "demorgan":
            steps.append(PlanStep("intersect", node=node_id, arity=len(group.branches)))
            steps.append(PlanStep("negate", node=node_id))
        else:
            steps.append(PlanStep("union", node=node_id, arity=len(group.branches)))
        return steps

    def visit(node_id: int) -> list[PlanStep]:
        node = query.node(node_id)
        if node.kind == "anchor":
            return [PlanStep("anchor", node=node_id, entity=node.entity)]
        incoming = sorted(query.incoming(node_id))
        if not incoming:
            raise ValidationError(f"Variable node {node_id} is not reachable from an anchor")
        terms: list[list[PlanStep]] = []
        seen_groups: set[int] = set()
        for atom_idx in incoming:
            # a union group opens only at its merge node; inner branch atoms project as usual
            g_idx = group_of[atom_idx][0] if atom_idx in group_of else None
            if g_idx is not None and merge_at[g_idx] == node_id:
                if g_idx in seen_groups:
                    continue
                seen_groups.add(g_idx)
                terms.append(group_steps(node_id, query.unions[g_idx]))
            else:
                terms.append(atom_steps(atom_idx))
        steps = [step for term in terms for step in term]
        if len(terms) > 1:
            steps.append(PlanStep("intersect", node=node_id, arity=len(terms)))
        return steps

    return tuple(visit(query.target))  # type: ignore[arg-type]


T = TypeVar("T")


class PlanHandlers(Protocol[T]):
    def anchor(self, entity: int) -> T: ...

    def project(self, value: T, relation: int) -> T: ...

    def negate(self, value: T) -> T: ...

    def intersect(self, values: list[T]) -> T: ...

    def union(self, values: list[T]) -> T: ...


def evaluate_plan(steps: Sequence[PlanStep], handlers: PlanHandlers[T]) -> T:
    """Run a plan as a stack machine over executor-specific values."""
    stack: list[T] = []
    for step in steps:
        if step.op == "anchor":
            if step.entity is None:
                raise ValidationError(f"Ungrounded anchor node {step.node}")
            stack.append(handlers.anchor(step.entity))
        elif step.op == "project":
            if step.relation is None:
                raise ValidationError(f"Ungrounded relation on atom {step.atom}")
            stack.append(handlers.project(stack.pop(), step.relation))
        elif step.op == "negate":
            stack.append(handlers.negate(stack.pop()))
        else:
            operands = stack[-step.arity :]
            del stack[-step.arity :]
            stack.append(handlers.intersect(operands) if step.op == "intersect" else handlers.union(operands))
    if len(stack) != 1:
        raise ValidationError(f"Malformed plan left {len(stack)} values on the stack")
    return stack[0]


def to_dnf(query: QueryGraph) -> list[QueryGraph]:
    """Distribute conjunction over the union groups: one conjunctive query per branch choice."""
    if not query.unions:
        return [query]
    branches: list[QueryGraph] = []
    for choice in itertools.product(*(range(len(g.branches)) for g in query.unions)):
        dropped = {
            atom_idx
            for group, chosen in zip(query.unions, choice)
            for b_idx, branch in enumerate(group.branches)
            if b_idx != chosen
            for atom_idx in branch
        }
        atoms = tuple(atom for idx, atom in enumerate(query.atoms) if idx not in dropped)
        used = {query.target} | {a.head for a in atoms} | {a.tail for a in atoms}
        nodes = tuple(node for node in query.nodes if node.node_id in used)
        branches.append(QueryGraph(nodes=nodes, atoms=atoms, target=query.target))
    return branches


def demorgan_union(query: QueryGraph) -> QueryGraph:
    """Rewrite every A ∨ B group as ¬(¬A ∧ ¬B)."""
    if not query.unions:
        return query
    return replace(query, unions=tuple(replace(group, mode="demorgan") for group in query.unions))


def serialize(instance: QueryInstance, entities: Dictionary, relations: Dictionary) -> dict[str, Any]:
    query = instance.query
    validate(query, require_grounded=True)
    nodes: list[dict[str, Any]] = []
    for node in query.nodes:
        entry: dict[str, Any] = {"id": node.node_id, "kind": node.kind}
        if node.kind == "anchor":
            entry["entity"] = entities.decode(node.entity)  # type: ignore[arg-type]
        nodes.append(entry)
    record: dict[str, Any] = {
        "id": instance.qid,
        "pattern": instance.pattern,
        "nodes": nodes,
        "atoms": [
            {"head": a.head, "rel": relations.decode(a.relation), "tail": a.tail, "neg": a.negated}  # type: ignore[arg-type]
            for a in query.atoms
        ],
        "unions": [[list(branch) for branch in group.branches] for group in query.unions],
        "easy": [entities.decode(e) for e in sorted(instance.easy)],
        "hard": [entities.decode(e) for e in sorted(instance.hard)],
    }
    if any(group.mode != "or" for group in query.unions):
        record["union_modes"] = [group.mode for group in query.unions]
    if instance.answers is not None:
        record["answers"] = [entities.decode(e) for e in sorted(instance.answers)]
    return record


_REQUIRED_KEYS = ("id", "pattern", "nodes", "atoms", "unions", "easy", "hard")
_OPTIONAL_KEYS = ("union_modes", "answers")


def _expect(value: Any, expected: type | tuple[type, ...], path: str) -> Any:
    # bool is an int subclass; ids must be real integers
    if isinstance(value, bool) and bool not in (expected if isinstance(expected, tuple) else (expected,)):
        raise ParseError(f"{path}: expected {_type_name(expected)}, got bool")
    if not isinstance(value, expected):
        raise ParseError(f"{path}: expected {_type_name(expected)}, got {type(value).__name__}")
    return value


def _type_name(expected: type | tuple[type, ...]) -> str:
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected)
    return expected.__name__


def _field(obj: dict[str, Any], key: str, expected: type | tuple[type, ...], path: str) -> Any:
    if key not in obj:
        raise ParseError(f"{path}.{key}: missing field" if path else f"{key}: missing field")
    return _expect(obj[key], expected, f"{path}.{key}" if path else key)


def _surface_list(obj: dict[str, Any], key: str, entities: Dictionary) -> frozenset[int]:
    values = _field(obj, key, list, "")
    return frozenset(entities.encode(_expect(v, str, f"{key}[{i}]")) for i, v in enumerate(values))


def parse(text: str, entities: Dictionary, relations: Dictionary) -> QueryInstance:
    """Decode one JSONL record; schema errors name the offending field path."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}") from exc
    _expect(obj, dict, "record")
    unknown = sorted(set(obj) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS))
    if unknown:
        raise ParseError(f"{unknown[0]}: unknown field")

    qid = _field(obj, "id", str, "")
    pattern = _field(obj, "pattern", str, "")

    nodes: list[QueryNode] = []
    for i, raw in enumerate(_field(obj, "nodes", list, "")):
        path = f"nodes[{i}]"
        _expect(raw, dict, path)
        node_id = _field(raw, "id", int, path)
        kind = _field(raw, "kind", str, path)
        if kind not in NODE_KINDS:
            raise ParseError(f"{path}.kind: expected one of {', '.join(NODE_KINDS)}, got {kind!r}")
        entity = None
        if kind == "anchor":
            entity = entities.encode(_field(raw, "entity", str, path))
        elif "entity" in raw:
            raise ParseError(f"{path}.entity: only anchor nodes carry an entity")
        nodes.append(QueryNode(node_id, kind, entity))

    atoms: list[QueryAtom] = []
    for i, raw in enumerate(_field(obj, "atoms", list, "")):
        path = f"atoms[{i}]"
        _expect(raw, dict, path)
        atoms.append(
            QueryAtom(
                head=_field(raw, "head", int, path),
                relation=relations.encode(_field(raw, "rel", str, path)),
                tail=_field(raw, "tail", int, path),
                negated=_field(raw, "neg", bool, path),
            )
        )

    raw_unions = _field(obj, "unions", list, "")
    modes = obj.get("union_modes", ["or"] * len(raw_unions))
    _expect(modes, list, "union_modes")
    if len(modes) != len(raw_unions):
        raise ParseError("union_modes: length differs from unions")
    groups: list[UnionGroup] = []
    for g, raw_group in enumerate(raw_unions):
        _expect(raw_group, list, f"unions[{g}]")
        branches = []
        for b, raw_branch in enumerate(raw_group):
            _expect(raw_branch, list, f"unions[{g}][{b}]")
            branches.append(tuple(_expect(v, int, f"unions[{g}][{b}][{k}]") for k, v in enumerate(raw_branch)))
        mode = _expect(modes[g], str, f"union_modes[{g}]")
        groups.append(UnionGroup(tuple(branches), mode))

    targets = [n.node_id for n in nodes if n.kind == "target"]
    query = QueryGraph(
        nodes=tuple(nodes),
        atoms=tuple(atoms),
        target=targets[0] if len(targets) == 1 else None,
        unions=tuple(groups),
        pattern=pattern,
    )
    validate(query)

    answers = _surface_list(obj, "answers", entities) if "answers" in obj else None
    return QueryInstance(
        qid=qid,
        pattern=pattern,
        query=query,
        easy=_surface_list(obj, "easy", entities),
        hard=_surface_list(obj, "hard", entities),
        answers=answers,
    )


def read_queries(path: Path, entities: Dictionary, relations: Dictionary) -> list[QueryInstance]:
    """Parse a query JSONL file; errors carry the file and line number."""
    instances: list[QueryInstance] = []
    seen: set[str] = set()
    for line_no, text in read_jsonl_lines(path):
        try:
            instance = parse(text, entities, relations)
        except (ParseError, ValidationError) as exc:
            raise ParseError(str(exc), path=path, line_no=line_no) from exc
        if instance.qid in seen:
            raise ParseError(f"duplicate query id {instance.qid!r}", path=path, line_no=line_no)
        seen.add(instance.qid)
        instances.append(instance)
    return instances
