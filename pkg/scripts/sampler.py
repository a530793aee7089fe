"""Benchmark query generation: grounded pattern instances with oracle easy/hard labels per split."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from kg_store import GraphStack, KnowledgeGraph
from pipeline_utils import (
    FORMAT_VERSION,
    RNG_ALGORITHM,
    InvalidInputError,
    SamplingExhaustedError,
    get_logger,
    make_rng,
    write_json,
    write_jsonl,
)
from query_ast import (
    PATTERNS,
    TRAINING_PATTERNS,
    QueryAtom,
    QueryGraph,
    QueryInstance,
    QueryNode,
    serialize,
    template,
)
from symbolic_engine import answer, label_answers

SPLITS = ("train", "valid", "test")

logger = get_logger("sample")


@dataclass(frozen=True)
class SampleConfig:
    counts: Mapping[str, Mapping[str, int]] = field(default_factory=dict)
    seed: int = 0
    max_answers: int = 100
    require_hard: bool = True
    share_union_anchors: bool = False
    exclude_train_edges_1p: bool = False
    max_attempts: int = 1000
    workers: int = 1

    def __post_init__(self) -> None:
        for split, per_pattern in self.counts.items():
            if split not in SPLITS:
                raise InvalidInputError(f"Unknown split in counts: {split!r}")
            allowed = self.patterns(split)
            for pattern, count in per_pattern.items():
                if pattern not in PATTERNS:
                    raise InvalidInputError(f"Unknown pattern in counts.{split}: {pattern!r}")
                if pattern not in allowed and count:
                    raise InvalidInputError(f"Pattern {pattern} is evaluation-only and cannot appear in counts.train")
                if isinstance(count, bool) or not isinstance(count, int) or count < 0:
                    raise InvalidInputError(f"counts.{split}.{pattern} must be a non-negative integer, got {count!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError(f"Seed must fit in 64 bits, got {self.seed}")
        if self.max_answers < 1:
            raise InvalidInputError(f"max_answers must be >= 1, got {self.max_answers}")
        if self.max_attempts < 1:
            raise InvalidInputError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.workers < 1:
            raise InvalidInputError(f"workers must be >= 1, got {self.workers}")

    @staticmethod
    def patterns(split: str) -> tuple[str, ...]:
        return TRAINING_PATTERNS if split == "train" else PATTERNS

    def count(self, split: str, pattern: str) -> int:
        return int(self.counts.get(split, {}).get(pattern, 0))

    @classmethod
    def uniform(cls, train: int, evaluation: int, **kwargs: Any) -> "SampleConfig":
        counts = {
            split: {p: (train if split == "train" else evaluation) for p in cls.patterns(split)} for split in SPLITS
        }
        return cls(counts=counts, **kwargs)

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SampleConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(payload) - known)
        if unknown:
            raise InvalidInputError(f"Unknown sampler config keys: {', '.join(unknown)}")
        return cls(**dict(payload))


class _Rejected(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


def _branch_atoms(query: QueryGraph, atom_idx: int) -> set[int]:
    """`atom_idx` plus every atom feeding its head, transitively."""
    found = {atom_idx}
    frontier = [query.atoms[atom_idx].head]
    while frontier:
        node_id = frontier.pop()
        for idx in query.incoming(node_id):
            if idx not in found:
                found.add(idx)
                frontier.append(query.atoms[idx].head)
    return found


class _Grounder:
    """Reverse-walk grounding of one pattern skeleton on one graph layer."""

    def __init__(self, pattern: str, layer: KnowledgeGraph, g_train: KnowledgeGraph, split: str, config: SampleConfig) -> None:
        self.pattern = pattern
        self.skeleton = template(pattern)
        self.layer = layer
        self.g_train = g_train
        self.split = split
        self.config = config
        self.seed_answers = np.unique(layer.triples[:, 2])
        self.group_of = {
            atom_idx: g_idx
            for g_idx, group in enumerate(self.skeleton.unions)
            for branch in group.branches
            for atom_idx in branch
        }
        self.skip_train_edges = pattern == "1p" and split != "train" and config.exclude_train_edges_1p

    def ground(self, rng: np.random.Generator) -> QueryGraph:
        if self.seed_answers.shape[0] == 0:
            raise _Rejected("layer has no triples")
        self.entities: dict[int, int] = {}
        self.relations: dict[int, int] = {}
        seed = int(rng.choice(self.seed_answers))
        self._walk(self.skeleton.target, seed, rng)  # type: ignore[arg-type]
        return self._build(range(len(self.skeleton.atoms)), self.skeleton.target, keep_unions=True)  # type: ignore[arg-type]

    def _build(self, atom_indices: Any, root: int, *, keep_unions: bool = False, as_positive: int | None = None) -> QueryGraph:
        indices = sorted(atom_indices)
        atoms = tuple(
            QueryAtom(a.head, self.relations[i], a.tail, a.negated and i != as_positive)
            for i in indices
            for a in (self.skeleton.atoms[i],)
        )
        used = {root} | {a.head for a in atoms} | {a.tail for a in atoms}
        nodes = tuple(
            QueryNode(n.node_id, "target" if n.node_id == root else ("var" if n.kind == "target" else n.kind), self.entities.get(n.node_id))
            for n in self.skeleton.nodes
            if n.node_id in used
        )
        if keep_unions:
            return QueryGraph(nodes, atoms, root, self.skeleton.unions, self.pattern)
        # sub-queries renumber atoms; only union-free patterns are carved up
        return QueryGraph(nodes, atoms, root)

    def _pick_in_edge(self, entity: int, rng: np.random.Generator, *, head: int | None = None, exclude_relations: set[int] | None = None) -> tuple[int, int]:
        edges = self.layer.in_edges(entity)
        mask = np.ones(edges.shape[0], dtype=bool)
        if head is not None:
            mask &= edges[:, 0] == head
        if exclude_relations:
            mask &= ~np.isin(edges[:, 1], sorted(exclude_relations))
        if self.skip_train_edges:
            mask &= np.array([not self.g_train.has_edge(int(h), int(r), entity) for h, r in edges], dtype=bool)
        edges = edges[mask]
        if edges.shape[0] == 0:
            raise _Rejected("dead end in reverse walk")
        h, r = edges[int(rng.integers(edges.shape[0]))]
        return int(h), int(r)

    def _assign_head(self, atom_idx: int, head: int, rng: np.random.Generator) -> None:
        node = self.skeleton.node(self.skeleton.atoms[atom_idx].head)
        if node.kind == "anchor":
            self.entities[node.node_id] = head
        else:
            self._walk(node.node_id, head, rng)

    def _walk(self, node_id: int, entity: int, rng: np.random.Generator) -> None:
        incoming = self.skeleton.incoming(node_id)
        positive = [i for i in incoming if not self.skeleton.atoms[i].negated]
        negated = [i for i in incoming if self.skeleton.atoms[i].negated]

        group_choices: dict[int, list[tuple[int, int]]] = {}
        for atom_idx in positive:
            g_idx = self.group_of.get(atom_idx)
            previous = group_choices.get(g_idx, []) if g_idx is not None else []
            shared = previous[0][0] if previous and self.config.share_union_anchors else None
            used = {r for h, r in previous if shared is not None and h == shared}
            head, relation = self._pick_in_edge(entity, rng, head=shared, exclude_relations=used)
            if (head, relation) in previous:
                raise _Rejected("identical union branches")
            if g_idx is not None:
                group_choices.setdefault(g_idx, []).append((head, relation))
            self.relations[atom_idx] = relation
            self._assign_head(atom_idx, head, rng)

        for atom_idx in negated:
            feeding = set().union(*(_branch_atoms(self.skeleton, i) for i in positive))
            survivors = answer(self._build(feeding, node_id), self.layer) - {entity}
            survivors = sorted(e for e in survivors if self.layer.in_edges(e).shape[0])
            if not survivors:
                raise _Rejected("negation would be vacuous")
            removed = survivors[int(rng.integers(len(survivors)))]
            head, relation = self._pick_in_edge(removed, rng)
            self.relations[atom_idx] = relation
            self._assign_head(atom_idx, head, rng)
            branch = answer(self._build(_branch_atoms(self.skeleton, atom_idx), node_id, as_positive=atom_idx), self.layer)
            if entity in branch:
                raise _Rejected("negated branch removes the seed answer")


def _structure_key(query: QueryGraph) -> tuple[Any, ...]:
    return (query.nodes, query.atoms)


def sample_query(
    pattern: str,
    stack: GraphStack,
    rng: np.random.Generator,
    *,
    split: str = "test",
    config: SampleConfig | None = None,
    seen: set[tuple[Any, ...]] | None = None,
    qid: str = "",
) -> QueryInstance:
    """Ground one instance of `pattern` on the split's layer, rejecting until the constraints hold."""
    config = config or SampleConfig()
    if split not in SPLITS:
        raise InvalidInputError(f"Unknown split {split!r}")
    if pattern not in SampleConfig.patterns(split):
        raise InvalidInputError(f"Pattern {pattern} cannot be sampled for split {split}")
    seen = seen if seen is not None else set()
    g_train = stack.train
    layer = stack.layer(split)
    grounder = _Grounder(pattern, layer, g_train, split, config)

    reason = "no attempt made"
    for _ in range(config.max_attempts):
        try:
            query = grounder.ground(rng)
            key = _structure_key(query)
            if key in seen:
                raise _Rejected("duplicate query")
            labels = label_answers(query, g_train, layer)
            answers = labels.easy | labels.hard
            if not answers:
                raise _Rejected("unsatisfiable on evaluation layer")
            if len(answers) > config.max_answers:
                raise _Rejected("answer cap exceeded")
            if split != "train" and config.require_hard and not labels.hard:
                raise _Rejected("no hard answers")
        except _Rejected as exc:
            reason = exc.reason
            continue
        seen.add(key)
        return QueryInstance(
            qid=qid,
            pattern=pattern,
            query=query,
            easy=labels.easy,
            hard=labels.hard,
            false_positive=labels.false_positive,
        )
    raise SamplingExhaustedError(
        f"Sampling exhausted for pattern {pattern} ({split}) after {config.max_attempts} attempts; last rejection: {reason}"
    )


def _sample_job(args: tuple[SampleConfig, GraphStack, str, str]) -> list[QueryInstance]:
    config, stack, split, pattern = args
    rng = make_rng(config.seed ^ PATTERNS.index(pattern), split)
    seen: set[tuple[Any, ...]] = set()
    return [
        sample_query(pattern, stack, rng, split=split, config=config, seen=seen, qid=f"{split}-{pattern}-{i:05d}")
        for i in range(config.count(split, pattern))
    ]


def sample_split(config: SampleConfig, stack: GraphStack, split: str) -> list[QueryInstance]:
    jobs = [(config, stack, split, p) for p in SampleConfig.patterns(split) if config.count(split, p)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            batches = list(pool.map(_sample_job, jobs))
    else:
        batches = [_sample_job(job) for job in jobs]
    return [instance for batch in batches for instance in batch]


def summarize_split(instances: list[QueryInstance], split: str) -> dict[str, Any]:
    rows = [
        {
            "pattern": inst.pattern,
            "easy": len(inst.easy),
            "hard": len(inst.hard),
            "false_positive": len(inst.false_positive),
        }
        for inst in instances
    ]
    df = pd.DataFrame(rows, columns=["pattern", "easy", "hard", "false_positive"])
    for column in ("easy", "hard", "false_positive"):
        df[column] = pd.to_numeric(df[column])
    grouped = df.groupby("pattern").agg(
        count=("easy", "size"),
        mean_easy=("easy", "mean"),
        mean_hard=("hard", "mean"),
        mean_false_positive=("false_positive", "mean"),
    )
    grouped = grouped.reindex(list(SampleConfig.patterns(split))).fillna(0)

    patterns: dict[str, dict[str, Any]] = {}
    for pattern, rec in grouped.iterrows():
        patterns[str(pattern)] = {
            "count": int(rec["count"]),
            "mean_easy": float(rec["mean_easy"]),
            "mean_hard": float(rec["mean_hard"]),
            "mean_false_positive": float(rec["mean_false_positive"]),
        }
    return {
        "total": int(df.shape[0]),
        "mean_easy": float(df["easy"].mean()) if df.shape[0] else 0.0,
        "mean_hard": float(df["hard"].mean()) if df.shape[0] else 0.0,
        "patterns": patterns,
    }


def sample_dataset(config: SampleConfig, stack: GraphStack, out_dir: Path) -> dict[str, Any]:
    """Write {train,valid,test}-queries.jsonl and stats.json; partial output is removed on failure."""
    written: list[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        stats: dict[str, Any] = {
            "format_version": FORMAT_VERSION,
            "rng_algorithm": RNG_ALGORITHM,
            "seed": config.seed,
            "max_answers": config.max_answers,
            "require_hard": config.require_hard,
            "share_union_anchors": config.share_union_anchors,
            "exclude_train_edges_1p": config.exclude_train_edges_1p,
            "splits": {},
        }
        for split in SPLITS:
            instances = sample_split(config, stack, split)
            path = out_dir / f"{split}-queries.jsonl"
            written.append(path)
            write_jsonl(path, (serialize(inst, stack.entities, stack.relations) for inst in instances))
            stats["splits"][split] = summarize_split(instances, split)
            logger.info(
                "%s: %d queries (mean easy %.2f, mean hard %.2f)",
                split,
                stats["splits"][split]["total"],
                stats["splits"][split]["mean_easy"],
                stats["splits"][split]["mean_hard"],
            )
        stats_path = out_dir / "stats.json"
        written.append(stats_path)
        write_json(stats_path, stats)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return stats
