"""Shared graphs and queries for the test modules."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.append(str(Path(__file__).resolve().parents[1] / "scripts"))

from kg_store import Dictionary, GraphStack, KnowledgeGraph, ingest_triples, stack_from_labeled_triples  # noqa: E402
from query_ast import QueryAtom, QueryGraph, QueryInstance, QueryNode, UnionGroup, serialize  # noqa: E402
from sampler import SampleConfig, sample_query  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CAMPUS_DIR = ROOT / "data" / "campus"


def campus_stack() -> GraphStack:
    return ingest_triples(CAMPUS_DIR / "train.tsv", CAMPUS_DIR / "valid.tsv", CAMPUS_DIR / "test.tsv")


def campus_query(stack: GraphStack) -> QueryGraph:
    """Turing Award winners in deep learning, then their universities."""
    e, r = stack.entities.encode, stack.relations.encode
    return QueryGraph(
        nodes=(
            QueryNode(0, "anchor", e("TuringAward")),
            QueryNode(1, "anchor", e("DeepLearning")),
            QueryNode(2, "var"),
            QueryNode(3, "target"),
        ),
        atoms=(
            QueryAtom(0, r("win"), 2),
            QueryAtom(1, r("field"), 2),
            QueryAtom(2, r("university"), 3),
        ),
        target=3,
        pattern="ip",
    )


def labels(stack: GraphStack, *names: str) -> frozenset[int]:
    return frozenset(stack.entities.encode(name) for name in names)


def graph_from_edges(n_entities: int, n_relations: int, edges: list[tuple[int, int, int]]) -> KnowledgeGraph:
    return KnowledgeGraph(n_entities, n_relations, np.asarray(edges, dtype=np.int64).reshape(-1, 3))


def random_triples(rng: np.random.Generator, n_entities: int, n_relations: int, n_triples: int) -> np.ndarray:
    triples = np.stack(
        [
            rng.integers(n_entities, size=n_triples),
            rng.integers(n_relations, size=n_triples),
            rng.integers(n_entities, size=n_triples),
        ],
        axis=1,
    )
    return triples[triples[:, 0] != triples[:, 2]]


def random_graph(seed: int, n_entities: int = 60, n_relations: int = 4, n_triples: int = 240) -> KnowledgeGraph:
    rng = np.random.default_rng(seed)
    return KnowledgeGraph(n_entities, n_relations, random_triples(rng, n_entities, n_relations, n_triples))


def random_stack(
    seed: int,
    n_entities: int = 60,
    n_relations: int = 4,
    n_triples: int = 240,
    split: tuple[float, float] = (0.8, 0.1),
) -> GraphStack:
    rng = np.random.default_rng(seed)
    triples = random_triples(rng, n_entities, n_relations, n_triples)
    rows = [(f"e{h}", f"r{r}", f"e{t}") for h, r, t in triples.tolist()]
    n_train = int(len(rows) * split[0])
    n_valid = int(len(rows) * split[1])
    return stack_from_labeled_triples(rows[:n_train], rows[n_train : n_train + n_valid], rows[n_train + n_valid :])


def single_layer_stack(graph: KnowledgeGraph) -> GraphStack:
    rows = [(f"e{h}", f"r{r}", f"e{t}") for h, r, t in graph.triples.tolist()]
    return stack_from_labeled_triples(rows)


def planted_rows(
    seed: int = 0, clusters: int = 20, size: int = 10, n_relations: int = 4, fanout: int = 3
) -> tuple[list[tuple[str, str, str]], list[tuple[str, str, str]], list[tuple[str, str, str]]]:
    """Entities in clusters; relation r sends cluster c to cluster c + r + 1. Split 90/5/5."""
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, str, str]] = []
    for c in range(clusters):
        for member in range(size):
            head = c * size + member
            for r in range(n_relations):
                target_cluster = (c + r + 1) % clusters
                for offset in rng.choice(size, fanout, replace=False).tolist():
                    rows.append((f"e{head}", f"r{r}", f"e{target_cluster * size + offset}"))
    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    n_train = int(len(rows) * 0.9)
    n_valid = int(len(rows) * 0.05)
    return rows[:n_train], rows[n_train : n_train + n_valid], rows[n_train + n_valid :]


def sampled_queries(
    stack: GraphStack,
    patterns: tuple[str, ...],
    per_pattern: int,
    seed: int,
    *,
    split: str = "test",
    require_hard: bool = False,
    max_answers: int = 10**6,
) -> list[QueryInstance]:
    config = SampleConfig(require_hard=require_hard, max_answers=max_answers)
    rng = np.random.default_rng(seed)
    out: list[QueryInstance] = []
    for pattern in patterns:
        seen: set = set()
        for i in range(per_pattern):
            out.append(
                sample_query(pattern, stack, rng, split=split, config=config, seen=seen, qid=f"{pattern}-{i}")
            )
    return out


def two_branch_union(anchor_a: int, rel_a: int, anchor_b: int, rel_b: int) -> QueryGraph:
    return QueryGraph(
        nodes=(QueryNode(0, "anchor", anchor_a), QueryNode(1, "anchor", anchor_b), QueryNode(2, "target")),
        atoms=(QueryAtom(0, rel_a, 2), QueryAtom(1, rel_b, 2)),
        target=2,
        unions=(UnionGroup(((0,), (1,))),),
        pattern="2u",
    )


def two_hop_union(anchor_a: int, anchor_b: int, first: int, second: int) -> QueryGraph:
    """(a -first-> v -second-> T) or (b -first-> w -second-> T)."""
    return QueryGraph(
        nodes=(
            QueryNode(0, "anchor", anchor_a),
            QueryNode(1, "anchor", anchor_b),
            QueryNode(2, "var"),
            QueryNode(3, "var"),
            QueryNode(4, "target"),
        ),
        atoms=(QueryAtom(0, first, 2), QueryAtom(2, second, 4), QueryAtom(1, first, 3), QueryAtom(3, second, 4)),
        target=4,
        unions=(UnionGroup(((0, 1), (2, 3))),),
    )


def serialize_line(instance: QueryInstance, entities: Dictionary, relations: Dictionary) -> str:
    return json.dumps(serialize(instance, entities, relations), ensure_ascii=False)


def read_ranks(parquet_path: Path) -> pd.DataFrame:
    """Ranks table from parquet or the CSV written when parquet is unavailable."""
    if parquet_path.exists():
        return pd.read_parquet(parquet_path)
    csv_fallback_path = parquet_path.with_suffix(parquet_path.suffix + ".csv")
    if csv_fallback_path.exists():
        return pd.read_csv(csv_fallback_path)
    raise FileNotFoundError(f"Neither parquet nor fallback CSV exists for {parquet_path}")
