"""Dictionary-encoded knowledge graph store with layered train/valid/test splits.

Triples are kept as an (n, 3) integer array in first-occurrence order. Forward and backward
adjacency are sorted key arrays (relation * |E| + node) searched with binary search, so a
neighbor lookup returns a contiguous, ascending slice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from pipeline_utils import (
    BoundsError,
    FormatError,
    InvalidInputError,
    ParseError,
    ValidationError,
    clean_text,
    get_logger,
)

STORE_MAGIC = b"NGDBKG01"
LAYERS = ("train", "valid", "test")

Direction = Literal["fwd", "bwd"]
LabeledTriple = tuple[str, str, str]

logger = get_logger("kg_store")


@dataclass(frozen=True)
class Dictionary:
    """Bijective surface <-> dense id mapping."""

    labels: tuple[str, ...]
    ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ids = {label: idx for idx, label in enumerate(self.labels)}
        if len(ids) != len(self.labels):
            raise ValidationError("Dictionary labels must be unique")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    def encode(self, surface: str) -> int:
        try:
            return self.ids[surface]
        except KeyError as exc:
            raise ValidationError(f"Unknown surface form: {surface!r}") from exc

    def decode(self, idx: int) -> str:
        if not 0 <= idx < len(self.labels):
            raise BoundsError(f"Id {idx} outside dictionary of size {len(self.labels)}")
        return self.labels[idx]


class KnowledgeGraph:
    """Immutable triple set G = (E, R, S) over dense entity and relation ids."""

    def __init__(self, entity_count: int, relation_count: int, triples: np.ndarray | Iterable[tuple[int, int, int]]) -> None:
        arr = np.asarray(list(triples) if not isinstance(triples, np.ndarray) else triples, dtype=np.int64)
        arr = arr.reshape(-1, 3)
        if arr.size and (
            arr[:, [0, 2]].min() < 0
            or arr[:, [0, 2]].max() >= entity_count
            or arr[:, 1].min() < 0
            or arr[:, 1].max() >= relation_count
        ):
            raise BoundsError("Triple ids outside dictionary bounds")

        if arr.shape[0]:
            _, first = np.unique(arr, axis=0, return_index=True)
            deduped = arr[np.sort(first)]
        else:
            deduped = arr.copy()
        self.entity_count = int(entity_count)
        self.relation_count = int(relation_count)
        self.duplicates_merged = int(arr.shape[0] - deduped.shape[0])
        self.triples = deduped
        self.triples.flags.writeable = False

        heads, rels, tails = deduped[:, 0], deduped[:, 1], deduped[:, 2]
        fwd_order = np.lexsort((tails, heads, rels))
        self._fwd_keys = (rels * entity_count + heads)[fwd_order]
        self._fwd_values = tails[fwd_order]
        bwd_order = np.lexsort((heads, tails, rels))
        self._bwd_keys = (rels * entity_count + tails)[bwd_order]
        self._bwd_values = heads[bwd_order]
        # incoming edges grouped by tail, for reverse walks
        in_order = np.lexsort((heads, rels, tails))
        self._in_tails = tails[in_order]
        self._in_edges = np.stack([heads[in_order], rels[in_order]], axis=1) if deduped.shape[0] else np.zeros((0, 2), dtype=np.int64)
        for arr_view in (self._fwd_keys, self._fwd_values, self._bwd_keys, self._bwd_values, self._in_tails, self._in_edges):
            arr_view.flags.writeable = False

    def __len__(self) -> int:
        return int(self.triples.shape[0])

    def check_relation(self, relation: int) -> None:
        if not 0 <= relation < self.relation_count:
            raise BoundsError(f"Relation id {relation} outside [0, {self.relation_count})")

    def check_entity(self, entity: int) -> None:
        if not 0 <= entity < self.entity_count:
            raise BoundsError(f"Entity id {entity} outside [0, {self.entity_count})")

    def neighbors(self, relation: int, node: int, direction: Direction = "fwd") -> np.ndarray:
        """Sorted tails of (node, relation, ?) for fwd, heads of (?, relation, node) for bwd."""
        self.check_relation(relation)
        self.check_entity(node)
        if direction == "fwd":
            keys, values = self._fwd_keys, self._fwd_values
        elif direction == "bwd":
            keys, values = self._bwd_keys, self._bwd_values
        else:
            raise InvalidInputError(f"Unknown direction: {direction!r}")
        key = relation * self.entity_count + node
        lo = np.searchsorted(keys, key, side="left")
        hi = np.searchsorted(keys, key, side="right")
        return values[lo:hi]

    def has_edge(self, head: int, relation: int, tail: int) -> bool:
        self.check_entity(tail)
        tails = self.neighbors(relation, head, "fwd")
        pos = np.searchsorted(tails, tail)
        return bool(pos < tails.shape[0] and tails[pos] == tail)

    def boolean_row(self, relation: int, head: int) -> np.ndarray:
        """Indicator over E of the tails of (head, relation, ?)."""
        row = np.zeros(self.entity_count, dtype=np.float64)
        row[self.neighbors(relation, head, "fwd")] = 1.0
        return row

    def in_edges(self, tail: int) -> np.ndarray:
        """(head, relation) rows of every triple ending in `tail`, ordered by relation then head."""
        self.check_entity(tail)
        lo = np.searchsorted(self._in_tails, tail, side="left")
        hi = np.searchsorted(self._in_tails, tail, side="right")
        return self._in_edges[lo:hi]

    def relation_heads(self, relation: int) -> np.ndarray:
        self.check_relation(relation)
        return np.unique(self.triples[self.triples[:, 1] == relation, 0])

    def relation_tails(self, relation: int) -> np.ndarray:
        self.check_relation(relation)
        return np.unique(self.triples[self.triples[:, 1] == relation, 2])

    def triple_keys(self) -> np.ndarray:
        """Sorted scalar encoding (h * |R| + r) * |E| + t of every triple."""
        h, r, t = self.triples[:, 0], self.triples[:, 1], self.triples[:, 2]
        return np.sort((h * self.relation_count + r) * self.entity_count + t)

    def triple_set(self) -> frozenset[tuple[int, int, int]]:
        return frozenset(map(tuple, self.triples.tolist()))


@dataclass(frozen=True)
class GraphStack:
    """Transductive train ⊆ valid ⊆ test layers sharing one pair of dictionaries."""

    entities: Dictionary
    relations: Dictionary
    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph

    def __post_init__(self) -> None:
        for name in LAYERS:
            graph = self.layer(name)
            if graph.entity_count != len(self.entities) or graph.relation_count != len(self.relations):
                raise ValidationError(f"Layer {name} does not share the stack dictionaries")
        for small, big in (("train", "valid"), ("valid", "test")):
            small_keys = self.layer(small).triple_keys()
            if not np.isin(small_keys, self.layer(big).triple_keys(), assume_unique=True).all():
                raise ValidationError(f"Layer {small} is not contained in layer {big}")

    def layer(self, name: str) -> KnowledgeGraph:
        if name not in LAYERS:
            raise InvalidInputError(f"Unknown layer {name!r}; expected one of {', '.join(LAYERS)}")
        return getattr(self, name)

    def summary(self) -> dict[str, object]:
        return {
            "entities": len(self.entities),
            "relations": len(self.relations),
            "triples": {name: len(self.layer(name)) for name in LAYERS},
            "duplicates_merged": self.test.duplicates_merged,
        }


def read_triple_file(path: Path) -> list[LabeledTriple]:
    """Parse `head<TAB>relation<TAB>tail` lines; blank lines are skipped."""
    if not path.exists():
        raise InvalidInputError(f"Required file not found: {path}")
    triples: list[LabeledTriple] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            raw = line.rstrip("\r\n")
            if not raw.strip():
                continue
            fields = raw.split("\t")
            if len(fields) != 3:
                raise ParseError(f"expected 3 tab-separated fields, found {len(fields)}", path=path, line_no=line_no)
            head, relation, tail = (clean_text(value) for value in fields)
            if not head or not relation or not tail:
                raise ParseError("empty field", path=path, line_no=line_no)
            triples.append((head, relation, tail))
    return triples


def stack_from_labeled_triples(
    train: list[LabeledTriple],
    valid: list[LabeledTriple] | None = None,
    test: list[LabeledTriple] | None = None,
) -> GraphStack:
    valid = valid or []
    test = test or []
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    for head, relation, tail in [*train, *valid, *test]:
        entity_ids.setdefault(head, len(entity_ids))
        relation_ids.setdefault(relation, len(relation_ids))
        entity_ids.setdefault(tail, len(entity_ids))

    def encode(rows: list[LabeledTriple]) -> np.ndarray:
        encoded = [(entity_ids[h], relation_ids[r], entity_ids[t]) for h, r, t in rows]
        return np.asarray(encoded, dtype=np.int64).reshape(-1, 3)

    n_ent, n_rel = len(entity_ids), len(relation_ids)
    train_arr, valid_arr, test_arr = encode(train), encode(valid), encode(test)
    return GraphStack(
        entities=Dictionary(tuple(entity_ids)),
        relations=Dictionary(tuple(relation_ids)),
        train=KnowledgeGraph(n_ent, n_rel, train_arr),
        valid=KnowledgeGraph(n_ent, n_rel, np.concatenate([train_arr, valid_arr])),
        test=KnowledgeGraph(n_ent, n_rel, np.concatenate([train_arr, valid_arr, test_arr])),
    )


def ingest_triples(train_path: Path, valid_path: Path | None = None, test_path: Path | None = None) -> GraphStack:
    train = read_triple_file(train_path)
    if not train:
        raise InvalidInputError(f"Training file has no triples: {train_path}")
    valid = read_triple_file(valid_path) if valid_path is not None else []
    test = read_triple_file(test_path) if test_path is not None else []
    stack = stack_from_labeled_triples(train, valid, test)
    if stack.test.duplicates_merged:
        logger.warning("Merged %d duplicate triple lines", stack.test.duplicates_merged)
    return stack


def _pack_dictionary(dictionary: Dictionary) -> bytes:
    parts = [struct.pack("<I", len(dictionary))]
    for label in dictionary.labels:
        encoded = label.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
    return b"".join(parts)


def save_store(stack: GraphStack, path: Path) -> None:
    layers = [stack.layer(name) for name in LAYERS]
    parts = [
        STORE_MAGIC,
        struct.pack("<5I", len(stack.entities), len(stack.relations), *(len(g) for g in layers)),
    ]
    parts.extend(g.triples.astype("<u4").tobytes() for g in layers)
    parts.append(_pack_dictionary(stack.entities))
    parts.append(_pack_dictionary(stack.relations))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, payload: bytes, path: Path) -> None:
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise FormatError(f"Truncated store file: {self.path}")
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def _unpack_dictionary(reader: _Reader) -> Dictionary:
    (count,) = reader.u32()
    labels = []
    for _ in range(count):
        (size,) = reader.u32()
        try:
            labels.append(reader.take(size).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"Invalid UTF-8 label in store file: {reader.path}") from exc
    try:
        return Dictionary(tuple(labels))
    except ValidationError as exc:
        raise FormatError(f"Duplicate dictionary label in store file: {reader.path}") from exc


def load_store(path: Path) -> GraphStack:
    if not path.exists():
        raise InvalidInputError(f"Required file not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(STORE_MAGIC)) != STORE_MAGIC:
        raise FormatError(f"Not a graph store (bad magic): {path}")
    n_ent, n_rel, *layer_sizes = reader.u32(5)
    arrays = [
        np.frombuffer(reader.take(12 * size), dtype="<u4").astype(np.int64).reshape(-1, 3) for size in layer_sizes
    ]
    entities = _unpack_dictionary(reader)
    relations = _unpack_dictionary(reader)
    if reader.offset != len(reader.payload):
        raise FormatError(f"Trailing bytes in store file: {path}")
    if len(entities) != n_ent or len(relations) != n_rel:
        raise FormatError(f"Dictionary sizes disagree with header: {path}")
    try:
        graphs = [KnowledgeGraph(n_ent, n_rel, arr) for arr in arrays]
        return GraphStack(entities, relations, *graphs)
    except (BoundsError, ValidationError) as exc:
        raise FormatError(f"Inconsistent store file {path}: {exc}") from exc
