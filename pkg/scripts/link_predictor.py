"""ComplEx one-hop link predictor: scoring, mini-batch SGD training, calibration and the embedding file."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit, logsumexp, softmax

from kg_store import KnowledgeGraph
from pipeline_utils import (
    BoundsError,
    FormatError,
    InvalidInputError,
    InvalidStateError,
    TrainingDivergedError,
    get_logger,
    make_rng,
)

EMBEDDING_MAGIC = b"NGDBEMB1"
LOSSES = ("logsigmoid", "margin", "cross_entropy")
NEGATIVE_RESAMPLE_ROUNDS = 10

logger = get_logger("train")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 16
    epochs: int = 50
    lr: float = 0.25
    negatives: int = 4
    gamma: float = 0.0
    batch_size: int = 64
    seed: int = 0
    l2: float = 1e-3
    loss: str = "logsigmoid"
    init_scale: float | None = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise InvalidInputError(f"dim must be >= 1, got {self.dim}")
        if self.negatives < 1:
            raise InvalidInputError(f"negatives must be >= 1, got {self.negatives}")
        if self.gamma < 0:
            raise InvalidInputError(f"gamma must be >= 0, got {self.gamma}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.l2 < 0:
            raise InvalidInputError("lr must be positive and l2 non-negative")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"Unknown loss {self.loss!r}; expected one of {', '.join(LOSSES)}")
        if self.init_scale is not None and self.init_scale < 0:
            raise InvalidInputError(f"init_scale must be >= 0, got {self.init_scale}")

    @property
    def scale(self) -> float:
        return 0.5 / self.dim if self.init_scale is None else self.init_scale

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "TrainConfig":
        unknown = sorted(set(payload) - set(cls.__dataclass_fields__))
        if unknown:
            raise InvalidInputError(f"Unknown train config keys: {', '.join(unknown)}")
        return cls(**dict(payload))


@dataclass
class EmbeddingTable:
    """Entity and relation embeddings as float32 real/imaginary parts, plus per-relation score medians."""

    entity_re: np.ndarray
    entity_im: np.ndarray
    relation_re: np.ndarray
    relation_im: np.ndarray
    relation_median: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        for name in ("entity_re", "entity_im", "relation_re", "relation_im"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        if self.relation_median is None:
            self.relation_median = np.full(self.relation_re.shape[0], np.nan, dtype=np.float32)
        self.relation_median = np.ascontiguousarray(self.relation_median, dtype=np.float32)
        if (
            self.entity_re.ndim != 2
            or self.entity_re.shape != self.entity_im.shape
            or self.relation_re.shape != self.relation_im.shape
            or self.relation_re.ndim != 2
            or self.entity_re.shape[1] != self.relation_re.shape[1]
            or self.relation_median.shape != (self.relation_re.shape[0],)
        ):
            raise InvalidStateError("Embedding table dimensions are inconsistent")

    @property
    def entity_count(self) -> int:
        return int(self.entity_re.shape[0])

    @property
    def relation_count(self) -> int:
        return int(self.relation_re.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entity_re.shape[1])

    def entities(self) -> np.ndarray:
        return self.entity_re.astype(np.float64) + 1j * self.entity_im.astype(np.float64)

    def relations(self) -> np.ndarray:
        return self.relation_re.astype(np.float64) + 1j * self.relation_im.astype(np.float64)

    @classmethod
    def from_complex(cls, entities: np.ndarray, relations: np.ndarray, relation_median: np.ndarray | None = None) -> "EmbeddingTable":
        return cls(entities.real, entities.imag, relations.real, relations.imag, relation_median)  # type: ignore[arg-type]


@dataclass(frozen=True)
class TrainResult:
    table: EmbeddingTable
    epoch_losses: list[float]


def _check_ids(table: EmbeddingTable, h: int, r: int, t: int | None = None) -> None:
    for value, bound, label in ((h, table.entity_count, "entity"), (r, table.relation_count, "relation"), (t, table.entity_count, "entity")):
        if value is not None and not 0 <= value < bound:
            raise BoundsError(f"{label} id {value} outside [0, {bound})")


def score(table: EmbeddingTable, h: int, r: int, t: int) -> float:
    """Re(sum_k e_h[k] * w_r[k] * conj(e_t[k]))."""
    _check_ids(table, h, r, t)
    e_h = table.entity_re[h].astype(np.float64) + 1j * table.entity_im[h].astype(np.float64)
    w_r = table.relation_re[r].astype(np.float64) + 1j * table.relation_im[r].astype(np.float64)
    e_t = table.entity_re[t].astype(np.float64) + 1j * table.entity_im[t].astype(np.float64)
    return float(np.real(np.sum(e_h * w_r * np.conj(e_t))))


def score_row(table: EmbeddingTable, h: int, r: int) -> np.ndarray:
    """Scores of (h, r, t) for every tail t."""
    _check_ids(table, h, r)
    q = (table.entity_re[h].astype(np.float64) + 1j * table.entity_im[h].astype(np.float64)) * (
        table.relation_re[r].astype(np.float64) + 1j * table.relation_im[r].astype(np.float64)
    )
    return table.entity_re.astype(np.float64) @ q.real + table.entity_im.astype(np.float64) @ q.imag


def triple_scores(entities: np.ndarray, relations: np.ndarray, triples: np.ndarray) -> np.ndarray:
    """Vectorized scores for an (..., 3) integer array of triples over complex parameter arrays."""
    h = entities[triples[..., 0]]
    w = relations[triples[..., 1]]
    t = entities[triples[..., 2]]
    return np.real(np.sum(h * w * np.conj(t), axis=-1))


def _accumulate(grad_ent: np.ndarray, grad_rel: np.ndarray, entities: np.ndarray, relations: np.ndarray, triples: np.ndarray, coeff: np.ndarray) -> None:
    """Add coeff * d score / d params for each triple; gradients are d/dre + i d/dim."""
    flat = triples.reshape(-1, 3)
    c = coeff.reshape(-1, 1)
    h = entities[flat[:, 0]]
    w = relations[flat[:, 1]]
    t = entities[flat[:, 2]]
    np.add.at(grad_ent, flat[:, 0], c * np.conj(w) * t)
    np.add.at(grad_rel, flat[:, 1], c * np.conj(h) * t)
    np.add.at(grad_ent, flat[:, 2], c * h * w)


def batch_objective(
    entities: np.ndarray,
    relations: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    config: TrainConfig,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Summed batch loss (with L2 on touched rows), per-positive data losses, and complex gradients."""
    grad_ent = np.zeros_like(entities)
    grad_rel = np.zeros_like(relations)
    gamma, k = config.gamma, negatives.shape[1]

    if config.loss == "cross_entropy":
        h = entities[positives[:, 0]]
        w = relations[positives[:, 1]]
        q = h * w
        logits = q.real @ entities.real.T + q.imag @ entities.imag.T
        log_z = logsumexp(logits, axis=1)
        rows = np.arange(positives.shape[0])
        losses = log_z - logits[rows, positives[:, 2]]
        coeff = softmax(logits, axis=1)
        coeff[rows, positives[:, 2]] -= 1.0
        grad_q = coeff @ entities
        np.add.at(grad_ent, positives[:, 0], np.conj(w) * grad_q)
        np.add.at(grad_rel, positives[:, 1], np.conj(h) * grad_q)
        grad_ent += coeff.T @ q
        touched_entities = np.unique(positives[:, [0, 2]])
    else:
        s_pos = triple_scores(entities, relations, positives)
        s_neg = triple_scores(entities, relations, negatives)
        if config.loss == "logsigmoid":
            losses = -log_expit(gamma + s_pos) - log_expit(-(s_neg + gamma)).sum(axis=1) / k
            c_pos = -expit(-(gamma + s_pos))
            c_neg = expit(s_neg + gamma) / k
        else:
            hinge = gamma - s_pos[:, None] + s_neg
            active = (hinge > 0).astype(np.float64)
            losses = np.maximum(hinge, 0.0).sum(axis=1) / k
            c_pos = -active.sum(axis=1) / k
            c_neg = active / k
        _accumulate(grad_ent, grad_rel, entities, relations, positives, c_pos)
        _accumulate(grad_ent, grad_rel, entities, relations, negatives, c_neg)
        touched_entities = np.unique(np.concatenate([positives[:, [0, 2]].ravel(), negatives[..., [0, 2]].ravel()]))

    touched_relations = np.unique(positives[:, 1])
    reg = config.l2 * (
        np.sum(np.abs(entities[touched_entities]) ** 2) + np.sum(np.abs(relations[touched_relations]) ** 2)
    )
    grad_ent[touched_entities] += 2.0 * config.l2 * entities[touched_entities]
    grad_rel[touched_relations] += 2.0 * config.l2 * relations[touched_relations]
    return float(losses.sum() + reg), losses, grad_ent, grad_rel


def corrupt(
    positives: np.ndarray, k: int, graph: KnowledgeGraph, rng: np.random.Generator, known: np.ndarray | None = None
) -> np.ndarray:
    """k head-or-tail corruptions per positive, resampled away from known training triples."""
    n_ent, n_rel = graph.entity_count, graph.relation_count
    known = graph.triple_keys() if known is None else known
    negatives = np.repeat(positives[:, None, :], k, axis=1)
    replace_head = rng.random((positives.shape[0], k)) < 0.5
    todo = np.ones(replace_head.shape, dtype=bool)
    for _ in range(NEGATIVE_RESAMPLE_ROUNDS):
        draws = rng.integers(n_ent, size=replace_head.shape)
        negatives[..., 0] = np.where(todo & replace_head, draws, negatives[..., 0])
        negatives[..., 2] = np.where(todo & ~replace_head, draws, negatives[..., 2])
        keys = (negatives[..., 0] * n_rel + negatives[..., 1]) * n_ent + negatives[..., 2]
        todo = np.isin(keys, known)
        if not todo.any():
            break
    return negatives


def relation_medians(table: EmbeddingTable, graph: KnowledgeGraph) -> np.ndarray:
    """Median training-positive score per relation; NaN for relations without positives."""
    scores = triple_scores(table.entities(), table.relations(), graph.triples)
    frame = pd.DataFrame({"relation": graph.triples[:, 1], "score": scores})
    medians = frame.groupby("relation")["score"].median().reindex(range(graph.relation_count))
    return medians.to_numpy(dtype=np.float64)


def train(
    graph: KnowledgeGraph,
    config: TrainConfig,
    *,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    if len(graph) == 0:
        raise InvalidInputError("Cannot train on an empty graph")
    n_ent, n_rel, d = graph.entity_count, graph.relation_count, config.dim
    init = make_rng(config.seed, "init")
    scale = config.scale
    parts = [init.uniform(-scale, scale, size=shape) for shape in ((n_ent, d), (n_ent, d), (n_rel, d), (n_rel, d))]
    # parameters round-trip through float32 so a zero-epoch run equals its saved table
    entities = parts[0].astype(np.float32).astype(np.float64) + 1j * parts[1].astype(np.float32).astype(np.float64)
    relations = parts[2].astype(np.float32).astype(np.float64) + 1j * parts[3].astype(np.float32).astype(np.float64)

    order_rng = make_rng(config.seed, "shuffle")
    negative_rng = make_rng(config.seed, "negatives")
    triples = np.asarray(graph.triples)
    known = graph.triple_keys()
    epoch_losses: list[float] = []

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(triples.shape[0])
        total = 0.0
        for batch_index, start in enumerate(range(0, order.shape[0], config.batch_size)):
            positives = triples[order[start : start + config.batch_size]]
            negatives = corrupt(positives, config.negatives, graph, negative_rng, known)
            objective, losses, grad_ent, grad_rel = batch_objective(entities, relations, positives, negatives, config)
            if not np.isfinite(objective):
                raise TrainingDivergedError("Non-finite training loss", epoch=epoch, batch_index=batch_index)
            entities -= config.lr * grad_ent
            relations -= config.lr * grad_rel
            if not (np.isfinite(entities).all() and np.isfinite(relations).all()):
                raise TrainingDivergedError("Non-finite embeddings after update", epoch=epoch, batch_index=batch_index)
            total += float(losses.sum())
        mean_loss = total / triples.shape[0]
        epoch_losses.append(mean_loss)
        logger.info("epoch %d/%d mean loss %.6f", epoch, config.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    table = EmbeddingTable.from_complex(entities, relations)
    table.relation_median = relation_medians(table, graph).astype(np.float32)
    return TrainResult(table=table, epoch_losses=epoch_losses)


def save_embeddings(table: EmbeddingTable, path: Path) -> None:
    parts = [
        EMBEDDING_MAGIC,
        struct.pack("<3I", table.entity_count, table.relation_count, table.dim),
        table.entity_re.astype("<f4").tobytes(),
        table.entity_im.astype("<f4").tobytes(),
        table.relation_re.astype("<f4").tobytes(),
        table.relation_im.astype("<f4").tobytes(),
        table.relation_median.astype("<f4").tobytes(),
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_embeddings(path: Path) -> EmbeddingTable:
    if not path.exists():
        raise InvalidInputError(f"Required file not found: {path}")
    payload = path.read_bytes()
    header = len(EMBEDDING_MAGIC) + 12
    if len(payload) < header or payload[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise FormatError(f"Not an embedding file (bad magic or header): {path}")
    n_ent, n_rel, d = struct.unpack("<3I", payload[len(EMBEDDING_MAGIC) : header])
    sizes = [n_ent * d, n_ent * d, n_rel * d, n_rel * d, n_rel]
    if len(payload) != header + 4 * sum(sizes):
        raise FormatError(f"Embedding file size disagrees with its header: {path}")
    arrays = []
    offset = header
    for size in sizes:
        arrays.append(np.frombuffer(payload, dtype="<f4", count=size, offset=offset).astype(np.float32))
        offset += 4 * size
    ent_re, ent_im, rel_re, rel_im, medians = arrays
    return EmbeddingTable(
        ent_re.reshape(n_ent, d), ent_im.reshape(n_ent, d), rel_re.reshape(n_rel, d), rel_im.reshape(n_rel, d), medians
    )


class CalibratedScorer:
    """[0,1] rows sigma(beta * (score - mu_r)) with observed training edges forced to 1."""

    name = "calibrated"

    def __init__(self, table: EmbeddingTable, g_train: KnowledgeGraph, beta: float = 1.0) -> None:
        if table.entity_count != g_train.entity_count or table.relation_count != g_train.relation_count:
            raise InvalidStateError("Embedding table does not match the graph dictionaries")
        self.table = table
        self.g_train = g_train
        self.beta = float(beta)
        self.entity_count = table.entity_count
        self.relation_count = table.relation_count
        centers = table.relation_median.astype(np.float64)
        missing = np.flatnonzero(~np.isfinite(centers))
        if missing.size:
            positives = triple_scores(table.entities(), table.relations(), g_train.triples) if len(g_train) else np.zeros(1)
            fallback = float(np.median(positives))
            logger.warning("%d relation(s) without training positives; using global median %.6f", missing.size, fallback)
            centers[missing] = fallback
        self.centers = centers

    def row(self, relation: int, head: int) -> np.ndarray:
        values = np.clip(expit(self.beta * (score_row(self.table, head, relation) - self.centers[relation])), 0.0, 1.0)
        values[self.g_train.neighbors(relation, head, "fwd")] = 1.0
        return values


def calibrate(table: EmbeddingTable, h: int, r: int, g_train: KnowledgeGraph, beta: float = 1.0) -> np.ndarray:
    return CalibratedScorer(table, g_train, beta).row(r, h)
