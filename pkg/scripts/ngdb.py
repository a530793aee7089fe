"""Neural graph database command line: ingest, sample, train, answer, eval and oracle.

Exit codes: 0 ok, 2 parse/validation, 3 sampling exhausted, 4 training diverged,
5 unsupported pattern or operator.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import pandas as pd

from evaluation import cardinality_metrics, evaluate, faithfulness_auc
from fuzzy_engine import (
    DEFAULT_CACHE_ROWS,
    DEFAULT_EPSILON,
    LOGICS,
    UNION_STRATEGIES,
    BeamEngine,
    BooleanScorer,
    ContinuousEngine,
    MaterializedScorer,
    Scorer,
    ranked,
)
from kg_store import LAYERS, GraphStack, ingest_triples, load_store, save_store
from link_predictor import CalibratedScorer, TrainConfig, load_embeddings, save_embeddings, train
from pipeline_utils import (
    EXIT_OK,
    FORMAT_VERSION,
    InvalidInputError,
    NGDBError,
    get_logger,
    sha256,
    write_dataframe_with_parquet_fallback,
    write_json,
    write_jsonl,
)
from query_ast import serialize, read_queries
from sampler import SampleConfig, sample_dataset
from symbolic_engine import SymbolicBaseline, answer

ENGINES = ("symbolic", "continuous", "beam")
SCORERS = ("auto", "boolean", "calibrated", "materialized")
GRAPH_FILE = "graph.bin"
EMBEDDING_FILE = "embeddings.bin"


@dataclass(frozen=True)
class RunConfig:
    graph_dir: str = "out/graph"
    out_dir: str = "out"
    seed: int = 0
    engine: str = "continuous"
    logic: str = "product"
    k: int | None = None
    union: str = "tconorm"
    theta: float = 0.5
    epsilon: float = DEFAULT_EPSILON
    beta: float = 1.0
    cache_rows: int = DEFAULT_CACHE_ROWS
    scorer: str = "auto"
    scorer_layer: str = "test"
    top: int = 10
    sampler: SampleConfig = field(default_factory=SampleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        checks = [
            (self.engine in ENGINES, f"engine must be one of {', '.join(ENGINES)}"),
            (self.logic in LOGICS, f"logic must be one of {', '.join(LOGICS)}"),
            (self.union in UNION_STRATEGIES, f"union must be one of {', '.join(UNION_STRATEGIES)}"),
            (self.scorer in SCORERS, f"scorer must be one of {', '.join(SCORERS)}"),
            (self.scorer_layer in LAYERS, f"scorer_layer must be one of {', '.join(LAYERS)}"),
            (0.0 < self.theta < 1.0, "theta must lie in (0, 1)"),
            (self.epsilon >= 0.0, "epsilon must be >= 0"),
            (self.beta > 0.0, "beta must be positive"),
            (self.cache_rows >= 1, "cache_rows must be >= 1"),
            (self.top >= 1, "top must be >= 1"),
            (self.seed >= 0, "seed must be non-negative"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidInputError(message)
        if self.engine == "beam" and (self.k is None or self.k < 1):
            raise InvalidInputError("engine=beam requires a beam width k >= 1")
        if self.engine != "beam" and self.k is not None:
            raise InvalidInputError("beam width k is only valid with engine=beam")


_TOP_LEVEL = {f.name for f in fields(RunConfig)} - {"sampler", "train"}


def load_run_config(
    config_path: Path | None,
    flags: dict[str, Any] | None = None,
    train_flags: dict[str, Any] | None = None,
) -> RunConfig:
    """Merge a JSON config file with command-line overrides; flags win, unknown keys are rejected."""
    payload: dict[str, Any] = {}
    if config_path is not None:
        if not config_path.exists():
            raise InvalidInputError(f"Required file not found: {config_path}")
        try:
            payload = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{config_path}: invalid JSON: {exc.msg}") from exc
        if not isinstance(payload, dict):
            raise InvalidInputError(f"{config_path}: expected a JSON object")
    payload = dict(payload)
    sampler_payload = dict(payload.pop("sampler", {}))
    train_payload = dict(payload.pop("train", {}))
    unknown = sorted(set(payload) - _TOP_LEVEL)
    if unknown:
        raise InvalidInputError(f"Unknown config keys: {', '.join(unknown)}")
    for name, nested in (("sampler", sampler_payload), ("train", train_payload)):
        if "seed" in nested:
            raise InvalidInputError(f"Set the seed at the top level, not in {name}")

    top = {**payload, **{k: v for k, v in (flags or {}).items() if v is not None}}
    seed = int(top.get("seed", 0))
    sampler = SampleConfig.from_dict({**sampler_payload, "seed": seed})
    train_cfg = TrainConfig.from_dict(
        {**train_payload, **{k: v for k, v in (train_flags or {}).items() if v is not None}, "seed": seed}
    )
    return RunConfig(**top, sampler=sampler, train=train_cfg)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="Encode TSV triple files into a layered graph store.")
    ingest.add_argument("--train", type=Path, required=True)
    ingest.add_argument("--valid", type=Path, default=None)
    ingest.add_argument("--test", type=Path, default=None)
    ingest.add_argument("--out", type=Path, default=Path("out/graph"))
    ingest.set_defaults(func=run_ingest)

    sample = commands.add_parser("sample", help="Sample train/valid/test query datasets.")
    sample.add_argument("--config", type=Path, default=None)
    sample.add_argument("--graph-dir", type=Path, default=None)
    sample.add_argument("--out", type=Path, default=None)
    sample.add_argument("--seed", type=int, default=None)
    sample.set_defaults(func=run_sample)

    trainer = commands.add_parser("train", help="Train the ComplEx link predictor on the training layer.")
    trainer.add_argument("--config", type=Path, default=None)
    trainer.add_argument("--graph-dir", type=Path, default=None)
    trainer.add_argument("--out", type=Path, default=None)
    trainer.add_argument("--seed", type=int, default=None)
    trainer.add_argument("--dim", type=int, default=None)
    trainer.add_argument("--epochs", type=int, default=None)
    trainer.add_argument("--lr", type=float, default=None)
    trainer.add_argument("--negatives", type=int, default=None)
    trainer.add_argument("--gamma", type=float, default=None)
    trainer.add_argument("--batch-size", type=int, default=None)
    trainer.add_argument("--l2", type=float, default=None)
    trainer.add_argument("--loss", choices=("logsigmoid", "margin", "cross_entropy"), default=None)
    trainer.set_defaults(func=run_train)

    for name, func, help_text in (
        ("answer", run_answer, "Answer a query file with one engine and write the top entities."),
        ("eval", run_eval, "Evaluate an engine with filtered ranking metrics."),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, default=None)
        sub.add_argument("--queries", type=Path, required=True)
        sub.add_argument("--graph-dir", type=Path, default=None)
        sub.add_argument("--engine", choices=ENGINES, default=None)
        sub.add_argument("--logic", choices=LOGICS, default=None)
        sub.add_argument("--k", type=int, default=None)
        sub.add_argument("--union", choices=UNION_STRATEGIES, default=None)
        sub.add_argument("--embeddings", type=Path, default=None)
        sub.add_argument("--scorer", choices=SCORERS, default=None)
        sub.add_argument("--scorer-layer", choices=LAYERS, default=None)
        sub.add_argument("--epsilon", type=float, default=None)
        sub.add_argument("--beta", type=float, default=None)
        sub.add_argument("--cache-rows", type=int, default=None)
        sub.set_defaults(func=func)
        if name == "answer":
            sub.add_argument("--top", type=int, default=None)
            sub.add_argument("--out", type=Path, default=None)
        else:
            sub.add_argument("--report", type=Path, default=None)
            sub.add_argument("--faithfulness", action="store_true")
            sub.add_argument("--cardinality", action="store_true")
            sub.add_argument("--theta", type=float, default=None)

    oracle = commands.add_parser("oracle", help="Write exact answers into a query file.")
    oracle.add_argument("--queries", type=Path, required=True)
    oracle.add_argument("--graph-dir", type=Path, default=None)
    oracle.add_argument("--layer", choices=LAYERS, default="test")
    oracle.add_argument("--out", type=Path, required=True)
    oracle.set_defaults(func=run_oracle)

    return parser.parse_args(argv)


def _run_config(args: argparse.Namespace) -> RunConfig:
    flags = {
        name: getattr(args, name, None)
        for name in ("seed", "engine", "logic", "k", "union", "theta", "epsilon", "beta", "cache_rows", "scorer", "scorer_layer", "top")
    }
    if getattr(args, "graph_dir", None) is not None:
        flags["graph_dir"] = str(args.graph_dir)
    train_flags = {
        name: getattr(args, name, None)
        for name in ("dim", "epochs", "lr", "negatives", "gamma", "batch_size", "l2", "loss")
    }
    return load_run_config(getattr(args, "config", None), flags, train_flags)


def _load_stack(run: RunConfig) -> GraphStack:
    return load_store(Path(run.graph_dir) / GRAPH_FILE)


def run_ingest(args: argparse.Namespace) -> None:
    logger = get_logger("ingest")
    stack = ingest_triples(args.train, args.valid, args.test)
    store_path = args.out / GRAPH_FILE
    save_store(stack, store_path)
    summary = stack.summary()
    write_json(args.out / "graph_summary.json", {"format_version": FORMAT_VERSION, **summary})
    triples = summary["triples"]
    logger.info(
        "%d entities, %d relations, %d/%d/%d triples (train/valid/test)",
        summary["entities"],
        summary["relations"],
        triples["train"],  # type: ignore[index]
        triples["valid"],  # type: ignore[index]
        triples["test"],  # type: ignore[index]
    )
    logger.info("wrote %s sha256=%s", store_path, sha256(store_path))


def run_sample(args: argparse.Namespace) -> None:
    logger = get_logger("sample")
    run = _run_config(args)
    out_dir = args.out if args.out is not None else Path(run.out_dir) / "queries"
    stats = sample_dataset(run.sampler, _load_stack(run), out_dir)
    totals = {split: block["total"] for split, block in stats["splits"].items()}
    logger.info("wrote %s (train %d, valid %d, test %d)", out_dir, totals["train"], totals["valid"], totals["test"])


def run_train(args: argparse.Namespace) -> None:
    logger = get_logger("train")
    run = _run_config(args)
    stack = _load_stack(run)
    out_dir = args.out if args.out is not None else Path(run.out_dir) / "model"
    result = train(stack.train, run.train)
    embedding_path = out_dir / EMBEDDING_FILE
    save_embeddings(result.table, embedding_path)
    curve = pd.DataFrame(
        {"epoch": range(1, len(result.epoch_losses) + 1), "mean_loss": result.epoch_losses},
        columns=["epoch", "mean_loss"],
    )
    curve.to_csv(out_dir / "loss_curve.csv", index=False, float_format="%.10g")
    logger.info("wrote %s sha256=%s", embedding_path, sha256(embedding_path))


def build_scorer(run: RunConfig, stack: GraphStack, embeddings: Path | None) -> Scorer:
    kind = run.scorer
    if kind == "auto":
        kind = "calibrated" if embeddings is not None else "boolean"
    if kind == "boolean":
        return BooleanScorer(stack.layer(run.scorer_layer))
    if embeddings is None:
        raise InvalidInputError(f"scorer={kind} requires --embeddings")
    calibrated = CalibratedScorer(load_embeddings(embeddings), stack.train, run.beta)
    if kind == "materialized":
        return MaterializedScorer(calibrated, run.cache_rows)
    return calibrated


def build_engine(run: RunConfig, stack: GraphStack, embeddings: Path | None) -> Any:
    if run.engine == "symbolic":
        return SymbolicBaseline(stack.train)
    scorer = build_scorer(run, stack, embeddings)
    if run.engine == "beam":
        return BeamEngine(scorer, run.k, run.logic, epsilon=run.epsilon)  # type: ignore[arg-type]
    return ContinuousEngine(scorer, run.logic, union=run.union, epsilon=run.epsilon)


def run_answer(args: argparse.Namespace) -> None:
    logger = get_logger("answer")
    run = _run_config(args)
    stack = _load_stack(run)
    dataset = read_queries(args.queries, stack.entities, stack.relations)
    engine = build_engine(run, stack, args.embeddings)
    records = []
    for instance in dataset:
        top = ranked(engine.scores(instance.query))[: run.top]
        records.append(
            {
                "id": instance.qid,
                "pattern": instance.pattern,
                "top": [{"entity": stack.entities.decode(e), "score": s} for e, s in top],
            }
        )
    out_path = args.out if args.out is not None else Path(run.out_dir) / "answers.jsonl"
    count = write_jsonl(out_path, records)
    logger.info("answered %d queries with engine=%s logic=%s -> %s", count, run.engine, run.logic, out_path)


def run_eval(args: argparse.Namespace) -> None:
    logger = get_logger("eval")
    run = _run_config(args)
    stack = _load_stack(run)
    dataset = read_queries(args.queries, stack.entities, stack.relations)
    engine = build_engine(run, stack, args.embeddings)
    report = evaluate(dataset, engine)
    report.settings = {"logic": run.logic, "union": run.union, "epsilon": run.epsilon}
    if run.engine == "beam":
        report.settings["k"] = run.k
    if args.faithfulness:
        report.faithfulness_auc = faithfulness_auc(dataset, engine)
    if args.cardinality:
        report.cardinality = cardinality_metrics(dataset, engine, run.theta)

    report_path = args.report if args.report is not None else Path(run.out_dir) / "report.json"
    write_json(report_path, report.to_dict())
    write_dataframe_with_parquet_fallback(report.ranks, report_path.with_name("ranks.parquet"))
    print(report.format_table())
    logger.info("wrote %s", report_path)


def run_oracle(args: argparse.Namespace) -> None:
    logger = get_logger("oracle")
    run = _run_config(args)
    stack = _load_stack(run)
    graph = stack.layer(args.layer)
    dataset = read_queries(args.queries, stack.entities, stack.relations)
    records = (
        serialize(replace(inst, answers=answer(inst.query, graph)), stack.entities, stack.relations) for inst in dataset
    )
    count = write_jsonl(args.out, records)
    logger.info("answered %d queries exactly on layer %s -> %s", count, args.layer, args.out)


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    func: Callable[[argparse.Namespace], None] = args.func
    try:
        func(args)
    except NGDBError as exc:
        get_logger(args.command).error("%s", exc)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
