"""End-to-end tests of the ngdb command line on temporary directories."""

from __future__ import annotations

import contextlib
import io
import json
import sys
import tempfile
import unittest
from pathlib import Path

import pandas as pd

sys.path.append(str(Path(__file__).resolve().parents[1] / "scripts"))

from graph_fixtures import CAMPUS_DIR, campus_query, campus_stack, read_ranks, serialize_line  # noqa: E402
from ngdb import RunConfig, load_run_config, main  # noqa: E402
from pipeline_utils import InvalidInputError  # noqa: E402
from query_ast import QueryAtom, QueryGraph, QueryInstance, QueryNode  # noqa: E402
from symbolic_engine import label_answers  # noqa: E402


def quiet_main(argv: list[str]) -> tuple[int, str]:
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout):
        code = main(argv)
    return code, stdout.getvalue()


class CliTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.graph_dir = self.tmp / "graph"
        self.stack = campus_stack()

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def ingest_campus(self) -> int:
        return main(
            [
                "ingest",
                "--train", str(CAMPUS_DIR / "train.tsv"),
                "--valid", str(CAMPUS_DIR / "valid.tsv"),
                "--test", str(CAMPUS_DIR / "test.tsv"),
                "--out", str(self.graph_dir),
            ]
        )

    def write_campus_queries(self) -> Path:
        query = campus_query(self.stack)
        labels = label_answers(query, self.stack.train, self.stack.test)
        instance = QueryInstance("campus", "ip", query, labels.easy, labels.hard)
        path = self.tmp / "queries.jsonl"
        path.write_text(serialize_line(instance, self.stack.entities, self.stack.relations) + "\n", encoding="utf-8")
        return path

    def write_negation_query(self) -> Path:
        e, r = self.stack.entities.encode, self.stack.relations.encode
        query = QueryGraph(
            nodes=(QueryNode(0, "anchor", e("TuringAward")), QueryNode(1, "anchor", e("DeepLearning")), QueryNode(2, "target")),
            atoms=(QueryAtom(0, r("win"), 2), QueryAtom(1, r("field"), 2, negated=True)),
            target=2,
            pattern="2in",
        )
        path = self.tmp / "negation.jsonl"
        instance = QueryInstance("neg", "2in", query, frozenset(), frozenset())
        path.write_text(serialize_line(instance, self.stack.entities, self.stack.relations) + "\n", encoding="utf-8")
        return path

    def write_config(self, payload: dict) -> Path:
        path = self.tmp / "config.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path


class IngestCommandTests(CliTestCase):
    def test_campus_summary_and_determinism(self) -> None:
        self.assertEqual(self.ingest_campus(), 0)
        first = (self.graph_dir / "graph.bin").read_bytes()
        summary = json.loads((self.graph_dir / "graph_summary.json").read_text(encoding="utf-8"))
        self.assertEqual(summary["relations"], 3)
        self.assertEqual(summary["triples"], {"train": 3, "valid": 3, "test": 9})
        self.assertEqual(self.ingest_campus(), 0)
        self.assertEqual((self.graph_dir / "graph.bin").read_bytes(), first)

    def test_train_only(self) -> None:
        code = main(["ingest", "--train", str(CAMPUS_DIR / "train.tsv"), "--out", str(self.graph_dir)])
        self.assertEqual(code, 0)
        summary = json.loads((self.graph_dir / "graph_summary.json").read_text(encoding="utf-8"))
        self.assertEqual(summary["triples"], {"train": 3, "valid": 3, "test": 3})

    def test_parse_error_exit_code(self) -> None:
        bad = self.tmp / "bad.tsv"
        bad.write_text("a\tr\n", encoding="utf-8")
        self.assertEqual(main(["ingest", "--train", str(bad), "--out", str(self.graph_dir)]), 2)


class SampleCommandTests(CliTestCase):
    def test_zero_counts_give_empty_outputs(self) -> None:
        self.ingest_campus()
        config = self.write_config({"sampler": {"counts": {}}})
        out = self.tmp / "queries"
        code = main(["sample", "--config", str(config), "--graph-dir", str(self.graph_dir), "--out", str(out)])
        self.assertEqual(code, 0)
        self.assertEqual((out / "test-queries.jsonl").read_text(encoding="utf-8"), "")
        stats = json.loads((out / "stats.json").read_text(encoding="utf-8"))
        self.assertEqual(stats["format_version"], 1)
        self.assertEqual(stats["splits"]["test"]["total"], 0)

    def test_campus_one_hop_queries(self) -> None:
        self.ingest_campus()
        config = self.write_config({"sampler": {"counts": {"train": {"1p": 2}, "test": {"1p": 2}}}})
        out = self.tmp / "queries"
        code = main(["sample", "--config", str(config), "--graph-dir", str(self.graph_dir), "--out", str(out), "--seed", "3"])
        self.assertEqual(code, 0)
        lines = (out / "test-queries.jsonl").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 2)
        for line in lines:
            self.assertTrue(json.loads(line)["hard"])
        self.assertEqual(json.loads((out / "stats.json").read_text(encoding="utf-8"))["seed"], 3)

    def test_exhaustion_exit_code(self) -> None:
        self.ingest_campus()
        config = self.write_config({"sampler": {"counts": {"test": {"3p": 1}}, "max_attempts": 5}})
        out = self.tmp / "queries"
        code = main(["sample", "--config", str(config), "--graph-dir", str(self.graph_dir), "--out", str(out)])
        self.assertEqual(code, 3)
        self.assertFalse((out / "stats.json").exists())


class TrainCommandTests(CliTestCase):
    def train(self, out: Path, *extra: str) -> int:
        return main(["train", "--graph-dir", str(self.graph_dir), "--out", str(out), "--dim", "4", "--seed", "1", *extra])

    def test_artifacts_and_determinism(self) -> None:
        self.ingest_campus()
        self.assertEqual(self.train(self.tmp / "a", "--epochs", "3"), 0)
        self.assertEqual(self.train(self.tmp / "b", "--epochs", "3"), 0)
        self.assertEqual((self.tmp / "a" / "embeddings.bin").read_bytes(), (self.tmp / "b" / "embeddings.bin").read_bytes())
        curve = pd.read_csv(self.tmp / "a" / "loss_curve.csv")
        self.assertEqual(list(curve.columns), ["epoch", "mean_loss"])
        self.assertEqual(curve["epoch"].tolist(), [1, 2, 3])

    def test_divergence_exit_code(self) -> None:
        self.ingest_campus()
        self.assertEqual(self.train(self.tmp / "m", "--epochs", "5", "--lr", "1e300", "--l2", "0"), 4)


class AnswerCommandTests(CliTestCase):
    def answer(self, queries: Path, *extra: str) -> tuple[int, list[dict]]:
        out = self.tmp / "answers.jsonl"
        code = main(["answer", "--queries", str(queries), "--graph-dir", str(self.graph_dir), "--out", str(out), *extra])
        records = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()] if out.exists() else []
        return code, records

    def test_continuous_boolean_top_three(self) -> None:
        self.ingest_campus()
        code, records = self.answer(self.write_campus_queries(), "--engine", "continuous", "--top", "3")
        self.assertEqual(code, 0)
        top = records[0]["top"]
        self.assertEqual({item["entity"] for item in top}, {"UofT", "UdeM", "NYU"})
        self.assertEqual([item["score"] for item in top], [1.0, 1.0, 1.0])

    def test_symbolic_returns_easy_answers(self) -> None:
        self.ingest_campus()
        code, records = self.answer(self.write_campus_queries(), "--engine", "symbolic")
        self.assertEqual(code, 0)
        self.assertEqual([item["entity"] for item in records[0]["top"]], ["UofT"])

    def test_beam_with_negation_exit_code(self) -> None:
        self.ingest_campus()
        code, _ = self.answer(self.write_negation_query(), "--engine", "beam", "--k", "3")
        self.assertEqual(code, 5)

    def test_beam_without_width_is_rejected(self) -> None:
        self.ingest_campus()
        code, _ = self.answer(self.write_campus_queries(), "--engine", "beam")
        self.assertEqual(code, 2)

    def test_calibrated_scorer_from_trained_embeddings(self) -> None:
        self.ingest_campus()
        main(["train", "--graph-dir", str(self.graph_dir), "--out", str(self.tmp / "model"), "--dim", "4", "--epochs", "2"])
        code, records = self.answer(
            self.write_campus_queries(), "--embeddings", str(self.tmp / "model" / "embeddings.bin"), "--scorer", "materialized"
        )
        self.assertEqual(code, 0)
        self.assertEqual(records[0]["top"][0], {"entity": "UofT", "score": 1.0})


class EvalCommandTests(CliTestCase):
    def evaluate(self, *extra: str) -> tuple[int, str, dict]:
        report = self.tmp / "out" / "report.json"
        code, stdout = quiet_main(
            ["eval", "--queries", str(self.write_campus_queries()), "--graph-dir", str(self.graph_dir), "--report", str(report), *extra]
        )
        payload = json.loads(report.read_text(encoding="utf-8")) if report.exists() else {}
        return code, stdout, payload

    def test_full_knowledge_report(self) -> None:
        self.ingest_campus()
        code, stdout, payload = self.evaluate("--faithfulness")
        self.assertEqual(code, 0)
        self.assertEqual(payload["overall"]["micro"]["mrr"], 1.0)
        self.assertEqual(payload["patterns"]["ip"]["hard_answers"], 2)
        self.assertEqual(payload["format_version"], 1)
        self.assertEqual(payload["faithfulness_auc"], 0.5)
        self.assertIn("overall/micro", stdout)
        ranks = read_ranks(self.tmp / "out" / "ranks.parquet")
        self.assertEqual(ranks["rank"].tolist(), [1, 1])

    def test_symbolic_baseline_misses_hard_answers(self) -> None:
        self.ingest_campus()
        code, _, payload = self.evaluate("--engine", "symbolic")
        self.assertEqual(code, 0)
        self.assertEqual(payload["overall"]["micro"]["hits@1"], 0.0)
        self.assertEqual(payload["engine"], "symbolic")


class OracleCommandTests(CliTestCase):
    def test_answers_written_into_records(self) -> None:
        self.ingest_campus()
        out = self.tmp / "oracle.jsonl"
        code = main(["oracle", "--queries", str(self.write_campus_queries()), "--graph-dir", str(self.graph_dir), "--layer", "train", "--out", str(out)])
        self.assertEqual(code, 0)
        record = json.loads(out.read_text(encoding="utf-8"))
        self.assertEqual(record["answers"], ["UofT"])


class RunConfigTests(CliTestCase):
    def test_flags_override_file(self) -> None:
        config = self.write_config({"logic": "godel", "seed": 4, "train": {"dim": 8}})
        run = load_run_config(config, {"logic": "lukasiewicz", "seed": None}, {"epochs": 2})
        self.assertEqual(run.logic, "lukasiewicz")
        self.assertEqual(run.seed, 4)
        self.assertEqual((run.train.dim, run.train.epochs, run.train.seed), (8, 2, 4))
        self.assertEqual(run.sampler.seed, 4)

    def test_invalid_configs(self) -> None:
        with self.assertRaises(InvalidInputError):
            load_run_config(self.write_config({"logics": "godel"}))
        with self.assertRaises(InvalidInputError):
            load_run_config(self.write_config({"train": {"seed": 2}}))
        with self.assertRaises(InvalidInputError):
            RunConfig(engine="continuous", k=4)

    def test_shipped_config_loads(self) -> None:
        shipped = Path(__file__).resolve().parents[1] / "scripts" / "sample_config.json"
        run = load_run_config(shipped)
        self.assertEqual(run.sampler.count("train", "1p"), 50)
        self.assertEqual(run.train.dim, 16)


if __name__ == "__main__":
    unittest.main()
