"""Unit tests for query graphs, plans, rewrites and the JSONL codec."""

from __future__ import annotations

import json
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

sys.path.append(str(Path(__file__).resolve().parents[1] / "scripts"))

from graph_fixtures import campus_query, campus_stack, serialize_line, two_hop_union  # noqa: E402
from pipeline_utils import ParseError, UnsupportedPatternError, ValidationError  # noqa: E402
from query_ast import (  # noqa: E402
    PATTERNS,
    TRAINING_PATTERNS,
    QueryAtom,
    QueryGraph,
    QueryInstance,
    QueryNode,
    UnionGroup,
    classify,
    demorgan_union,
    parse,
    plan,
    read_queries,
    serialize,
    structure_graph,
    template,
    to_dnf,
    validate,
)

EXPECTED_CLASS = {
    "1p": "path",
    "2p": "path",
    "3p": "path",
    "2i": "tree",
    "3i": "tree",
    "ip": "tree",
    "pi": "tree",
    "2u": "tree",
    "up": "tree",
    "2in": "tree",
    "3in": "tree",
    "inp": "tree",
    "pni": "tree",
    "pin": "tree",
}


def ops(query: QueryGraph) -> list[str]:
    return [f"{s.op}{s.arity or ''}" for s in plan(query)]


class TemplateTests(unittest.TestCase):
    def test_fourteen_patterns_ten_for_training(self) -> None:
        self.assertEqual(len(PATTERNS), 14)
        self.assertEqual(len(TRAINING_PATTERNS), 10)
        self.assertTrue(set(TRAINING_PATTERNS).isdisjoint({"ip", "pi", "2u", "up"}))

    def test_template_classes(self) -> None:
        for pattern in PATTERNS:
            with self.subTest(pattern=pattern):
                query = template(pattern)
                validate(query)
                self.assertEqual(classify(query), EXPECTED_CLASS[pattern])

    def test_unknown_pattern(self) -> None:
        with self.assertRaises(UnsupportedPatternError):
            template("5p")


class ClassifyTests(unittest.TestCase):
    def test_dag_when_variable_fans_out(self) -> None:
        query = QueryGraph(
            nodes=(QueryNode(0, "anchor", 0), QueryNode(1, "var"), QueryNode(2, "target")),
            atoms=(QueryAtom(0, 0, 1), QueryAtom(1, 1, 2), QueryAtom(1, 2, 2)),
            target=2,
        )
        self.assertEqual(classify(query), "dag")

    def test_cyclic(self) -> None:
        query = QueryGraph(
            nodes=(QueryNode(0, "var"), QueryNode(1, "var"), QueryNode(2, "target")),
            atoms=(QueryAtom(0, 0, 1), QueryAtom(1, 0, 2), QueryAtom(2, 0, 0)),
            target=2,
        )
        self.assertEqual(classify(query), "cyclic")

    def test_structure_graph_keeps_parallel_atoms(self) -> None:
        graph = structure_graph(template("2in"))
        self.assertEqual(sorted(graph.nodes), [0, 1, 2])
        self.assertEqual(sorted(graph.edges(keys=True)), [(0, 2, 0), (1, 2, 1)])
        self.assertTrue(graph.edges[1, 2, 1]["negated"])
        parallel = QueryGraph(
            nodes=(QueryNode(0, "anchor", 0), QueryNode(1, "target")),
            atoms=(QueryAtom(0, 0, 1), QueryAtom(0, 1, 1)),
            target=1,
        )
        self.assertEqual(structure_graph(parallel).number_of_edges(0, 1), 2)
        self.assertEqual(classify(parallel), "tree")

    def test_plan_rejects_dag(self) -> None:
        query = QueryGraph(
            nodes=(QueryNode(0, "anchor", 0), QueryNode(1, "var"), QueryNode(2, "target")),
            atoms=(QueryAtom(0, 0, 1), QueryAtom(1, 1, 2), QueryAtom(1, 2, 2)),
            target=2,
        )
        with self.assertRaises(UnsupportedPatternError):
            plan(query)


class PlanTests(unittest.TestCase):
    def test_campus_plan_order(self) -> None:
        steps = plan(campus_query(campus_stack()))
        self.assertEqual([s.op for s in steps], ["anchor", "project", "anchor", "project", "intersect", "project"])
        self.assertEqual([s.atom for s in steps if s.op == "project"], [0, 1, 2])

    def test_negation_precedes_intersection(self) -> None:
        self.assertEqual(ops(template("2in")), ["anchor", "project", "anchor", "project", "negate", "intersect2"])

    def test_union_group_lowered_to_union(self) -> None:
        self.assertEqual(ops(template("2u")), ["anchor", "project", "anchor", "project", "union2"])
        self.assertEqual(ops(template("up")), ["anchor", "project", "anchor", "project", "union2", "project"])

    def test_demorgan_lowering(self) -> None:
        self.assertEqual(
            ops(demorgan_union(template("2u"))),
            ["anchor", "project", "negate", "anchor", "project", "negate", "intersect2", "negate"],
        )

    def test_pni_negates_whole_branch(self) -> None:
        self.assertEqual(
            ops(template("pni")),
            ["anchor", "project", "project", "negate", "anchor", "project", "intersect2"],
        )

    def test_multi_hop_union_branches_merge_once(self) -> None:
        query = two_hop_union(0, 1, 0, 1)
        self.assertEqual(classify(query), "tree")
        steps = plan(query)
        self.assertEqual(ops(query), ["anchor", "project", "project", "anchor", "project", "project", "union2"])
        self.assertEqual([s.atom for s in steps if s.op == "project"], [0, 1, 2, 3])
        self.assertEqual(
            ops(demorgan_union(query)),
            ["anchor", "project", "project", "negate", "anchor", "project", "project", "negate", "intersect2", "negate"],
        )


class ValidationTests(unittest.TestCase):
    def test_negation_must_feed_intersection(self) -> None:
        query = QueryGraph(
            nodes=(QueryNode(0, "anchor", 0), QueryNode(1, "target")),
            atoms=(QueryAtom(0, 0, 1, negated=True),),
            target=1,
        )
        with self.assertRaises(ValidationError):
            validate(query)

    def test_dangling_reference(self) -> None:
        query = QueryGraph(nodes=(QueryNode(0, "anchor", 0), QueryNode(1, "target")), atoms=(QueryAtom(0, 0, 9),), target=1)
        with self.assertRaises(ValidationError):
            validate(query)

    def test_self_loop_and_empty_union(self) -> None:
        loop = QueryGraph(nodes=(QueryNode(0, "anchor", 0), QueryNode(1, "target")), atoms=(QueryAtom(1, 0, 1),), target=1)
        with self.assertRaises(ValidationError):
            validate(loop)
        empty = replace(template("2u"), unions=(UnionGroup(()),))
        with self.assertRaises(ValidationError):
            validate(empty)

    def test_ungrounded_rejected_when_required(self) -> None:
        with self.assertRaises(ValidationError):
            validate(template("1p"), require_grounded=True)


class RewriteTests(unittest.TestCase):
    def test_dnf_branch_count_is_product_of_groups(self) -> None:
        query = QueryGraph(
            nodes=(
                QueryNode(0, "anchor", 0),
                QueryNode(1, "anchor", 1),
                QueryNode(2, "anchor", 2),
                QueryNode(3, "anchor", 3),
                QueryNode(4, "target"),
            ),
            atoms=(QueryAtom(0, 0, 4), QueryAtom(1, 0, 4), QueryAtom(2, 1, 4), QueryAtom(3, 1, 4)),
            target=4,
            unions=(UnionGroup(((0,), (1,))), UnionGroup(((2,), (3,)))),
        )
        branches = to_dnf(query)
        self.assertEqual(len(branches), 4)
        self.assertEqual([[a.head for a in b.atoms] for b in branches], [[0, 2], [0, 3], [1, 2], [1, 3]])
        for branch in branches:
            self.assertEqual(branch.unions, ())
            self.assertEqual(len(branch.nodes), 3)

    def test_dnf_of_up_prunes_other_anchor(self) -> None:
        branches = to_dnf(template("up"))
        self.assertEqual([len(b.atoms) for b in branches], [2, 2])
        self.assertEqual([classify(b) for b in branches], ["path", "path"])

    def test_conjunctive_query_unchanged(self) -> None:
        query = template("2i")
        self.assertEqual(to_dnf(query), [query])
        self.assertIs(demorgan_union(query), query)


class CodecTests(unittest.TestCase):
    def setUp(self) -> None:
        self.stack = campus_stack()
        self.instance = QueryInstance(
            qid="campus",
            pattern="ip",
            query=campus_query(self.stack),
            easy=frozenset({self.stack.entities.encode("UofT")}),
            hard=frozenset({self.stack.entities.encode("UdeM"), self.stack.entities.encode("NYU")}),
        )

    def test_record_schema(self) -> None:
        record = serialize(self.instance, self.stack.entities, self.stack.relations)
        self.assertEqual(list(record), ["id", "pattern", "nodes", "atoms", "unions", "easy", "hard"])
        self.assertEqual(record["nodes"][0], {"id": 0, "kind": "anchor", "entity": "TuringAward"})
        self.assertEqual(record["atoms"][2], {"head": 2, "rel": "university", "tail": 3, "neg": False})
        self.assertEqual(record["easy"], ["UofT"])

    def test_parse_restores_instance(self) -> None:
        line = serialize_line(self.instance, self.stack.entities, self.stack.relations)
        parsed = parse(line, self.stack.entities, self.stack.relations)
        self.assertEqual(parsed.query, self.instance.query)
        self.assertEqual(parsed.hard, self.instance.hard)

    def test_demorgan_mode_is_written(self) -> None:
        e, r = self.stack.entities.encode, self.stack.relations.encode
        query = demorgan_union(
            QueryGraph(
                nodes=(QueryNode(0, "anchor", e("TuringAward")), QueryNode(1, "anchor", e("DeepLearning")), QueryNode(2, "target")),
                atoms=(QueryAtom(0, r("win"), 2), QueryAtom(1, r("field"), 2)),
                target=2,
                unions=(UnionGroup(((0,), (1,))),),
            )
        )
        record = serialize(QueryInstance("u", "2u", query), self.stack.entities, self.stack.relations)
        self.assertEqual(record["union_modes"], ["demorgan"])
        parsed = parse(json.dumps(record), self.stack.entities, self.stack.relations)
        self.assertEqual(parsed.query.unions[0].mode, "demorgan")

    def test_schema_violation_names_field_path(self) -> None:
        record = serialize(self.instance, self.stack.entities, self.stack.relations)
        record["atoms"][1]["neg"] = "no"
        with self.assertRaises(ParseError) as ctx:
            parse(json.dumps(record), self.stack.entities, self.stack.relations)
        self.assertIn("atoms[1].neg", str(ctx.exception))

    def test_unknown_entity_and_dangling_node(self) -> None:
        record = serialize(self.instance, self.stack.entities, self.stack.relations)
        bad_entity = json.loads(json.dumps(record))
        bad_entity["nodes"][0]["entity"] = "Nobody"
        with self.assertRaises(ValidationError):
            parse(json.dumps(bad_entity), self.stack.entities, self.stack.relations)
        record["atoms"][0]["tail"] = 42
        with self.assertRaises(ValidationError):
            parse(json.dumps(record), self.stack.entities, self.stack.relations)

    def test_read_queries_reports_line(self) -> None:
        line = serialize_line(self.instance, self.stack.entities, self.stack.relations)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "q.jsonl"
            path.write_text(line + "\n{not json\n", encoding="utf-8")
            with self.assertRaises(ParseError) as ctx:
                read_queries(path, self.stack.entities, self.stack.relations)
        self.assertEqual(ctx.exception.line_no, 2)


if __name__ == "__main__":
    unittest.main()
