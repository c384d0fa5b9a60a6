import json
import random

import pytest

from edgerules.errors import CycleDetected, DanglingEdge, ParseError
from edgerules.ontology import SUBTYPE_OF, WITHIN, load_ontology


def bfs_ancestors(edges, node, relation):
    """Independent reachability oracle over the raw edge list."""
    frontier = [node]
    seen = set()
    while frontier:
        current = frontier.pop()
        for child, rel, parent in edges:
            if rel == relation and child == current and parent not in seen:
                seen.add(parent)
                frontier.append(parent)
    seen.discard(node)
    return seen


THREE_LEVEL = json.dumps({
    "nodes": ["Room1", "Floor1", "Site1"],
    "edges": [
        {"child": "Room1", "relation": "within", "parent": "Floor1"},
        {"child": "Floor1", "relation": "within", "parent": "Site1"},
    ],
})


def test_three_node_graph():
    graph = load_ontology(THREE_LEVEL)
    assert graph.nodes == {"Room1", "Floor1", "Site1"}
    assert len(graph.edges) == 2


def test_ancestors_expected_values():
    graph = load_ontology(THREE_LEVEL)
    # Frozen from the BFS oracle below.
    edges = [("Room1", WITHIN, "Floor1"), ("Floor1", WITHIN, "Site1")]
    assert bfs_ancestors(edges, "Room1", WITHIN) == {"Floor1", "Site1"}
    assert graph.ancestors("Room1", WITHIN) == {"Floor1", "Site1"}
    assert graph.ancestors("Site1", WITHIN) == set()
    assert graph.ancestors("NoSuchNode", WITHIN) == set()
    assert graph.ancestors("Room1", SUBTYPE_OF) == set()


def test_empty_document_gives_empty_graph():
    graph = load_ontology("")
    assert graph.nodes == set() and graph.edges == []
    assert graph.ancestors("X", WITHIN) == set()


def test_self_loop_rejected():
    doc = json.dumps({"nodes": ["Room1"],
                      "edges": [{"child": "Room1", "relation": "within", "parent": "Room1"}]})
    with pytest.raises(CycleDetected):
        load_ontology(doc)


def test_long_cycle_rejected():
    doc = json.dumps({"nodes": ["A", "B", "C"], "edges": [
        {"child": "A", "relation": "within", "parent": "B"},
        {"child": "B", "relation": "within", "parent": "C"},
        {"child": "C", "relation": "within", "parent": "A"},
    ]})
    with pytest.raises(CycleDetected):
        load_ontology(doc)


def test_dangling_edge_rejected():
    doc = json.dumps({"nodes": ["A"],
                      "edges": [{"child": "A", "relation": "within", "parent": "Ghost"}]})
    with pytest.raises(DanglingEdge):
        load_ontology(doc)


def test_bad_json_and_bad_relation():
    with pytest.raises(ParseError):
        load_ontology("{nope")
    with pytest.raises(ParseError):
        load_ontology(json.dumps({"relations": {"location": "besides"}}))


def test_relation_header_and_defaults():
    graph = load_ontology(json.dumps({"relations": {"zone": "within"}}))
    assert graph.relation_for_key("zone") == WITHIN
    assert graph.relation_for_key("loc") == WITHIN
    assert graph.relation_for_key("location") == WITHIN
    assert graph.relation_for_key("usage") == SUBTYPE_OF
    assert graph.relation_for_key("nothing") is None


def random_dag(rng, max_nodes=30):
    """Random DAG: edges only from lower-numbered to higher-numbered nodes."""
    n = rng.randint(1, max_nodes)
    nodes = [f"N{i}" for i in range(n)]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.08:
                relation = WITHIN if rng.random() < 0.7 else SUBTYPE_OF
                edges.append({"child": nodes[i], "relation": relation, "parent": nodes[j]})
    return nodes, edges


def test_ancestors_matches_bfs_oracle_on_random_dags():
    rng = random.Random(42)
    for _ in range(60):
        nodes, edges = random_dag(rng)
        graph = load_ontology(json.dumps({"nodes": nodes, "edges": edges}))
        edge_tuples = [(e["child"], e["relation"], e["parent"]) for e in edges]
        for node in nodes:
            for relation in (WITHIN, SUBTYPE_OF):
                assert graph.ancestors(node, relation) == bfs_ancestors(
                    edge_tuples, node, relation), (node, relation)
