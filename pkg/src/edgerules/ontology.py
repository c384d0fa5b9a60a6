"""Concept graph used for query inference.

Tag values name concepts; transitive relations ("within", "subTypeOf") let a
query term like ``@location:Site1`` match a thing tagged ``location:Room1``
when Room1 lies within Site1 through any chain of edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import CycleDetected, DanglingEdge, ParseError
from .registry import normalize_tag_key

WITHIN = "within"
SUBTYPE_OF = "subTypeOf"
RELATIONS = (WITHIN, SUBTYPE_OF)

# Tag keys bound to a relation when the ontology file has no "relations" header.
DEFAULT_RELATIONS = {"location": WITHIN, "catalog": SUBTYPE_OF, "usage": SUBTYPE_OF}


@dataclass(slots=True)
class OntologyGraph:
    nodes: set[str] = field(default_factory=set)
    edges: list[tuple[str, str, str]] = field(default_factory=list)  # (child, relation, parent)
    relations_by_key: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_RELATIONS))
    _parents: dict[tuple[str, str], set[str]] = field(default_factory=dict)

    def add_edge(self, child: str, relation: str, parent: str) -> None:
        if relation not in RELATIONS:
            raise ParseError(f"unknown relation {relation!r}")
        if child not in self.nodes or parent not in self.nodes:
            missing = child if child not in self.nodes else parent
            raise DanglingEdge(f"edge endpoint {missing!r} is not a declared node")
        self.edges.append((child, relation, parent))
        self._parents.setdefault((child, relation), set()).add(parent)

    def ancestors(self, node: str, relation: str) -> set[str]:
        """Transitive closure of `relation` from `node`, excluding the node itself.

        Unknown nodes yield the empty set.
        """
        seen: set[str] = set()
        stack = list(self._parents.get((node, relation), ()))
        while stack:
            current = stack.pop()
            if current in seen:
                continue
            seen.add(current)
            stack.extend(self._parents.get((current, relation), ()))
        seen.discard(node)
        return seen

    def relation_for_key(self, key: str) -> str | None:
        return self.relations_by_key.get(normalize_tag_key(key))

    def validate_acyclic(self) -> None:
        """Each relation's edge set must be a DAG."""
        for relation in RELATIONS:
            adjacency: dict[str, list[str]] = {}
            for child, rel, parent in self.edges:
                if rel == relation:
                    adjacency.setdefault(child, []).append(parent)
            state: dict[str, int] = {}  # 1 = on stack, 2 = done

            def visit(start: str) -> None:
                stack = [(start, iter(adjacency.get(start, ())))]
                state[start] = 1
                while stack:
                    node, it = stack[-1]
                    advanced = False
                    for nxt in it:
                        if state.get(nxt) == 1:
                            raise CycleDetected(
                                f"relation {relation!r} has a cycle through {nxt!r}")
                        if nxt not in state:
                            state[nxt] = 1
                            stack.append((nxt, iter(adjacency.get(nxt, ()))))
                            advanced = True
                            break
                    if not advanced:
                        state[node] = 2
                        stack.pop()

            for node in adjacency:
                if node not in state:
                    visit(node)


def load_ontology(document: str) -> OntologyGraph:
    """Parse and validate an ontology document.

    Format: ``{"relations": {"location": "within", ...}, "nodes": [...],
    "edges": [{"child", "relation", "parent"}, ...]}``. All keys optional;
    an empty document yields an empty graph (inferred terms then behave as
    exact matches).
    """
    try:
        data = json.loads(document) if document.strip() else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise ParseError("ontology document must be a JSON object")

    graph = OntologyGraph()
    relations = data.get("relations")
    if relations is not None:
        if not isinstance(relations, dict):
            raise ParseError("relations must be an object")
        merged = dict(DEFAULT_RELATIONS)
        for key, rel in relations.items():
            if rel not in RELATIONS:
                raise ParseError(f"relations[{key!r}]: unknown relation {rel!r}")
            merged[normalize_tag_key(key)] = rel
        graph.relations_by_key = merged

    nodes = data.get("nodes", [])
    if not isinstance(nodes, list) or not all(isinstance(n, str) and n for n in nodes):
        raise ParseError("nodes must be an array of non-empty strings")
    graph.nodes = set(nodes)

    edges = data.get("edges", [])
    if not isinstance(edges, list):
        raise ParseError("edges must be an array")
    for i, raw in enumerate(edges):
        if not isinstance(raw, dict):
            raise ParseError(f"edges[{i}]: expected an object")
        try:
            child, relation, parent = raw["child"], raw["relation"], raw["parent"]
        except KeyError as exc:
            raise ParseError(f"edges[{i}]: missing {exc.args[0]!r}") from exc
        if child == parent:
            raise CycleDetected(f"edges[{i}]: self-loop on {child!r}")
        graph.add_edge(child, relation, parent)

    graph.validate_acyclic()
    return graph


def load_ontology_file(path: str) -> OntologyGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return load_ontology(fh.read())
