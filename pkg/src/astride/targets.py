"""Resolve free-text component names from analyzer replies to diagram elements."""

from __future__ import annotations

import re

from .dfd import DiagramGraph
from .rules import Target

_ARROW = re.compile(r"\s*(?:-->|->|→|=>)\s*")


def _norm(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


def normalize_target(name_or_id: str, graph: DiagramGraph) -> Target:
    """Map ``name_or_id`` to a node or edge, or return an unresolved Target.

    Matching order on the normalized text: exact node id, exact edge id,
    exact node label, exact edge label, then a node label that contains or is
    contained in the text, provided exactly one node qualifies. ``a -> b``
    style text resolves to the unique edge between the two resolved nodes.
    """
    raw = name_or_id if isinstance(name_or_id, str) else str(name_or_id)
    text = _norm(raw)
    if not text:
        return Target.unresolved(raw)

    for n in graph.nodes:
        if _norm(n.id) == text:
            return Target.node(n.id)
    for e in graph.edges:
        if _norm(e.id) == text:
            return Target.edge(e.id)

    parts = _ARROW.split(raw.strip())
    if len(parts) == 2 and all(parts):
        src, dst = (normalize_target(p, graph) for p in parts)
        if src.kind == dst.kind == "node":
            hits = [e for e in graph.edges if e.source == src.id and e.target == dst.id]
            if len(hits) == 1:
                return Target.edge(hits[0].id)
        return Target.unresolved(raw)

    exact = [n for n in graph.nodes if _norm(n.label) == text]
    if len(exact) == 1:
        return Target.node(exact[0].id)
    if not exact:
        edge_exact = [e for e in graph.edges if e.label and _norm(e.label) == text]
        if len(edge_exact) == 1:
            return Target.edge(edge_exact[0].id)

    contained = [n for n in graph.nodes
                 if _norm(n.label) and (_norm(n.label) in text or text in _norm(n.label))]
    if len(contained) == 1:
        return Target.node(contained[0].id)
    return Target.unresolved(raw)
