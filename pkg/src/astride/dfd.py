"""
Parser and canonical serializer for the Mermaid flowchart subset used to
describe agent architectures.

Accepted grammar (one statement per line)::

    ---                      optional front matter, only ``title:`` is read
    title: Support Agent
    ---
    flowchart TD|LR
    %% comment
    id[label]  id(label)  id[(label)]  id([label])  id((label))
    a --> b
    a -->|label| b[Declared inline] --> c
    subgraph id[label]  /  subgraph id  /  subgraph Free title
        ...
    end

Labels may be wrapped in double quotes to carry bracket characters.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Optional

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
RESERVED = frozenset({"subgraph", "end"})
DIRECTIONS = ("TD", "LR")
INDENT = "    "


class Shape(str, Enum):
    RECTANGLE = "rectangle"
    ROUNDED = "rounded"
    CYLINDER = "cylinder"
    STADIUM = "stadium"
    CIRCLE = "circle"


# Longest openers first so "[(" wins over "[".
_SHAPE_DELIMS: tuple[tuple[str, str, Shape], ...] = (
    ("[(", ")]", Shape.CYLINDER),
    ("([", "])", Shape.STADIUM),
    ("((", "))", Shape.CIRCLE),
    ("[", "]", Shape.RECTANGLE),
    ("(", ")", Shape.ROUNDED),
)
_DELIMS_BY_SHAPE = {shape: (op, cl) for op, cl, shape in _SHAPE_DELIMS}
_NEEDS_QUOTES = set("[](){}|")


class DiagramError(ValueError):
    """Base class for every diagram parse/validation failure."""


class DiagramSyntaxError(DiagramError):
    def __init__(self, line: int, column: int, expected: str, found: str = ""):
        self.line = line
        self.column = column
        self.expected = expected
        self.found = found
        detail = f", found {found!r}" if found else ""
        super().__init__(f"line {line}, column {column}: expected {expected}{detail}")


class DuplicateNodeId(DiagramError):
    def __init__(self, node_id: str, line: Optional[int] = None):
        self.node_id = node_id
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"duplicate node id {node_id!r}{where}")


class DanglingEdge(DiagramError):
    def __init__(self, ordinal: int, missing_id: str):
        self.ordinal = ordinal
        self.missing_id = missing_id
        super().__init__(f"edge e{ordinal} references unknown node {missing_id!r}")


class OverlappingBoundaries(DiagramError):
    def __init__(self, ids: Iterable[str]):
        self.ids = tuple(ids)
        super().__init__(f"overlapping trust boundaries: {', '.join(self.ids)}")


@dataclass(frozen=True)
class Node:
    id: str
    label: str
    shape: Shape = Shape.RECTANGLE
    boundary_id: Optional[str] = None


@dataclass(frozen=True)
class Edge:
    id: str
    source: str
    target: str
    label: Optional[str] = None


@dataclass(frozen=True)
class TrustBoundary:
    id: str
    label: str
    # Transitive: a parent boundary's members include its children's members.
    member_node_ids: frozenset[str] = frozenset()
    parent_boundary_id: Optional[str] = None


@dataclass(frozen=True)
class DiagramGraph:
    title: str = ""
    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()
    boundaries: tuple[TrustBoundary, ...] = ()
    direction: str = "TD"

    @cached_property
    def source_digest(self) -> str:
        """SHA-256 of the canonical serialization."""
        return hashlib.sha256(serialize_diagram(self).encode("utf-8")).hexdigest()

    @cached_property
    def _node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _edge_map(self) -> dict[str, Edge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def _boundary_map(self) -> dict[str, TrustBoundary]:
        return {b.id: b for b in self.boundaries}

    @cached_property
    def _adjacency(self) -> tuple[dict[str, list[Edge]], dict[str, list[Edge]]]:
        out: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        inc: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out.setdefault(e.source, []).append(e)
            inc.setdefault(e.target, []).append(e)
        return out, inc

    def node(self, node_id: str) -> Node:
        return self._node_map[node_id]

    def edge(self, edge_id: str) -> Edge:
        return self._edge_map[edge_id]

    def boundary(self, boundary_id: str) -> TrustBoundary:
        return self._boundary_map[boundary_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_map

    def has_edge(self, edge_id: str) -> bool:
        return edge_id in self._edge_map

    def out_edges(self, node_id: str) -> list[Edge]:
        return self._adjacency[0].get(node_id, [])

    def in_edges(self, node_id: str) -> list[Edge]:
        return self._adjacency[1].get(node_id, [])

    def crosses_boundary(self, edge: Edge) -> bool:
        """True when the endpoints sit in different innermost boundaries.

        Two unbounded endpoints do not count as a crossing.
        """
        return self.node(edge.source).boundary_id != self.node(edge.target).boundary_id

    def validate(self) -> None:
        """Check the structural invariants, raising a DiagramError on the first violation."""
        if self.direction not in DIRECTIONS:
            raise DiagramError(f"unsupported direction {self.direction!r}")
        seen: set[str] = set()
        for n in self.nodes:
            if not IDENT_RE.fullmatch(n.id) or n.id in RESERVED:
                raise DiagramError(f"invalid node identifier {n.id!r}")
            if n.id in seen:
                raise DuplicateNodeId(n.id)
            seen.add(n.id)
        for ordinal, e in enumerate(self.edges, start=1):
            for end in (e.source, e.target):
                if end not in seen:
                    raise DanglingEdge(ordinal, end)
        bmap: dict[str, TrustBoundary] = {}
        for b in self.boundaries:
            if b.id in bmap or b.id in seen:
                raise OverlappingBoundaries([b.id])
            bmap[b.id] = b
        for b in self.boundaries:
            if b.parent_boundary_id is not None:
                parent = bmap.get(b.parent_boundary_id)
                if parent is None or not b.member_node_ids <= parent.member_node_ids:
                    raise OverlappingBoundaries([b.id, str(b.parent_boundary_id)])
            if not b.member_node_ids <= seen:
                raise OverlappingBoundaries([b.id])
        # Parent chains must terminate (forest, not a cycle).
        for b in self.boundaries:
            hops, cur = 0, b
            while cur.parent_boundary_id is not None:
                cur = bmap[cur.parent_boundary_id]
                hops += 1
                if hops > len(bmap):
                    raise OverlappingBoundaries([b.id])
        siblings: dict[Optional[str], list[TrustBoundary]] = {}
        for b in self.boundaries:
            siblings.setdefault(b.parent_boundary_id, []).append(b)
        for group in siblings.values():
            for i, a in enumerate(group):
                for c in group[i + 1:]:
                    if a.member_node_ids & c.member_node_ids:
                        raise OverlappingBoundaries([a.id, c.id])
        for n in self.nodes:
            expected = _innermost_from_members(n.id, self.boundaries, bmap)
            if n.boundary_id != expected:
                raise OverlappingBoundaries([str(n.boundary_id), str(expected)])


def _innermost_from_members(node_id, boundaries, bmap) -> Optional[str]:
    best, best_depth = None, -1
    for b in boundaries:
        if node_id in b.member_node_ids:
            depth, cur = 0, b
            while cur.parent_boundary_id is not None:
                cur = bmap[cur.parent_boundary_id]
                depth += 1
            if depth > best_depth:
                best, best_depth = b.id, depth
    return best


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


class _Cursor:
    """Character cursor over a single source line (columns are 1-based)."""

    def __init__(self, text: str, lineno: int):
        self.text = text
        self.lineno = lineno
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def startswith(self, s: str) -> bool:
        return self.text.startswith(s, self.pos)

    def error(self, expected: str) -> DiagramSyntaxError:
        found = self.text[self.pos:self.pos + 12] if not self.at_end() else ""
        return DiagramSyntaxError(self.lineno, self.pos + 1, expected, found)

    def ident(self, what: str = "node identifier") -> str:
        m = IDENT_RE.match(self.text, self.pos)
        if not m or m.group(0) in RESERVED:
            raise self.error(what)
        self.pos = m.end()
        return m.group(0)

    def end_of_statement(self) -> bool:
        self.skip_ws()
        if self.startswith(";"):
            self.pos += 1
            self.skip_ws()
        return self.at_end()

    def delimited(self, closer: str, forbid: str = '"') -> str:
        """Read a label up to ``closer``; a leading quote switches to quoted mode."""
        self.skip_ws()
        if self.startswith('"'):
            end = self.text.find('"', self.pos + 1)
            if end < 0:
                self.pos = len(self.text)
                raise self.error("closing '\"'")
            label = self.text[self.pos + 1:end]
            self.pos = end + 1
            self.skip_ws()
            if not self.startswith(closer):
                raise self.error(repr(closer))
            self.pos += len(closer)
            return label.strip()
        end = self.text.find(closer, self.pos)
        if end < 0:
            self.pos = len(self.text)
            raise self.error(repr(closer))
        label = self.text[self.pos:end]
        for offset, ch in enumerate(label):
            if ch in forbid:
                self.pos += offset
                raise self.error(f"{closer!r} (unquoted labels cannot contain {ch!r})")
        self.pos = end + len(closer)
        return label.strip()


@dataclass
class _NodeState:
    order: int
    boundary: Optional[int]
    label: Optional[str] = None
    shape: Shape = Shape.RECTANGLE
    declared: bool = False  # shaped declaration seen
    stated: bool = False  # appeared outside an edge (bare statement or declaration)
    line: int = 0


@dataclass
class _BoundaryState:
    explicit_id: Optional[str]
    label: str
    parent: Optional[int]
    line: int
    members: list[str] = field(default_factory=list)


class _Parser:
    def __init__(self, source: str):
        self.lines = source.splitlines()
        self.nodes: dict[str, _NodeState] = {}
        self.edges: list[tuple[str, str, Optional[str], int]] = []
        self.boundaries: list[_BoundaryState] = []
        self.stack: list[int] = []
        self.title = ""
        self.direction = "TD"

    @property
    def line_count(self) -> int:
        return max(1, len(self.lines))

    def parse(self) -> DiagramGraph:
        idx = self._skip_trivia(0)
        if idx < len(self.lines) and self.lines[idx].strip() == "---":
            idx = self._skip_trivia(self._front_matter(idx))
        self._header(idx)
        for i in range(idx + 1, len(self.lines)):
            self._statement(i)
        if self.stack:
            last = self.line_count
            col = len(self.lines[last - 1]) + 1 if self.lines else 1
            raise DiagramSyntaxError(last, col, "'end' closing subgraph opened on line "
                                     f"{self.boundaries[self.stack[-1]].line}")
        return self._build()

    def _skip_trivia(self, idx: int) -> int:
        while idx < len(self.lines):
            s = self.lines[idx].strip()
            if s and not s.startswith("%%"):
                break
            idx += 1
        return idx

    def _front_matter(self, idx: int) -> int:
        for j in range(idx + 1, len(self.lines)):
            s = self.lines[j].strip()
            if s == "---":
                return j + 1
            if s.startswith("title:"):
                t = s[len("title:"):].strip()
                if len(t) >= 2 and t[0] == t[-1] == '"':
                    t = t[1:-1]
                self.title = t
        raise DiagramSyntaxError(self.line_count, 1, "'---' closing front matter")

    def _header(self, idx: int) -> None:
        if idx >= len(self.lines):
            raise DiagramSyntaxError(self.line_count, 1, "'flowchart TD' or 'flowchart LR'")
        cur = _Cursor(self.lines[idx], idx + 1)
        cur.skip_ws()
        if not cur.startswith("flowchart"):
            raise cur.error("'flowchart TD' or 'flowchart LR'")
        cur.pos += len("flowchart")
        start = cur.pos
        cur.skip_ws()
        if cur.pos == start:
            raise cur.error("diagram direction (TD or LR)")
        m = re.compile(r"TD|LR").match(cur.text, cur.pos)
        if not m:
            raise cur.error("diagram direction (TD or LR)")
        self.direction = m.group(0)
        cur.pos = m.end()
        if not cur.end_of_statement():
            raise cur.error("end of line")

    def _statement(self, i: int) -> None:
        text = self.lines[i]
        stripped = text.strip()
        if not stripped or stripped.startswith("%%"):
            return
        cur = _Cursor(text, i + 1)
        cur.skip_ws()
        if re.match(r"subgraph(\s|$)", text[cur.pos:]):
            cur.pos += len("subgraph")
            self._subgraph(cur)
            return
        if re.fullmatch(r"end\s*;?\s*", text[cur.pos:]):
            if not self.stack:
                raise cur.error("statement ('end' without matching 'subgraph')")
            self.stack.pop()
            return
        self._chain(cur)

    def _subgraph(self, cur: _Cursor) -> None:
        cur.skip_ws()
        if cur.at_end():
            raise cur.error("subgraph id or title")
        explicit_id: Optional[str] = None
        label: str
        if cur.startswith('"'):
            label = self._quoted_title(cur)
        elif cur.startswith("["):
            cur.pos += 1
            label = cur.delimited("]")
        else:
            m = IDENT_RE.match(cur.text, cur.pos)
            rest_after = cur.text[m.end():].strip() if m else None
            if m and m.group(0) not in RESERVED and (rest_after in ("", ";") or rest_after.startswith("[")):
                explicit_id = m.group(0)
                cur.pos = m.end()
                cur.skip_ws()
                if cur.startswith("["):
                    cur.pos += 1
                    label = cur.delimited("]")
                else:
                    label = explicit_id
            else:
                label = cur.text[cur.pos:].strip().rstrip(";").strip()
                if '"' in label:
                    raise cur.error("subgraph title without '\"'")
                cur.pos = len(cur.text)
        if not cur.end_of_statement():
            raise cur.error("end of line")
        parent = self.stack[-1] if self.stack else None
        self.boundaries.append(_BoundaryState(explicit_id, label, parent, cur.lineno))
        self.stack.append(len(self.boundaries) - 1)

    @staticmethod
    def _quoted_title(cur: _Cursor) -> str:
        end = cur.text.find('"', cur.pos + 1)
        if end < 0:
            cur.pos = len(cur.text)
            raise cur.error("closing '\"'")
        title = cur.text[cur.pos + 1:end].strip()
        cur.pos = end + 1
        return title

    def _chain(self, cur: _Cursor) -> None:
        prev = self._node_ref(cur)
        if cur.end_of_statement():
            self.nodes[prev].stated = True
            return
        while True:
            if cur.end_of_statement():
                return
            if not cur.startswith("-->"):
                raise cur.error("'-->' or end of line")
            cur.pos += 3
            cur.skip_ws()
            label = None
            if cur.startswith("|"):
                cur.pos += 1
                label = cur.delimited("|") or None
                cur.skip_ws()
            if cur.at_end():
                raise cur.error("node identifier")
            nxt = self._node_ref(cur)
            self.edges.append((prev, nxt, label, cur.lineno))
            prev = nxt

    def _node_ref(self, cur: _Cursor) -> str:
        node_id = cur.ident()
        state = self.nodes.get(node_id)
        if state is None:
            state = _NodeState(order=len(self.nodes),
                               boundary=self.stack[-1] if self.stack else None,
                               line=cur.lineno)
            self.nodes[node_id] = state
        for opener, closer, shape in _SHAPE_DELIMS:
            if cur.startswith(opener):
                if state.declared:
                    raise DuplicateNodeId(node_id, cur.lineno)
                cur.pos += len(opener)
                state.label = cur.delimited(closer)
                state.shape = shape
                state.declared = True
                state.stated = True
                break
        return node_id

    def _build(self) -> DiagramGraph:
        explicit = [b.explicit_id for b in self.boundaries if b.explicit_id]
        dup = sorted({x for x in explicit if explicit.count(x) > 1})
        if dup:
            raise OverlappingBoundaries(dup)
        explicit_set = set(explicit)
        for node_id, st in self.nodes.items():
            if node_id in explicit_set:
                if st.stated:
                    raise DuplicateNodeId(node_id, st.line)
                ordinal = next(k for k, (s, t, _, _) in enumerate(self.edges, 1) if node_id in (s, t))
                raise DanglingEdge(ordinal, node_id)

        taken = explicit_set | set(self.nodes)
        ids: list[str] = []
        for k, b in enumerate(self.boundaries, start=1):
            if b.explicit_id:
                ids.append(b.explicit_id)
                continue
            candidate = f"b{k}"
            while candidate in taken:
                candidate += "_"
            taken.add(candidate)
            ids.append(candidate)

        members: list[set[str]] = [set() for _ in self.boundaries]
        for node_id, st in self.nodes.items():
            cur = st.boundary
            while cur is not None:
                members[cur].add(node_id)
                cur = self.boundaries[cur].parent

        nodes = tuple(
            Node(node_id, st.label if st.label is not None else node_id, st.shape,
                 ids[st.boundary] if st.boundary is not None else None)
            for node_id, st in sorted(self.nodes.items(), key=lambda kv: kv[1].order)
        )
        edges = tuple(Edge(f"e{k}", s, t, label)
                      for k, (s, t, label, _) in enumerate(self.edges, start=1))
        boundaries = tuple(
            TrustBoundary(ids[k], b.label, frozenset(members[k]),
                          ids[b.parent] if b.parent is not None else None)
            for k, b in enumerate(self.boundaries)
        )
        graph = DiagramGraph(self.title, nodes, edges, boundaries, self.direction)
        graph.validate()
        return graph


def parse_diagram(source: str) -> DiagramGraph:
    """Parse diagram source text into a validated DiagramGraph."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return _Parser(source).parse()


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _node_label(label: str) -> str:
    if any(ch in _NEEDS_QUOTES for ch in label) or label != label.strip():
        return f'"{label}"'
    return label


def _edge_label(label: str) -> str:
    return f'"{label}"' if "|" in label else label


def _declaration(node: Node) -> str:
    opener, closer = _DELIMS_BY_SHAPE[node.shape]
    return f"{node.id}{opener}{_node_label(node.label)}{closer}"


def serialize_diagram(graph: DiagramGraph) -> str:
    """Render the canonical text form.

    Nodes keep their list order, boundary blocks are nested parent-first and
    every edge is emitted after the last block.
    """
    out: list[str] = []
    if graph.title:
        out += ["---", f'title: "{graph.title}"', "---"]
    out.append(f"flowchart {graph.direction}")

    index = {n.id: i for i, n in enumerate(graph.nodes)}
    never = len(graph.nodes)
    children: dict[Optional[str], list[TrustBoundary]] = {}
    for b in graph.boundaries:
        children.setdefault(b.parent_boundary_id, []).append(b)

    def first_member(b: TrustBoundary) -> int:
        return min((index[m] for m in b.member_node_ids if m in index), default=never)

    def emit(container: Optional[str], depth: int) -> None:
        kids = children.get(container, [])
        keyed: list[tuple[int, int, int, object]] = []
        # An empty boundary sorts just ahead of its next non-empty sibling.
        pending = never
        keys = [0] * len(kids)
        for pos in range(len(kids) - 1, -1, -1):
            k = first_member(kids[pos])
            pending = k if k != never else pending
            keys[pos] = pending
        for pos, b in enumerate(kids):
            keyed.append((keys[pos], 0, pos, b))
        for n in graph.nodes:
            if n.boundary_id == container:
                keyed.append((index[n.id], 1, 0, n))
        for *_, item in sorted(keyed, key=lambda t: t[:3]):
            pad = INDENT * depth
            if isinstance(item, Node):
                out.append(pad + _declaration(item))
            else:
                out.append(f"{pad}subgraph {item.id}[{_node_label(item.label)}]")
                emit(item.id, depth + 1)
                out.append(pad + "end")

    emit(None, 1)
    for e in graph.edges:
        arrow = f"-->|{_edge_label(e.label)}|" if e.label else "-->"
        out.append(f"{INDENT}{e.source} {arrow} {e.target}")
    return "\n".join(out) + "\n"


def load_diagram(path) -> DiagramGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_diagram(fh.read())
