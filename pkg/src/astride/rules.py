"""Deterministic ASTRIDE threat elicitation over a parsed diagram.

Rule catalogue (ids appear in every finding's ``rule_id``):

    R-A1  PromptInjection       untrusted flow into an agent or prompt interface
    R-A2  ContextPoisoning      memory store written from a tainted node
    R-A3  UnsafeToolInvocation  agent calling a tool/model or leaving its boundary
    R-A4  ReasoningSubversion   tainted agent that acts on something downstream
    R-A5  InterAgentInfluence   agent-to-agent flow
    R-A6  MemoryMisuse          agent reading a tainted memory store
    R-S1..R-S6                  STRIDE-per-element from the applicability matrix
    R-B1                        trust-boundary crossing flow

R-A1 attributes injection to the entry point only: flows whose source is
itself an agent, prompt interface or memory store are covered by R-A4, R-A5
and R-A6 instead.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .dfd import DiagramGraph, Edge, Node, Shape
from .taxonomy import (
    A,
    DEFAULT_TAXONOMY,
    STRIDE,
    AiThreatSubtype,
    ElementKind,
    Severity,
    Taxonomy,
    ThreatCategory,
)

LOCAL_ANALYZER = "local-rules"

STRIDE_RULES = {cat: f"R-S{i}" for i, cat in enumerate(STRIDE, start=1)}

Lexicon = Sequence[tuple[ElementKind, Sequence[str]]]


@dataclass(frozen=True, order=True)
class Target:
    """A finding's subject: a node, an edge, or text that matched neither."""

    id: str
    kind: str = "node"  # "node" | "edge" | "unresolved"

    @classmethod
    def node(cls, node_id: str) -> "Target":
        return cls(node_id, "node")

    @classmethod
    def edge(cls, edge_id: str) -> "Target":
        return cls(edge_id, "edge")

    @classmethod
    def unresolved(cls, text: str) -> "Target":
        return cls(text, "unresolved")

    @property
    def resolved(self) -> bool:
        return self.kind != "unresolved"


@dataclass(frozen=True)
class Finding:
    category: ThreatCategory
    subtype: Optional[AiThreatSubtype]
    target: Target
    severity: Severity
    rationale: str
    mitigations: tuple[str, ...]
    rule_id: str
    analyzer: str = LOCAL_ANALYZER

    def __post_init__(self):
        if (self.category is A) != (self.subtype is not None):
            raise ValueError("subtype must be set exactly when category is AiAgentSpecific")
        if not self.mitigations:
            raise ValueError("a finding needs at least one mitigation")

    @property
    def key(self) -> tuple[Target, ThreatCategory, Optional[AiThreatSubtype]]:
        return (self.target, self.category, self.subtype)

    def sort_key(self) -> tuple[str, str, str, str]:
        return (self.target.id, self.target.kind, self.category.value,
                self.subtype.value if self.subtype else "")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Finding":
        """Inverse of ``to_dict``; names must be canonical."""
        return cls(
            category=ThreatCategory(d["category"]),
            subtype=AiThreatSubtype(d["subtype"]) if d.get("subtype") else None,
            target=Target(d["target"], d.get("target_kind", "node")),
            severity=Severity(d["severity"]),
            rationale=d.get("rationale", ""),
            mitigations=tuple(d["mitigations"]),
            rule_id=d.get("rule_id", ""),
            analyzer=d.get("analyzer", LOCAL_ANALYZER),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "subtype": self.subtype.value if self.subtype else None,
            "target": self.target.id,
            "target_kind": self.target.kind,
            "severity": self.severity.value,
            "rationale": self.rationale,
            "mitigations": list(self.mitigations),
            "rule_id": self.rule_id,
            "analyzer": self.analyzer,
        }


def classify_kind(node: Node, graph: DiagramGraph,
                  lexicon: Optional[Lexicon] = None) -> ElementKind:
    """Resolve a node's element kind.

    Priority: label keyword (case-insensitive substring, lexicon order), then
    cylinder shape -> DataStore, then an unbounded node with no inbound flow
    -> ExternalEntity, otherwise Process.
    """
    label = node.label.lower()
    for kind, keywords in (lexicon if lexicon is not None else DEFAULT_TAXONOMY.lexicon):
        if any(word in label for word in keywords):
            return kind
    if node.shape is Shape.CYLINDER:
        return ElementKind.DATA_STORE
    if node.boundary_id is None and not graph.in_edges(node.id):
        return ElementKind.EXTERNAL_ENTITY
    return ElementKind.PROCESS


def classify_all(graph: DiagramGraph, lexicon: Optional[Lexicon] = None) -> dict[str, ElementKind]:
    return {n.id: classify_kind(n, graph, lexicon) for n in graph.nodes}


def _taint_parents(graph: DiagramGraph, kinds: Mapping[str, ElementKind]) -> dict[str, Optional[str]]:
    """Multi-source BFS; maps each tainted node to its BFS parent (None for sources)."""
    parents: dict[str, Optional[str]] = {}
    queue: deque[str] = deque()
    for n in graph.nodes:
        if kinds[n.id] is ElementKind.EXTERNAL_ENTITY or n.boundary_id is None:
            parents[n.id] = None
            queue.append(n.id)
    while queue:
        cur = queue.popleft()
        for e in graph.out_edges(cur):
            if e.target not in parents:
                parents[e.target] = cur
                queue.append(e.target)
    return parents


def tainted_nodes(graph: DiagramGraph, lexicon: Optional[Lexicon] = None) -> set[str]:
    """Nodes reachable from any external entity or any node outside every boundary."""
    return set(_taint_parents(graph, classify_all(graph, lexicon)))


def _witness(parents: Mapping[str, Optional[str]], node_id: str) -> list[str]:
    path = [node_id]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    return path[::-1]


@dataclass
class _Collector:
    taxonomy: Taxonomy
    analyzer: str
    found: dict[tuple, dict[str, Any]] = field(default_factory=dict)

    def add(self, target: Target, category: ThreatCategory, subtype: Optional[AiThreatSubtype],
            rule_id: str, rationale: str) -> None:
        key = (target, category, subtype)
        slot = self.found.get(key)
        if slot is None:
            self.found[key] = {"rules": [rule_id], "why": [f"{rule_id}: {rationale}"]}
            return
        if rule_id not in slot["rules"]:
            slot["rules"].append(rule_id)
        line = f"{rule_id}: {rationale}"
        if line not in slot["why"]:
            slot["why"].append(line)

    def findings(self) -> list[Finding]:
        out = []
        for (target, cat, sub), slot in self.found.items():
            out.append(Finding(
                category=cat,
                subtype=sub,
                target=target,
                severity=self.taxonomy.default_severity(cat, sub),
                rationale="; ".join(slot["why"]),
                mitigations=tuple(self.taxonomy.lookup_mitigations(cat, sub)),
                rule_id=",".join(slot["rules"]),
                analyzer=self.analyzer,
            ))
        out.sort(key=Finding.sort_key)
        return out


def _name(graph: DiagramGraph, node_id: str) -> str:
    return f"{graph.node(node_id).label} ({node_id})"


def _flow(edge: Edge) -> str:
    return f"{edge.id} {edge.source} -> {edge.target}"


_ENTRY_EXCLUDED = frozenset({ElementKind.AGENT_CORE, ElementKind.PROMPT_INTERFACE, ElementKind.MEMORY_STORE})


def elicit(graph: DiagramGraph, taxonomy: Taxonomy = DEFAULT_TAXONOMY,
           analyzer: str = LOCAL_ANALYZER) -> list[Finding]:
    """Apply the rule catalogue; output is ordered by (target, category, subtype)."""
    kinds = classify_all(graph, taxonomy.lexicon)
    parents = _taint_parents(graph, kinds)
    tainted = parents.keys()
    acc = _Collector(taxonomy, analyzer)
    K = ElementKind

    def path_text(node_id: str, *tail: str) -> str:
        return " -> ".join([*_witness(parents, node_id), *tail])

    for node in graph.nodes:
        cats, _ = taxonomy.lookup_applicable(kinds[node.id])
        for cat in STRIDE:
            if cat in cats:
                acc.add(Target.node(node.id), cat, None, STRIDE_RULES[cat],
                        f"{kinds[node.id].value} {_name(graph, node.id)} is exposed to {cat.value}")

    for edge in graph.edges:
        src, dst = kinds[edge.source], kinds[edge.target]
        et = Target.edge(edge.id)

        if edge.source in tainted and dst in (K.AGENT_CORE, K.PROMPT_INTERFACE) and src not in _ENTRY_EXCLUDED:
            acc.add(Target.node(edge.target), A, AiThreatSubtype.PROMPT_INJECTION, "R-A1",
                    f"untrusted input reaches {_name(graph, edge.target)} over {_flow(edge)}; "
                    f"witness path {path_text(edge.source, edge.target)}")

        if src is K.AGENT_CORE:
            agent_boundary = graph.node(edge.source).boundary_id
            leaves = (agent_boundary is not None
                      and edge.target not in graph.boundary(agent_boundary).member_node_ids)
            if dst in (K.TOOL_INTERFACE, K.MODEL_ENDPOINT) or leaves:
                reason = "leaves the agent boundary" if leaves and dst not in (
                    K.TOOL_INTERFACE, K.MODEL_ENDPOINT) else f"invokes {dst.value}"
                acc.add(et, A, AiThreatSubtype.UNSAFE_TOOL_INVOCATION, "R-A3",
                        f"agent {_name(graph, edge.source)} {reason} via {_flow(edge)}")
            if dst is K.AGENT_CORE:
                acc.add(et, A, AiThreatSubtype.INTER_AGENT_INFLUENCE, "R-A5",
                        f"agent-to-agent flow {_flow(edge)}")

        if src is K.MEMORY_STORE and dst is K.AGENT_CORE and edge.source in tainted:
            acc.add(et, A, AiThreatSubtype.MEMORY_MISUSE, "R-A6",
                    f"agent {_name(graph, edge.target)} reads tainted memory over {_flow(edge)}; "
                    f"witness path {path_text(edge.source, edge.target)}")

        if graph.crosses_boundary(edge):
            for cat in (ThreatCategory.TAMPERING, ThreatCategory.INFORMATION_DISCLOSURE,
                        ThreatCategory.DENIAL_OF_SERVICE):
                acc.add(et, cat, None, "R-B1", f"flow {_flow(edge)} crosses a trust boundary")
            # Spoofing on the receiver only where the matrix allows it for that kind.
            if taxonomy.matrix[dst].permits(ThreatCategory.SPOOFING, None):
                acc.add(Target.node(edge.target), ThreatCategory.SPOOFING, None, "R-B1",
                        f"{_name(graph, edge.target)} receives cross-boundary flow {_flow(edge)}")

    for node in graph.nodes:
        kind = kinds[node.id]
        if kind is K.MEMORY_STORE:
            writers = [e for e in graph.in_edges(node.id) if e.source in tainted]
            if writers:
                e = writers[0]
                acc.add(Target.node(node.id), A, AiThreatSubtype.CONTEXT_POISONING, "R-A2",
                        f"{_name(graph, node.id)} is written from tainted {e.source} over {_flow(e)}; "
                        f"witness path {path_text(e.source, node.id)}")
        if kind is K.AGENT_CORE and node.id in tainted and graph.out_edges(node.id):
            acc.add(Target.node(node.id), A, AiThreatSubtype.REASONING_SUBVERSION, "R-A4",
                    f"tainted agent {_name(graph, node.id)} drives {len(graph.out_edges(node.id))} "
                    f"outbound flow(s); witness path {path_text(node.id)}")

    return acc.findings()


def permitted(finding: Finding, graph: DiagramGraph, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> bool:
    """Whether the applicability matrix allows this finding on its target."""
    t = finding.target
    if t.kind == "node":
        kind = classify_kind(graph.node(t.id), graph, taxonomy.lexicon)
        return taxonomy.matrix[kind].permits(finding.category, finding.subtype)
    if t.kind == "edge":
        row = taxonomy.flow_row(graph.crosses_boundary(graph.edge(t.id)))
        return row.permits(finding.category, finding.subtype)
    return False
