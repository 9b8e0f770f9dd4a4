"""Markdown rendering of a ThreatModel (JSON comes from ``ThreatModel.to_json``)."""

from __future__ import annotations

from .dfd import DiagramGraph
from .rules import Target
from .synthesis import ThreatModel


def describe_target(target: Target, graph: DiagramGraph) -> str:
    if target.kind == "node" and graph.has_node(target.id):
        return f"{graph.node(target.id).label} (`{target.id}`)"
    if target.kind == "edge" and graph.has_edge(target.id):
        e = graph.edge(target.id)
        label = f" {e.label}" if e.label else ""
        return f"`{e.source}` → `{e.target}`{label} (`{e.id}`)"
    return f"`{target.id}`"


def _cell(text: str) -> str:
    return text.replace("|", "\\|").replace("\n", " ")


def render_markdown(model: ThreatModel, graph: DiagramGraph) -> str:
    s = model.summary
    out = [f"# Threat model: {graph.title or 'untitled diagram'}", ""]
    out.append(f"- Diagram digest: `{model.diagram_digest}`")
    out.append(f"- Analyzers: {', '.join(s['analyzers'])} (consensus denominator {s['consensus_denominator']})")
    if s["failed_analyzers"]:
        out.append(f"- Failed analyzers: {', '.join(s['failed_analyzers'])}")
    out.append(f"- Reasoner used: {'yes' if model.reasoner_used else 'no'}")
    out.append(f"- Findings: {s['total']}")
    out += ["", "## Threats", "",
            "| Rank | Target | Category / Subtype | Severity | Score | Mitigations |",
            "|---:|---|---|---|---:|---|"]
    for cf in model.findings:
        f = cf.finding
        kind = f.category.value + (f" / {f.subtype.value}" if f.subtype else "")
        out.append(
            f"| {cf.rank} | {_cell(describe_target(f.target, graph))} | {kind} | {cf.final_severity.value} "
            f"| {cf.support_count}/{s['consensus_denominator']} "
            f"| {_cell('; '.join(f.mitigations))} |"
        )

    out += ["", "## By component", ""]
    seen: dict = {}
    for cf in model.findings:
        seen.setdefault(cf.finding.target, []).append(cf)
    for target in sorted(seen, key=lambda t: min(cf.rank for cf in seen[t])):
        out.append(f"### {describe_target(target, graph)}")
        out.append("")
        for cf in seen[target]:
            f = cf.finding
            name = f.subtype.value if f.subtype else f.category.value
            out.append(f"- **{name}** ({cf.final_severity.value}, rank {cf.rank})")
            for m in f.mitigations:
                out.append(f"  - {m}")
        out.append("")

    if s["quarantined"]:
        out += ["## Quarantined (unresolved targets)", ""]
        for q in s["quarantined"]:
            what = q["subtype"] or q["category"]
            out.append(f"- {q['analyzer']}: {what} on `{q['target']}`")
        out.append("")
    return "\n".join(out).rstrip("\n") + "\n"
