"""Consensus synthesis of analyzer reports into a single ranked threat model.

The deterministic path (``synthesize``) is a pure merge. The optional
reasoning backend is folded in as one more voter with an integer weight, so
every ranked finding stays traceable to the reports that asserted it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Any, Mapping, Optional, Sequence, Union

from .consortium import (
    REPORT_SCHEMA,
    AnalysisRequest,
    AnalyzerReport,
    BackendConfig,
    ConfigError,
    Message,
    ReportStatus,
    Transport,
    element_listing,
    run_backend,
)
from .dfd import DiagramGraph, serialize_diagram
from .rules import Finding
from .targets import normalize_target
from .taxonomy import DEFAULT_TAXONOMY, Severity, Taxonomy, ThreatCategory

__all__ = [
    "ConsensusFinding",
    "NoUsableReports",
    "SeverityRule",
    "ThreatModel",
    "build_reasoning_prompt",
    "normalize_target",
    "synthesize",
    "synthesize_with_reasoner",
]

log = logging.getLogger(__name__)

REASONING_PROMPT_VERSION = "astride-reasoning/1"
DEFAULT_REASONER_WEIGHT = 2
CONSENSUS_ANALYZER = "consensus"

Number = Union[int, float, Fraction, str]


class NoUsableReports(ValueError):
    pass


class SeverityRule(str, Enum):
    MAX = "max"
    MEDIAN = "median"


@dataclass(frozen=True)
class ConsensusFinding:
    finding: Finding
    supporters: tuple[str, ...]
    support_count: int
    consensus_score: Fraction
    final_severity: Severity
    rank: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "finding": self.finding.to_dict(),
            "supporters": list(self.supporters),
            "support_count": self.support_count,
            "consensus_score": float(self.consensus_score),
            "final_severity": self.final_severity.value,
            "rank": self.rank,
        }


@dataclass(frozen=True)
class ThreatModel:
    diagram_digest: str
    findings: tuple[ConsensusFinding, ...]
    reports: tuple[AnalyzerReport, ...]
    summary: Mapping[str, Any]
    reasoner_used: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "diagram_digest": self.diagram_digest,
            "findings": [f.to_dict() for f in self.findings],
            "reports": [r.to_dict() for r in self.reports],
            "summary": self.summary,
            "reasoner_used": self.reasoner_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def _as_fraction(value: Number) -> Fraction:
    frac = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(10**9)
    if not 0 <= frac <= 1:
        raise ValueError(f"consensus threshold must lie in [0, 1], got {value}")
    return frac


def _combine_severity(weighted: list[tuple[Severity, int]], rule: SeverityRule) -> Severity:
    if rule is SeverityRule.MAX:
        return max(s for s, _ in weighted)
    expanded = sorted(s for s, w in weighted for _ in range(w))
    return expanded[len(expanded) // 2]  # upper median


def _merge(reports: Sequence[AnalyzerReport], graph: DiagramGraph, threshold: Number,
           severity_rule: Union[SeverityRule, str], weights: Mapping[str, int],
           reasoner_used: bool) -> ThreatModel:
    rule = SeverityRule(severity_rule)
    cutoff = _as_fraction(threshold)
    every = [r.analyzer for r in reports]
    if len(set(every)) != len(every):
        raise ValueError(f"analyzer names must be unique: {every}")
    # Name order everywhere, so the model is identical under any permutation of ``reports``.
    ordered = tuple(sorted(reports, key=lambda r: r.analyzer))
    usable = [r for r in ordered if not r.failed]
    if not usable:
        raise NoUsableReports("no analyzer report is usable")
    names = [r.analyzer for r in usable]
    denominator = sum(weights.get(n, 1) for n in names)

    groups: dict[tuple, dict[str, Any]] = {}
    quarantined: list[dict[str, Any]] = []
    for report in usable:
        for f in report.findings:
            if not f.target.resolved:
                quarantined.append({
                    "analyzer": report.analyzer,
                    "target": f.target.id,
                    "category": f.category.value,
                    "subtype": f.subtype.value if f.subtype else None,
                })
                continue
            g = groups.setdefault(f.key, {"per": {}, "mitigations": [], "rules": []})
            per = g["per"].setdefault(report.analyzer, {"severity": f.severity, "why": []})
            per["severity"] = max(per["severity"], f.severity)
            if f.rationale and f.rationale not in per["why"]:
                per["why"].append(f.rationale)
            for m in f.mitigations:
                if m not in g["mitigations"]:
                    g["mitigations"].append(m)
            for rid in f.rule_id.split(","):
                if rid and rid not in g["rules"]:
                    g["rules"].append(rid)

    merged: list[tuple[tuple, Finding, tuple[str, ...], int, Fraction, Severity]] = []
    below = 0
    for (target, category, subtype), g in groups.items():
        supporters = tuple(sorted(g["per"]))
        support = sum(weights.get(n, 1) for n in supporters)
        score = Fraction(support, denominator)
        if score < cutoff:
            below += 1
            continue
        severity = _combine_severity([(g["per"][n]["severity"], weights.get(n, 1)) for n in supporters], rule)
        rationale = " | ".join(
            f"[{n}] " + ("; ".join(g["per"][n]["why"]) or "asserted without rationale") for n in supporters
        )
        finding = Finding(category, subtype, target, severity, rationale, tuple(g["mitigations"]),
                          ",".join(g["rules"]), CONSENSUS_ANALYZER)
        sort_key = (-score, -severity.rank, category.order, target.id, target.kind,
                    subtype.value if subtype else "")
        merged.append((sort_key, finding, supporters, support, score, severity))
    merged.sort(key=lambda m: m[0])

    findings = tuple(
        ConsensusFinding(f, sup, cnt, score, sev, rank)
        for rank, (_, f, sup, cnt, score, sev) in enumerate(merged, start=1)
    )
    by_category = {c.value: 0 for c in ThreatCategory}
    by_severity = {s.value: 0 for s in Severity}
    for cf in findings:
        by_category[cf.finding.category.value] += 1
        by_severity[cf.final_severity.value] += 1
    quarantined.sort(key=lambda q: (q["analyzer"], q["target"], q["category"], q["subtype"] or ""))
    summary = {
        "total": len(findings),
        "by_category": by_category,
        "by_severity": by_severity,
        "analyzers": names,
        "failed_analyzers": [r.analyzer for r in ordered if r.failed],
        "consensus_denominator": denominator,
        "min_consensus": str(cutoff),
        "below_threshold": below,
        "severity_rule": rule.value,
        "quarantined": quarantined,
    }
    return ThreatModel(graph.source_digest, findings, ordered, summary, reasoner_used)


def synthesize(reports: Sequence[AnalyzerReport], graph: DiagramGraph, threshold: Number = 0,
               severity_rule: Union[SeverityRule, str] = SeverityRule.MAX) -> ThreatModel:
    """Merge reports on (target, category, subtype) and rank by consensus.

    Score is supporters / non-failed reports. Ranking keys: score desc,
    severity desc, category in A,S,T,R,I,D,E order, target id, then subtype
    name. Findings on unresolved targets are quarantined into the summary.
    """
    return _merge(reports, graph, threshold, severity_rule, {}, reasoner_used=False)


def build_reasoning_prompt(reports: Sequence[AnalyzerReport], graph: DiagramGraph,
                           context: str = "", model: str = "") -> AnalysisRequest:
    if not reports:
        raise ValueError("at least one report is required")
    ordered = sorted(reports, key=lambda r: r.analyzer)
    system = "\n".join([
        f"[{REASONING_PROMPT_VERSION}]",
        "You are the final reasoning and decision layer of an ASTRIDE threat-modeling consortium.",
        "Several independent analyzers examined the same architecture diagram. Cross-check their",
        "candidate threats against the diagram: confirm the ones the architecture supports,",
        "reconcile conflicting severities, drop unsupported claims, add threats the analyzers",
        "missed only when the diagram clearly implies them, and order the result by priority.",
        "",
        "Threat categories: " + ", ".join(c.value for c in ThreatCategory),
        "Severities (ascending): " + ", ".join(s.value for s in Severity),
        "Bind every threat to a node id or edge id from the element list.",
        "Reply with one JSON document and nothing else, matching this JSON Schema:",
        json.dumps(REPORT_SCHEMA, indent=2),
    ])
    body = [
        "Architecture context:",
        context.strip() or "(none provided)",
        "",
        "Diagram source (Mermaid):",
        "```mermaid",
        serialize_diagram(graph).rstrip("\n"),
        "```",
        "",
        "Elements:",
        element_listing(graph),
        "",
        f"Analyzer outputs ({len(ordered)} analyzers):",
    ]
    total = 0
    for r in ordered:
        body.append("")
        body.append(f"## Analyzer {r.analyzer} (status {r.status.value}, {len(r.findings)} findings)")
        if r.failed:
            body.append("(no usable output)")
        for f in r.findings:
            body.append(json.dumps(f.to_dict(), ensure_ascii=False))
        total += len(r.findings)
    body.append("")
    if total == 0:
        body.append("The analyzers reported no candidate threats; assess the diagram directly.")
    body.append("Produce the reconciled, prioritized threat list with mitigations. Respond with JSON only.")
    return AnalysisRequest(model=model, messages=(Message("system", system), Message("user", "\n".join(body))))


def synthesize_with_reasoner(reports: Sequence[AnalyzerReport], graph: DiagramGraph,
                             reasoner: BackendConfig, threshold: Number = 0,
                             severity_rule: Union[SeverityRule, str] = SeverityRule.MAX,
                             weight: int = DEFAULT_REASONER_WEIGHT, context: str = "",
                             taxonomy: Taxonomy = DEFAULT_TAXONOMY,
                             transport: Optional[Transport] = None,
                             allow_fallback: bool = True) -> ThreatModel:
    """Ask the reasoning backend to reconcile ``reports``, then merge its answer
    as one extra supporter counted ``weight`` times.

    If the reasoner fails and ``allow_fallback`` is set, the deterministic
    ``synthesize`` result is returned unchanged (``reasoner_used`` False).
    """
    if not isinstance(weight, int) or weight < 1:
        raise ValueError("reasoner weight must be a positive integer")
    if any(r.analyzer == reasoner.name for r in reports):
        raise ConfigError(f"reasoner {reasoner.name!r} is also listed as an analyzer")
    if all(r.failed for r in reports):
        raise NoUsableReports("no analyzer report is usable")

    prompt = build_reasoning_prompt(reports, graph, context, model=reasoner.model)
    verdict = run_backend(reasoner, graph, context, taxonomy, transport, request=prompt)
    if verdict.failed:
        log.warning("reasoner %s failed: %s", reasoner.name, "; ".join(verdict.diagnostics))
        if not allow_fallback:
            raise NoUsableReports(f"reasoner {reasoner.name!r} failed and fallback is disabled")
        return synthesize(reports, graph, threshold, severity_rule)
    return _merge([*reports, verdict], graph, threshold, severity_rule,
                  {reasoner.name: weight}, reasoner_used=True)


def rewrap(model: ThreatModel, analyzer: str = "resynthesis") -> AnalyzerReport:
    """Package a model's ranked findings as a single report."""
    findings = tuple(dataclasses.replace(cf.finding, analyzer=analyzer) for cf in model.findings)
    return AnalyzerReport(analyzer, findings, "", 0.0, ReportStatus.OK)
