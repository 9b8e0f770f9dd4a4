from __future__ import annotations

import itertools
from fractions import Fraction

import pytest

from astride.consortium import AnalyzerReport, BackendConfig, BackendKind, ReportStatus
from astride.mock_backend import MockBackend, MockBehavior, findings_reply
from astride.rules import Finding, Target
from astride.synthesis import (
    NoUsableReports,
    build_reasoning_prompt,
    rewrap,
    synthesize,
    synthesize_with_reasoner,
)
from astride.targets import normalize_target
from astride.taxonomy import AiThreatSubtype, Severity, ThreatCategory

A = ThreatCategory.AI_AGENT_SPECIFIC
Sub = AiThreatSubtype


def finding(target, category, subtype=None, severity=Severity.MEDIUM, analyzer="x", kind="node", mitigations=("m",)):
    return Finding(category, subtype, Target(target, kind), severity, f"{analyzer} says so", tuple(mitigations),
                   "model", analyzer)


def report(name, *findings, status=ReportStatus.OK):
    return AnalyzerReport(name, tuple(findings), "", 1.0, status)


def three_reports():
    pi = lambda n, sev=Severity.HIGH: finding("pp", A, Sub.PROMPT_INJECTION, sev, n)  # noqa: E731
    return [
        report("m1", pi("m1"), finding("tx", ThreatCategory.TAMPERING, analyzer="m1")),
        report("m2", pi("m2", Severity.MEDIUM), finding("mem", A, Sub.CONTEXT_POISONING, Severity.HIGH, "m2")),
        report("m3", pi("m3")),
    ]


def by_key(model):
    return {(cf.finding.target.id, cf.finding.subtype or cf.finding.category): cf for cf in model.findings}


def test_unanimous_and_singleton_scores(fixture_graph):
    model = synthesize(three_reports(), fixture_graph("agent_arch_b"))
    got = by_key(model)
    assert got[("pp", Sub.PROMPT_INJECTION)].consensus_score == 1
    assert got[("tx", ThreatCategory.TAMPERING)].consensus_score == Fraction(1, 3)
    assert got[("mem", Sub.CONTEXT_POISONING)].consensus_score == Fraction(1, 3)
    assert got[("pp", Sub.PROMPT_INJECTION)].supporters == ("m1", "m2", "m3")
    assert model.summary["consensus_denominator"] == 3


def test_max_and_median_severity(fixture_graph):
    g = fixture_graph("agent_arch_b")
    reps = three_reports()
    assert by_key(synthesize(reps, g))[("pp", Sub.PROMPT_INJECTION)].final_severity is Severity.HIGH
    reps[0] = report("m1", finding("pp", A, Sub.PROMPT_INJECTION, Severity.LOW, "m1"))
    reps[2] = report("m3", finding("pp", A, Sub.PROMPT_INJECTION, Severity.CRITICAL, "m3"))
    assert by_key(synthesize(reps, g, severity_rule="median"))[("pp", Sub.PROMPT_INJECTION)].final_severity \
        is Severity.MEDIUM


def test_ranking_order(fixture_graph):
    model = synthesize(three_reports(), fixture_graph("agent_arch_b"))
    assert [cf.rank for cf in model.findings] == list(range(1, len(model.findings) + 1))
    keys = [(cf.finding.target.id, cf.finding.category) for cf in model.findings]
    # unanimous first, then High before Medium at 1/3
    assert keys == [("pp", A), ("mem", A), ("tx", ThreatCategory.TAMPERING)]


def test_permutation_invariance(fixture_graph):
    g = fixture_graph("agent_arch_b")
    reps = three_reports() + [report("dead", status=ReportStatus.FAILED)]
    outputs = {synthesize(list(p), g).to_json() for p in itertools.permutations(reps)}
    assert len(outputs) == 1


def test_threshold_and_failed_reports(fixture_graph):
    g = fixture_graph("agent_arch_b")
    reps = three_reports() + [report("dead", status=ReportStatus.FAILED)]
    model = synthesize(reps, g, threshold=Fraction(1, 2))
    assert [cf.finding.target.id for cf in model.findings] == ["pp"]
    assert model.summary["below_threshold"] == 2
    assert model.summary["failed_analyzers"] == ["dead"]
    assert model.summary["consensus_denominator"] == 3
    with pytest.raises(ValueError):
        synthesize(reps, g, threshold=2)


def test_no_usable_reports(fixture_graph):
    with pytest.raises(NoUsableReports):
        synthesize([report("dead", status=ReportStatus.FAILED)], fixture_graph("agent_arch_b"))


def test_mitigation_union_and_rationale(fixture_graph):
    reps = [report("m1", finding("pp", A, Sub.PROMPT_INJECTION, analyzer="m1", mitigations=("a", "b"))),
            report("m2", finding("pp", A, Sub.PROMPT_INJECTION, analyzer="m2", mitigations=("b", "c")))]
    (cf,) = synthesize(reps, fixture_graph("agent_arch_b")).findings
    assert cf.finding.mitigations == ("a", "b", "c")
    assert "[m1] m1 says so" in cf.finding.rationale and "[m2] m2 says so" in cf.finding.rationale


def test_quarantine(fixture_graph):
    reps = [report("m1", finding("pp", A, Sub.PROMPT_INJECTION, analyzer="m1"),
                   finding("frobnicator", ThreatCategory.SPOOFING, analyzer="m1", kind="unresolved"))]
    model = synthesize(reps, fixture_graph("agent_arch_b"))
    assert [cf.finding.target.id for cf in model.findings] == ["pp"]
    assert model.summary["quarantined"] == [
        {"analyzer": "m1", "target": "frobnicator", "category": "Spoofing", "subtype": None}]


def test_idempotence(fixture_graph):
    g = fixture_graph("agent_arch_b")
    first = synthesize(three_reports(), g)
    again = synthesize([rewrap(first)], g)
    assert {cf.finding.key for cf in again.findings} == {cf.finding.key for cf in first.findings}
    assert all(cf.consensus_score == 1 for cf in again.findings)


def test_conservation(fixture_graph):
    reps = three_reports()
    asserted = {f.key for r in reps for f in r.findings}
    model = synthesize(reps, fixture_graph("agent_arch_b"))
    assert {cf.finding.key for cf in model.findings} <= asserted


def test_reasoning_prompt_contract(fixture_graph):
    g = fixture_graph("agent_arch_b")
    reps = three_reports()[:2]
    req = build_reasoning_prompt(reps, g)
    user = req.messages[1].content
    assert "m1" in user and "m2" in user
    assert '"PromptInjection"' in user and '"ContextPoisoning"' in user
    assert build_reasoning_prompt(list(reversed(reps)), g) == req
    empty = build_reasoning_prompt([report("m1")], g)
    assert "no candidate threats" in empty.messages[1].content


def test_weighted_reasoner_lifts_singleton(fixture_graph):
    g = fixture_graph("agent_arch_b")
    confirm = findings_reply([{"category": "Tampering", "target": "tx", "severity": "Medium",
                               "mitigations": ["sign requests"]}])
    with MockBackend(MockBehavior(confirm)) as srv:
        cfg = BackendConfig("judge", BackendKind.REMOTE, srv.url, "reasoner", 2000, 0)
        model = synthesize_with_reasoner(three_reports(), g, cfg)
    assert model.reasoner_used
    got = by_key(model)
    assert got[("tx", ThreatCategory.TAMPERING)].consensus_score == Fraction(3, 5)
    assert got[("mem", Sub.CONTEXT_POISONING)].consensus_score == Fraction(1, 5)
    assert model.summary["consensus_denominator"] == 5


def test_reasoner_unresolved_target_is_quarantined(fixture_graph):
    g = fixture_graph("agent_arch_b")
    reply = findings_reply([{"category": "Spoofing", "target": "frobnicator", "severity": "Low",
                             "mitigations": ["x"]}])
    with MockBackend(MockBehavior(reply)) as srv:
        cfg = BackendConfig("judge", BackendKind.REMOTE, srv.url, "reasoner", 2000, 0)
        model = synthesize_with_reasoner(three_reports(), g, cfg)
    assert model.summary["quarantined"][0]["analyzer"] == "judge"
    assert all(cf.finding.target.id != "frobnicator" for cf in model.findings)


def test_reasoner_failure_falls_back(fixture_graph):
    g = fixture_graph("agent_arch_b")
    with MockBackend(MockBehavior(status=500)) as srv:
        cfg = BackendConfig("judge", BackendKind.REMOTE, srv.url, "reasoner", 500, 0)
        model = synthesize_with_reasoner(three_reports(), g, cfg)
        assert model == synthesize(three_reports(), g)
        assert not model.reasoner_used
        with pytest.raises(NoUsableReports):
            synthesize_with_reasoner(three_reports(), g, cfg, allow_fallback=False)


@pytest.mark.parametrize("text, expected", [
    ("pp", ("pp", "node")),
    ("Prompt Processor", ("pp", "node")),
    ("the reasoning core component", ("rc", "node")),
    ("TOOL-EXECUTION module", ("tx", "node")),
    ("e2", ("e2", "edge")),
    ("rc -> tx", ("e3", "edge")),
    ("tool call", ("e3", "edge")),
    ("frobnicator", ("frobnicator", "unresolved")),
    ("", ("", "unresolved")),
])
def test_normalize_target(fixture_graph, text, expected):
    t = normalize_target(text, fixture_graph("agent_arch_a"))
    assert (t.id, t.kind) == expected
