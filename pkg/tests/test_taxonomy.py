from __future__ import annotations

import json

import pytest

from astride.taxonomy import (
    DEFAULT_TAXONOMY,
    AiThreatSubtype,
    ElementKind,
    Severity,
    TaxonomyError,
    ThreatCategory,
    UnknownThreatKey,
    apply_override,
    category_from_name,
    load_taxonomy,
    lookup_applicable,
    lookup_mitigations,
    severity_from_name,
    subtype_from_name,
)

C = ThreatCategory
K = ElementKind
Sub = AiThreatSubtype

# Default rows written out independently of the module's own table.
EXPECTED_ROWS = {
    K.EXTERNAL_ENTITY: ("SR", set()),
    K.PROCESS: ("STRIDE", set()),
    K.DATA_STORE: ("TRID", set()),
    K.AGENT_CORE: ("STRIDE", {Sub.PROMPT_INJECTION, Sub.REASONING_SUBVERSION, Sub.MODEL_MANIPULATION}),
    K.PROMPT_INTERFACE: ("TID", {Sub.PROMPT_INJECTION}),
    K.MEMORY_STORE: ("TRID", {Sub.CONTEXT_POISONING, Sub.MEMORY_MISUSE}),
    K.TOOL_INTERFACE: ("STE", {Sub.UNSAFE_TOOL_INVOCATION}),
    K.MODEL_ENDPOINT: ("SID", {Sub.MODEL_MANIPULATION}),
}
LETTER = {"S": C.SPOOFING, "T": C.TAMPERING, "R": C.REPUDIATION, "I": C.INFORMATION_DISCLOSURE,
          "D": C.DENIAL_OF_SERVICE, "E": C.ELEVATION_OF_PRIVILEGE}


def test_enums_have_canonical_names():
    assert len(ThreatCategory) == 7
    assert [c.code for c in ThreatCategory] == list("ASTRIDE")
    assert len(AiThreatSubtype) == 7
    assert len(ElementKind) == 8
    assert sorted(Severity) == [Severity.LOW, Severity.MEDIUM, Severity.HIGH, Severity.CRITICAL]


@pytest.mark.parametrize("kind", list(ElementKind))
def test_default_matrix_rows(kind):
    letters, subtypes = EXPECTED_ROWS[kind]
    cats, subs = lookup_applicable(kind)
    expected = {LETTER[ch] for ch in letters} | ({C.AI_AGENT_SPECIFIC} if subtypes else set())
    assert cats == expected
    assert subs == subtypes


def test_mitigation_coverage_for_every_reachable_key():
    for category, subtype in DEFAULT_TAXONOMY.reachable_keys():
        assert lookup_mitigations(category, subtype)


@pytest.mark.parametrize("subtype, phrases", [
    (Sub.PROMPT_INJECTION, ["input sanitization", "prompt filtering with zero-trust validation"]),
    (Sub.CONTEXT_POISONING, ["context integrity validation", "memory hashing with provenance tracking"]),
])
def test_named_mitigations(subtype, phrases):
    got = lookup_mitigations(C.AI_AGENT_SPECIFIC, subtype)
    for phrase in phrases:
        assert phrase in got


def test_unknown_key():
    with pytest.raises(UnknownThreatKey):
        lookup_mitigations(C.AI_AGENT_SPECIFIC, None)


def test_default_severities():
    sev = DEFAULT_TAXONOMY.default_severity
    assert sev(C.ELEVATION_OF_PRIVILEGE) is Severity.HIGH
    assert sev(C.TAMPERING) is Severity.MEDIUM
    assert sev(C.AI_AGENT_SPECIFIC, Sub.PROMPT_INJECTION) is Severity.HIGH
    assert sev(C.AI_AGENT_SPECIFIC, Sub.MODEL_MANIPULATION) is Severity.MEDIUM


def test_lenient_name_lookup():
    assert category_from_name("information disclosure") is C.INFORMATION_DISCLOSURE
    assert category_from_name("A") is C.AI_AGENT_SPECIFIC
    assert subtype_from_name("prompt_injection") is Sub.PROMPT_INJECTION
    assert severity_from_name("CRITICAL") is Severity.CRITICAL
    with pytest.raises(ValueError):
        subtype_from_name("telepathy")


def test_override_merges_per_key(tmp_path):
    path = tmp_path / "o.json"
    path.write_text(json.dumps({
        "severities": {"Spoofing": "Critical"},
        "matrix": {"ExternalEntity": {"categories": ["Spoofing"]}},
        "mitigations": {"Spoofing": ["hardware keys"]},
    }))
    tax = load_taxonomy(path)
    assert tax.default_severity(C.SPOOFING) is Severity.CRITICAL
    assert tax.default_severity(C.TAMPERING) is Severity.MEDIUM
    assert tax.lookup_applicable(K.EXTERNAL_ENTITY)[0] == {C.SPOOFING}
    assert tax.lookup_mitigations(C.SPOOFING) == ["hardware keys"]
    assert tax.digest != DEFAULT_TAXONOMY.digest


@pytest.mark.parametrize("override", [
    {"bogus": 1},
    {"severities": {"Spoofing": "Apocalyptic"}},
    {"matrix": {"Robot": {"categories": []}}},
    {"mitigations": {"AiAgentSpecific": ["x"]}},
    # a newly reachable key with no mitigations
    {"flows": {"internal": {"subtypes": ["ModelManipulation"]}}, "mitigations": {"AiAgentSpecific/ModelManipulation": []}},
])
def test_invalid_override(override):
    with pytest.raises(TaxonomyError):
        apply_override(override)


def test_to_dict_round_trip_is_stable():
    d = DEFAULT_TAXONOMY.to_dict()
    assert len(d["categories"]) == 7
    assert apply_override({}).to_dict() == d


def test_taxonomy_pickles_for_worker_processes():
    import pickle

    tax = apply_override({"severities": {"Spoofing": "Low"}})
    clone = pickle.loads(pickle.dumps(tax))
    assert clone.to_dict() == tax.to_dict()
    assert clone.digest == tax.digest
