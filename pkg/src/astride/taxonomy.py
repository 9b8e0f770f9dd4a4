"""ASTRIDE threat taxonomy: categories, AI-agent subtypes, element kinds,
the per-element applicability matrix, default severities and the mitigation
knowledge base.

Everything here is data. ``DEFAULT_TAXONOMY`` holds the compiled-in values and
``load_taxonomy`` layers a JSON override on top of them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Any, Mapping, Optional, Union

import jsonschema

TAXONOMY_VERSION = "astride-taxonomy/1"


class ThreatCategory(str, Enum):
    AI_AGENT_SPECIFIC = "AiAgentSpecific"
    SPOOFING = "Spoofing"
    TAMPERING = "Tampering"
    REPUDIATION = "Repudiation"
    INFORMATION_DISCLOSURE = "InformationDisclosure"
    DENIAL_OF_SERVICE = "DenialOfService"
    ELEVATION_OF_PRIVILEGE = "ElevationOfPrivilege"

    @property
    def code(self) -> str:
        return "A" if self is ThreatCategory.AI_AGENT_SPECIFIC else self.value[0]

    @property
    def order(self) -> int:
        """Position in A, S, T, R, I, D, E order."""
        return _CATEGORY_ORDER.index(self)


_CATEGORY_ORDER = list(ThreatCategory)
A = ThreatCategory.AI_AGENT_SPECIFIC
S = ThreatCategory.SPOOFING
T = ThreatCategory.TAMPERING
R = ThreatCategory.REPUDIATION
I = ThreatCategory.INFORMATION_DISCLOSURE  # noqa: E741
D = ThreatCategory.DENIAL_OF_SERVICE
E = ThreatCategory.ELEVATION_OF_PRIVILEGE
STRIDE = (S, T, R, I, D, E)


class AiThreatSubtype(str, Enum):
    PROMPT_INJECTION = "PromptInjection"
    CONTEXT_POISONING = "ContextPoisoning"
    REASONING_SUBVERSION = "ReasoningSubversion"
    UNSAFE_TOOL_INVOCATION = "UnsafeToolInvocation"
    MEMORY_MISUSE = "MemoryMisuse"
    INTER_AGENT_INFLUENCE = "InterAgentInfluence"
    MODEL_MANIPULATION = "ModelManipulation"


Sub = AiThreatSubtype


class ElementKind(str, Enum):
    EXTERNAL_ENTITY = "ExternalEntity"
    PROCESS = "Process"
    DATA_STORE = "DataStore"
    AGENT_CORE = "AgentCore"
    PROMPT_INTERFACE = "PromptInterface"
    MEMORY_STORE = "MemoryStore"
    TOOL_INTERFACE = "ToolInterface"
    MODEL_ENDPOINT = "ModelEndpoint"


class Severity(str, Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"
    CRITICAL = "Critical"

    @property
    def rank(self) -> int:
        return _SEVERITY_ORDER.index(self)

    def __lt__(self, other):
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other):
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other):
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank >= other.rank


_SEVERITY_ORDER = list(Severity)

ThreatKey = tuple[ThreatCategory, Optional[AiThreatSubtype]]


class TaxonomyError(ValueError):
    """Raised when a taxonomy override is malformed or breaks an invariant."""


class UnknownThreatKey(KeyError):
    def __init__(self, category, subtype=None):
        self.category = category
        self.subtype = subtype
        super().__init__(f"no mitigations for {format_key(category, subtype)}")


def format_key(category: ThreatCategory, subtype: Optional[AiThreatSubtype]) -> str:
    cat = getattr(category, "value", category)
    if subtype is None:
        return str(cat)
    return f"{cat}/{getattr(subtype, 'value', subtype)}"


def _norm_name(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


_CATEGORY_NAMES = {_norm_name(c.value): c for c in ThreatCategory}
# Letter codes and the usual short forms seen in model replies.
_CATEGORY_NAMES.update({c.code.lower(): c for c in ThreatCategory})
_CATEGORY_NAMES.update({
    "ai": ThreatCategory.AI_AGENT_SPECIFIC,
    "agentspecific": ThreatCategory.AI_AGENT_SPECIFIC,
    "dos": ThreatCategory.DENIAL_OF_SERVICE,
    "eop": ThreatCategory.ELEVATION_OF_PRIVILEGE,
    "privilegeescalation": ThreatCategory.ELEVATION_OF_PRIVILEGE,
})
_SUBTYPE_NAMES = {_norm_name(s.value): s for s in AiThreatSubtype}
_SEVERITY_NAMES = {_norm_name(s.value): s for s in Severity}


def category_from_name(name: str) -> ThreatCategory:
    """Case- and separator-insensitive lookup of a category name, letter code or short form."""
    try:
        return _CATEGORY_NAMES[_norm_name(name)]
    except KeyError:
        raise ValueError(f"unknown threat category {name!r}") from None


def subtype_from_name(name: str) -> AiThreatSubtype:
    try:
        return _SUBTYPE_NAMES[_norm_name(name)]
    except KeyError:
        raise ValueError(f"unknown AI threat subtype {name!r}") from None


def severity_from_name(name: str) -> Severity:
    try:
        return _SEVERITY_NAMES[_norm_name(name)]
    except KeyError:
        raise ValueError(f"unknown severity {name!r}") from None


@dataclass(frozen=True)
class MatrixRow:
    # Classic STRIDE categories only; A is implied by a non-empty subtype set.
    categories: frozenset[ThreatCategory]
    subtypes: frozenset[AiThreatSubtype] = frozenset()

    def all_categories(self) -> frozenset[ThreatCategory]:
        return self.categories | ({A} if self.subtypes else frozenset())

    def permits(self, category: ThreatCategory, subtype: Optional[AiThreatSubtype]) -> bool:
        if category is A:
            return subtype in self.subtypes
        return subtype is None and category in self.categories


@dataclass(frozen=True)
class MitigationEntry:
    key: ThreatKey
    mitigations: tuple[str, ...]


@dataclass(frozen=True)
class Taxonomy:
    matrix: Mapping[ElementKind, MatrixRow]
    crossing_flow: MatrixRow
    internal_flow: MatrixRow
    severities: Mapping[Union[ThreatCategory, AiThreatSubtype], Severity]
    mitigations: Mapping[ThreatKey, tuple[str, ...]]
    # Priority-ordered (kind, keywords); first kind with a matching keyword wins.
    lexicon: tuple[tuple[ElementKind, tuple[str, ...]], ...]
    version: str = TAXONOMY_VERSION

    def lookup_applicable(self, kind: ElementKind) -> tuple[frozenset[ThreatCategory], frozenset[AiThreatSubtype]]:
        row = self.matrix[kind]
        return row.all_categories(), row.subtypes

    def flow_row(self, crossing: bool) -> MatrixRow:
        return self.crossing_flow if crossing else self.internal_flow

    def lookup_mitigations(self, category: ThreatCategory,
                           subtype: Optional[AiThreatSubtype] = None) -> list[str]:
        try:
            return list(self.mitigations[(category, subtype)])
        except KeyError:
            raise UnknownThreatKey(category, subtype) from None

    def default_severity(self, category: ThreatCategory,
                         subtype: Optional[AiThreatSubtype] = None) -> Severity:
        key = subtype if category is A else category
        return self.severities.get(key, Severity.MEDIUM)

    def mitigation_entries(self) -> list[MitigationEntry]:
        return [MitigationEntry(k, v) for k, v in self.mitigations.items()]

    def reachable_keys(self) -> set[ThreatKey]:
        keys: set[ThreatKey] = set()
        for row in [*self.matrix.values(), self.crossing_flow, self.internal_flow]:
            keys.update((c, None) for c in row.categories)
            keys.update((A, s) for s in row.subtypes)
        return keys

    def validate(self) -> None:
        missing = [k for k in ElementKind if k not in self.matrix]
        if missing:
            raise TaxonomyError(f"matrix missing rows for {[k.value for k in missing]}")
        for row in [*self.matrix.values(), self.crossing_flow, self.internal_flow]:
            if A in row.categories:
                raise TaxonomyError("AiAgentSpecific is implied by subtypes; list subtypes instead")
        for key in sorted(self.reachable_keys(), key=lambda k: format_key(*k)):
            if not self.mitigations.get(key):
                raise TaxonomyError(f"no mitigations for reachable key {format_key(*key)}")
        if not self.lexicon:
            raise TaxonomyError("lexicon must not be empty")

    def to_dict(self) -> dict[str, Any]:
        def row_dict(row: MatrixRow) -> dict[str, list[str]]:
            return {
                "categories": [c.value for c in STRIDE if c in row.categories],
                "subtypes": [s.value for s in AiThreatSubtype if s in row.subtypes],
            }

        return {
            "version": self.version,
            "categories": [c.value for c in ThreatCategory],
            "subtypes": [s.value for s in AiThreatSubtype],
            "severities_scale": [s.value for s in Severity],
            "matrix": {k.value: row_dict(self.matrix[k]) for k in ElementKind},
            "flows": {
                "crossing": row_dict(self.crossing_flow),
                "internal": row_dict(self.internal_flow),
            },
            "severities": {
                **{c.value: self.severities[c].value for c in STRIDE if c in self.severities},
                **{s.value: self.severities[s].value for s in AiThreatSubtype if s in self.severities},
            },
            "mitigations": {format_key(*k): list(v) for k, v in self.mitigations.items()},
            "lexicon": [{"kind": k.value, "keywords": list(words)} for k, words in self.lexicon],
        }

    def __reduce__(self):
        # Mapping proxies do not pickle; rebuild them from plain dicts (needed by worker processes).
        return (_rebuild_taxonomy, (dict(self.matrix), self.crossing_flow, self.internal_flow,
                                    dict(self.severities), dict(self.mitigations), self.lexicon, self.version))

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _rebuild_taxonomy(matrix, crossing, internal, severities, mitigations, lexicon, version) -> Taxonomy:
    return Taxonomy(MappingProxyType(matrix), crossing, internal, MappingProxyType(severities),
                    MappingProxyType(mitigations), lexicon, version)


_DEFAULT_MATRIX = {
    ElementKind.EXTERNAL_ENTITY: MatrixRow(frozenset({S, R})),
    ElementKind.PROCESS: MatrixRow(frozenset(STRIDE)),
    ElementKind.DATA_STORE: MatrixRow(frozenset({T, R, I, D})),
    ElementKind.AGENT_CORE: MatrixRow(
        frozenset(STRIDE),
        frozenset({Sub.PROMPT_INJECTION, Sub.REASONING_SUBVERSION, Sub.MODEL_MANIPULATION}),
    ),
    ElementKind.PROMPT_INTERFACE: MatrixRow(frozenset({T, I, D}), frozenset({Sub.PROMPT_INJECTION})),
    ElementKind.MEMORY_STORE: MatrixRow(
        frozenset({T, R, I, D}),
        frozenset({Sub.CONTEXT_POISONING, Sub.MEMORY_MISUSE}),
    ),
    ElementKind.TOOL_INTERFACE: MatrixRow(frozenset({S, T, E}), frozenset({Sub.UNSAFE_TOOL_INVOCATION})),
    ElementKind.MODEL_ENDPOINT: MatrixRow(frozenset({S, I, D}), frozenset({Sub.MODEL_MANIPULATION})),
}

_FLOW_SUBTYPES = frozenset({Sub.UNSAFE_TOOL_INVOCATION, Sub.INTER_AGENT_INFLUENCE, Sub.MEMORY_MISUSE})

_DEFAULT_SEVERITIES = {
    S: Severity.MEDIUM,
    T: Severity.MEDIUM,
    R: Severity.MEDIUM,
    I: Severity.MEDIUM,
    D: Severity.MEDIUM,
    E: Severity.HIGH,
    Sub.PROMPT_INJECTION: Severity.HIGH,
    Sub.CONTEXT_POISONING: Severity.HIGH,
    Sub.UNSAFE_TOOL_INVOCATION: Severity.HIGH,
    Sub.REASONING_SUBVERSION: Severity.MEDIUM,
    Sub.MEMORY_MISUSE: Severity.MEDIUM,
    Sub.INTER_AGENT_INFLUENCE: Severity.MEDIUM,
    Sub.MODEL_MANIPULATION: Severity.MEDIUM,
}

_DEFAULT_MITIGATIONS: dict[ThreatKey, tuple[str, ...]] = {
    (S, None): (
        "mutual authentication between callers and services",
        "short-lived signed identity tokens",
    ),
    (T, None): (
        "integrity controls such as message signing and checksums",
        "input validation at every trust-boundary crossing",
    ),
    (R, None): (
        "tamper-evident audit logging",
        "signed, timestamped transaction records",
    ),
    (I, None): (
        "encryption in transit and at rest",
        "least-privilege data access and output filtering",
    ),
    (D, None): (
        "rate limiting and request quotas",
        "resource isolation with timeouts and circuit breakers",
    ),
    (E, None): (
        "least-privilege authorization checks on every action",
        "sandboxed execution with role separation",
    ),
    (A, Sub.PROMPT_INJECTION): (
        "input sanitization",
        "prompt filtering with zero-trust validation",
        "separation of system instructions from untrusted content",
    ),
    (A, Sub.CONTEXT_POISONING): (
        "context integrity validation",
        "memory hashing with provenance tracking",
        "write access control on context stores",
    ),
    (A, Sub.REASONING_SUBVERSION): (
        "reasoning constraints with justification trails",
        "policy checks on agent plans before execution",
    ),
    (A, Sub.UNSAFE_TOOL_INVOCATION): (
        "access control for API invocations",
        "tool allow-listing with argument validation",
        "human approval for high-impact actions",
    ),
    (A, Sub.MEMORY_MISUSE): (
        "memory scoping per session and principal",
        "retention limits and redaction of sensitive context",
    ),
    (A, Sub.INTER_AGENT_INFLUENCE): (
        "authenticated, schema-validated inter-agent messages",
        "provenance tagging of delegated instructions",
    ),
    (A, Sub.MODEL_MANIPULATION): (
        "model artifact signing and integrity verification",
        "monitoring for output drift and anomalous behaviour",
    ),
}

DEFAULT_LEXICON: tuple[tuple[ElementKind, tuple[str, ...]], ...] = (
    (ElementKind.AGENT_CORE, ("agent", "reasoning", "llm", "planner")),
    (ElementKind.PROMPT_INTERFACE, ("prompt", "nlu")),
    (ElementKind.MEMORY_STORE, ("memory", "context store")),
    (ElementKind.TOOL_INTERFACE, ("tool", "execution", "api")),
    (ElementKind.MODEL_ENDPOINT, ("model", "endpoint")),
    (ElementKind.EXTERNAL_ENTITY, ("user", "client", "external")),
)

DEFAULT_TAXONOMY = Taxonomy(
    matrix=MappingProxyType(dict(_DEFAULT_MATRIX)),
    crossing_flow=MatrixRow(frozenset({T, I, D}), _FLOW_SUBTYPES),
    internal_flow=MatrixRow(frozenset(), _FLOW_SUBTYPES),
    severities=MappingProxyType(dict(_DEFAULT_SEVERITIES)),
    mitigations=MappingProxyType(dict(_DEFAULT_MITIGATIONS)),
    lexicon=DEFAULT_LEXICON,
)


def lookup_applicable(kind: ElementKind, taxonomy: Taxonomy = DEFAULT_TAXONOMY):
    return taxonomy.lookup_applicable(kind)


def lookup_mitigations(category: ThreatCategory, subtype: Optional[AiThreatSubtype] = None,
                       taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> list[str]:
    return taxonomy.lookup_mitigations(category, subtype)


# --------------------------------------------------------------------------
# Override files
# --------------------------------------------------------------------------

_ROW_SCHEMA = {
    "type": "object",
    "properties": {
        "categories": {"type": "array", "items": {"enum": [c.value for c in STRIDE]}, "uniqueItems": True},
        "subtypes": {"type": "array", "items": {"enum": [s.value for s in AiThreatSubtype]}, "uniqueItems": True},
    },
    "additionalProperties": False,
}

OVERRIDE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "version": {"type": "string"},
        "matrix": {
            "type": "object",
            "propertyNames": {"enum": [k.value for k in ElementKind]},
            "additionalProperties": _ROW_SCHEMA,
        },
        "flows": {
            "type": "object",
            "properties": {"crossing": _ROW_SCHEMA, "internal": _ROW_SCHEMA},
            "additionalProperties": False,
        },
        "severities": {
            "type": "object",
            "propertyNames": {"enum": [c.value for c in STRIDE] + [s.value for s in AiThreatSubtype]},
            "additionalProperties": {"enum": [s.value for s in Severity]},
        },
        "mitigations": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1},
        },
        "lexicon": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "kind": {"enum": [k.value for k in ElementKind]},
                    "keywords": {"type": "array", "items": {"type": "string", "minLength": 1}},
                },
                "required": ["kind", "keywords"],
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def _row_from(obj: Mapping[str, Any], base: MatrixRow) -> MatrixRow:
    cats = base.categories
    subs = base.subtypes
    if "categories" in obj:
        cats = frozenset(ThreatCategory(c) for c in obj["categories"])
    if "subtypes" in obj:
        subs = frozenset(AiThreatSubtype(s) for s in obj["subtypes"])
    return MatrixRow(cats, subs)


def _parse_mitigation_key(text: str) -> ThreatKey:
    cat_name, _, sub_name = text.partition("/")
    try:
        cat = ThreatCategory(cat_name)
        sub = AiThreatSubtype(sub_name) if sub_name else None
    except ValueError:
        raise TaxonomyError(f"invalid mitigation key {text!r}") from None
    if (cat is A) != (sub is not None):
        raise TaxonomyError(f"mitigation key {text!r}: a subtype is required exactly for AiAgentSpecific")
    return cat, sub


def apply_override(override: Mapping[str, Any], base: Taxonomy = DEFAULT_TAXONOMY) -> Taxonomy:
    """Merge an override document over ``base`` and validate the result.

    Matrix rows, severities and mitigation lists replace per key; a supplied
    lexicon replaces the whole table.
    """
    try:
        jsonschema.validate(override, OVERRIDE_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise TaxonomyError(f"taxonomy override invalid at {path}: {exc.message}") from None

    matrix = dict(base.matrix)
    for kind, row in override.get("matrix", {}).items():
        matrix[ElementKind(kind)] = _row_from(row, matrix[ElementKind(kind)])
    flows = override.get("flows", {})
    crossing = _row_from(flows.get("crossing", {}), base.crossing_flow)
    internal = _row_from(flows.get("internal", {}), base.internal_flow)

    severities = dict(base.severities)
    for name, sev in override.get("severities", {}).items():
        key = ThreatCategory(name) if name in {c.value for c in STRIDE} else AiThreatSubtype(name)
        severities[key] = Severity(sev)

    mitigations = dict(base.mitigations)
    for key_text, items in override.get("mitigations", {}).items():
        mitigations[_parse_mitigation_key(key_text)] = tuple(items)

    lexicon = base.lexicon
    if "lexicon" in override:
        lexicon = tuple((ElementKind(e["kind"]), tuple(w.lower() for w in e["keywords"]))
                        for e in override["lexicon"])

    tax = Taxonomy(
        matrix=MappingProxyType(matrix),
        crossing_flow=crossing,
        internal_flow=internal,
        severities=MappingProxyType(severities),
        mitigations=MappingProxyType(mitigations),
        lexicon=lexicon,
        version=override.get("version", base.version),
    )
    tax.validate()
    return tax


def load_taxonomy(path=None) -> Taxonomy:
    """Return the defaults, or the defaults overlaid with the JSON file at ``path``."""
    if path is None:
        return DEFAULT_TAXONOMY
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TaxonomyError(f"taxonomy override is not valid JSON: {exc}") from None
    return apply_override(data)
