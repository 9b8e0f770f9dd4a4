"""Analyzer consortium: prompt construction, the chat-completion wire
protocol, reply parsing and concurrent fan-out with fault isolation."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

import httpx
import jsonschema

from .dfd import DiagramGraph, serialize_diagram
from .rules import LOCAL_ANALYZER, Finding, elicit
from .targets import normalize_target
from .taxonomy import (
    A,
    DEFAULT_TAXONOMY,
    AiThreatSubtype,
    Severity,
    Taxonomy,
    ThreatCategory,
    category_from_name,
    severity_from_name,
    subtype_from_name,
)

log = logging.getLogger(__name__)

PROMPT_VERSION = "astride-analysis/1"
TASK_INSTRUCTION = "Identify STRIDE threats and recommend corresponding mitigations"
MAX_PARALLEL = 8
BACKOFF_START_S = 0.25
ENDPOINT_ENV_PREFIX = "ASTRIDE_ENDPOINT_"


class BackendKind(str, Enum):
    REMOTE = "remote"
    LOCAL_RULES = "local-rules"


class ReportStatus(str, Enum):
    OK = "ok"
    PARSE_SALVAGED = "parse_salvaged"
    FAILED = "failed"


class ConfigError(ValueError):
    pass


class AllBackendsFailed(RuntimeError):
    def __init__(self, reports: Sequence["AnalyzerReport"]):
        self.reports = list(reports)
        names = ", ".join(r.analyzer for r in reports)
        super().__init__(f"every analyzer backend failed ({names})")


class TransportError(Exception):
    """A backend call failed; ``retryable`` covers connection errors, timeouts and 5xx."""

    def __init__(self, message: str, retryable: bool = True, status: Optional[int] = None):
        super().__init__(message)
        self.retryable = retryable
        self.status = status


@dataclass(frozen=True)
class BackendConfig:
    name: str
    kind: BackendKind = BackendKind.REMOTE
    endpoint: str = ""
    model: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 2
    api_key: Optional[str] = None

    def __post_init__(self):
        if not self.name:
            raise ConfigError("backend name must not be empty")
        if self.timeout_ms <= 0:
            raise ConfigError(f"backend {self.name!r}: timeout_ms must be positive")
        if not 0 <= self.max_retries <= 10:
            raise ConfigError(f"backend {self.name!r}: max_retries must be within 0..10")
        if self.kind is BackendKind.REMOTE and not (self.endpoint and self.model):
            raise ConfigError(f"backend {self.name!r}: remote backends need endpoint and model")

    @classmethod
    def local(cls, name: str = LOCAL_ANALYZER) -> "BackendConfig":
        return cls(name=name, kind=BackendKind.LOCAL_RULES)


@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user"
    content: str


@dataclass(frozen=True)
class AnalysisRequest:
    model: str
    messages: tuple[Message, ...]
    response_format_hint: str = "json"

    def to_payload(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "response_format": {"type": "json_object"},
            "stream": False,
        }


@dataclass(frozen=True)
class AnalyzerReport:
    analyzer: str
    findings: tuple[Finding, ...]
    raw_output: str
    latency_ms: float
    status: ReportStatus
    diagnostics: tuple[str, ...] = ()

    @property
    def failed(self) -> bool:
        return self.status is ReportStatus.FAILED

    def to_dict(self) -> dict[str, Any]:
        return {
            "analyzer": self.analyzer,
            "status": self.status.value,
            "latency_ms": round(self.latency_ms, 3),
            "findings": [f.to_dict() for f in self.findings],
            "diagnostics": list(self.diagnostics),
            "raw_output": self.raw_output,
        }


# --------------------------------------------------------------------------
# Prompt
# --------------------------------------------------------------------------

REPORT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["findings"],
    "properties": {
        "findings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["category", "target", "severity", "mitigations"],
                "properties": {
                    "category": {"enum": [c.value for c in ThreatCategory]},
                    "subtype": {
                        "enum": [s.value for s in AiThreatSubtype] + [None],
                        "description": "required when category is AiAgentSpecific, otherwise null",
                    },
                    "target": {"type": "string", "description": "node id or edge id from the element list"},
                    "severity": {"enum": [s.value for s in Severity]},
                    "rationale": {"type": "string"},
                    "mitigations": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                },
            },
        }
    },
}


def element_listing(graph: DiagramGraph) -> str:
    lines = []
    for n in graph.nodes:
        where = f", boundary {n.boundary_id}" if n.boundary_id else ", outside all boundaries"
        lines.append(f"- node {n.id}: {n.label!r} ({n.shape.value}{where})")
    for e in graph.edges:
        label = f" {e.label!r}" if e.label else ""
        lines.append(f"- edge {e.id}: {e.source} -> {e.target}{label}")
    return "\n".join(lines) if lines else "- (no elements)"


def build_analysis_prompt(graph: DiagramGraph, context: str = "", model: str = "") -> AnalysisRequest:
    """Build the system/user message pair sent to every remote analyzer."""
    system = "\n".join([
        f"[{PROMPT_VERSION}]",
        "You are a threat-modeling analyst for AI agent-based applications using the ASTRIDE taxonomy:",
        "STRIDE (Spoofing, Tampering, Repudiation, InformationDisclosure, DenialOfService,",
        "ElevationOfPrivilege) extended with A = AiAgentSpecific attacks on agentic workflows.",
        "",
        "Threat categories: " + ", ".join(c.value for c in ThreatCategory),
        "AiAgentSpecific subtypes: " + ", ".join(s.value for s in AiThreatSubtype),
        "Severities (ascending): " + ", ".join(s.value for s in Severity),
        "",
        "Rules:",
        "- Bind every threat to one element: a node id or an edge id from the element list.",
        "- Set subtype only for AiAgentSpecific threats; use null otherwise.",
        "- Give at least one concrete mitigation per threat.",
        "- Reply with one JSON document and nothing else, matching this JSON Schema:",
        json.dumps(REPORT_SCHEMA, indent=2),
    ])
    user = "\n".join([
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
        f"{TASK_INSTRUCTION} for every component and data flow above, including AI agent-specific "
        "(A) threats such as prompt injection, context poisoning, reasoning subversion and unsafe "
        "tool invocation. Respond with JSON only.",
    ])
    return AnalysisRequest(model=model, messages=(Message("system", system), Message("user", user)))


# --------------------------------------------------------------------------
# Reply parsing
# --------------------------------------------------------------------------

_FENCE = re.compile(r"```[A-Za-z0-9_+-]*[ \t]*\n(.*?)```", re.S)


def _salvage(raw: str) -> Any:
    m = _FENCE.search(raw)
    if m:
        try:
            return json.loads(m.group(1))
        except json.JSONDecodeError:
            pass
    decoder = json.JSONDecoder()
    for pos, ch in enumerate(raw):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(raw, pos)
                return value
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found in reply")


def _finding_from(obj: Any, analyzer: str, graph: DiagramGraph, taxonomy: Taxonomy) -> Finding:
    if not isinstance(obj, dict):
        raise ValueError("finding is not an object")
    if not isinstance(obj.get("category"), str):
        raise ValueError("missing category")
    category = category_from_name(obj["category"])
    sub_raw = obj.get("subtype")
    subtype = None
    if isinstance(sub_raw, str) and sub_raw.strip() and sub_raw.strip().lower() not in ("null", "none"):
        subtype = subtype_from_name(sub_raw)
    elif sub_raw not in (None, "") and not isinstance(sub_raw, str):
        raise ValueError(f"invalid subtype {sub_raw!r}")
    if category is A and subtype is None:
        raise ValueError("AiAgentSpecific finding without subtype")
    if category is not A and subtype is not None:
        raise ValueError(f"subtype {subtype.value} given for {category.value}")
    target_raw = obj.get("target")
    if not isinstance(target_raw, str) or not target_raw.strip():
        raise ValueError("missing target")
    sev_raw = obj.get("severity")
    severity = severity_from_name(sev_raw) if isinstance(sev_raw, str) else taxonomy.default_severity(category, subtype)
    mits = obj.get("mitigations")
    if isinstance(mits, str):
        mits = [mits]
    mitigations = tuple(m.strip() for m in (mits or []) if isinstance(m, str) and m.strip())
    if not mitigations:
        mitigations = tuple(taxonomy.lookup_mitigations(category, subtype))
    rationale = obj.get("rationale") if isinstance(obj.get("rationale"), str) else ""
    rule_id = obj.get("rule_id") if isinstance(obj.get("rule_id"), str) and obj.get("rule_id") else "model"
    return Finding(category, subtype, normalize_target(target_raw, graph), severity,
                   rationale, mitigations, rule_id, analyzer)


def parse_report(raw: str, analyzer: str, graph: DiagramGraph,
                 taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> AnalyzerReport:
    """Parse a backend reply. Never raises; failures come back as status=failed."""
    status = ReportStatus.OK
    try:
        doc = json.loads(raw)
        if not (isinstance(doc, dict) and isinstance(doc.get("findings"), list)):
            raise ValueError("top-level object with a 'findings' array expected")
        items = doc["findings"]
    except (ValueError, TypeError) as strict_err:
        try:
            doc = _salvage(raw)
        except ValueError as exc:
            return AnalyzerReport(analyzer, (), f"parse error: {exc}; {strict_err}\n{raw}", 0.0,
                                  ReportStatus.FAILED, (str(exc),))
        if isinstance(doc, dict) and isinstance(doc.get("findings"), list):
            items = doc["findings"]
        elif isinstance(doc, list):
            items = doc
        else:
            return AnalyzerReport(analyzer, (), f"parse error: salvaged JSON has no findings array\n{raw}",
                                  0.0, ReportStatus.FAILED, ("salvaged JSON has no findings array",))
        status = ReportStatus.PARSE_SALVAGED

    findings: list[Finding] = []
    diagnostics: list[str] = []
    for i, item in enumerate(items):
        try:
            findings.append(_finding_from(item, analyzer, graph, taxonomy))
        except (ValueError, KeyError) as exc:
            diagnostics.append(f"dropped finding #{i}: {exc}")
    if diagnostics:
        diagnostics.append(f"dropped {len(diagnostics)} of {len(items)} findings")
    unresolved = [f.target.id for f in findings if not f.target.resolved]
    if unresolved:
        diagnostics.append(f"unresolved targets: {', '.join(unresolved)}")
    return AnalyzerReport(analyzer, tuple(findings), raw, 0.0, status, tuple(diagnostics))


# --------------------------------------------------------------------------
# Transport
# --------------------------------------------------------------------------

Transport = Callable[[BackendConfig, dict, float], dict]


def http_transport(cfg: BackendConfig, payload: dict, timeout_s: float) -> dict:
    """POST ``payload`` to the backend endpoint; returns the decoded JSON body."""
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    try:
        resp = httpx.post(cfg.endpoint, json=payload, headers=headers, timeout=timeout_s)
    except httpx.TimeoutException as exc:
        raise TransportError(f"timeout after {timeout_s:.3f}s: {exc}") from exc
    except httpx.HTTPError as exc:
        raise TransportError(f"transport error: {exc}") from exc
    if resp.status_code >= 500:
        raise TransportError(f"HTTP {resp.status_code}", retryable=True, status=resp.status_code)
    if resp.status_code >= 400:
        raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", retryable=False,
                             status=resp.status_code)
    try:
        return resp.json()
    except ValueError as exc:
        raise TransportError(f"response body is not JSON: {exc}", retryable=False) from exc


def reply_content(body: Any) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError("response lacks choices[0].message.content", retryable=False) from None
    if not isinstance(content, str):
        raise TransportError("choices[0].message.content is not text", retryable=False)
    return content


def call_backend(cfg: BackendConfig, request: AnalysisRequest, transport: Optional[Transport] = None,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.monotonic) -> str:
    """Send ``request`` with retry and exponential backoff; return the reply text.

    All attempts and backoff sleeps share a budget of timeout * (max_retries + 1).
    """
    transport = transport or http_transport
    timeout_s = cfg.timeout_ms / 1000.0
    deadline = clock() + timeout_s * (cfg.max_retries + 1)
    payload = request.to_payload()
    delay = BACKOFF_START_S
    last: Optional[TransportError] = None
    for attempt in range(cfg.max_retries + 1):
        remaining = deadline - clock()
        if remaining <= 0:
            break
        try:
            return reply_content(transport(cfg, payload, min(timeout_s, remaining)))
        except TransportError as exc:
            last = exc
            log.info("backend %s attempt %d failed: %s", cfg.name, attempt + 1, exc)
            if not exc.retryable or attempt == cfg.max_retries:
                raise
            sleep(max(0.0, min(delay, deadline - clock())))
            delay *= 2
    raise last or TransportError("retry budget exhausted")


def run_backend(cfg: BackendConfig, graph: DiagramGraph, context: str = "",
                taxonomy: Taxonomy = DEFAULT_TAXONOMY, transport: Optional[Transport] = None,
                request: Optional[AnalysisRequest] = None) -> AnalyzerReport:
    """Produce one backend's report; transport and parse failures become status=failed."""
    if cfg.kind is BackendKind.LOCAL_RULES:
        findings = elicit(graph, taxonomy, analyzer=cfg.name)
        raw = json.dumps({"findings": [f.to_dict() for f in findings]}, indent=2, ensure_ascii=False)
        # No transport is involved, so latency is reported as zero to keep offline output reproducible.
        return AnalyzerReport(cfg.name, tuple(findings), raw, 0.0, ReportStatus.OK)

    if request is None:
        request = build_analysis_prompt(graph, context, model=cfg.model)
    else:
        request = dataclasses.replace(request, model=cfg.model)
    started = time.monotonic()
    try:
        content = call_backend(cfg, request, transport)
    except TransportError as exc:
        elapsed = (time.monotonic() - started) * 1000
        return AnalyzerReport(cfg.name, (), f"transport error: {exc}", elapsed, ReportStatus.FAILED, (str(exc),))
    elapsed = (time.monotonic() - started) * 1000
    report = parse_report(content, cfg.name, graph, taxonomy)
    return dataclasses.replace(report, latency_ms=elapsed)


def run_consortium(graph: DiagramGraph, backends: Sequence[BackendConfig], context: str = "",
                   taxonomy: Taxonomy = DEFAULT_TAXONOMY, transport: Optional[Transport] = None,
                   max_workers: Optional[int] = None) -> list[AnalyzerReport]:
    """Fan the diagram out to every backend concurrently.

    Reports come back in configuration order. Raises AllBackendsFailed only
    when no backend produced a usable report.
    """
    if not backends:
        raise ConfigError("at least one backend must be configured")
    names = [b.name for b in backends]
    if len(set(names)) != len(names):
        raise ConfigError(f"backend names must be unique: {names}")

    slots: list[Optional[AnalyzerReport]] = [None] * len(backends)

    def work(i: int) -> None:
        cfg = backends[i]
        try:
            slots[i] = run_backend(cfg, graph, context, taxonomy, transport)
        except Exception as exc:  # fault isolation: one backend never sinks the rest
            log.exception("backend %s crashed", cfg.name)
            slots[i] = AnalyzerReport(cfg.name, (), f"internal error: {exc!r}", 0.0,
                                      ReportStatus.FAILED, (repr(exc),))

    workers = max(1, min(max_workers or len(backends), MAX_PARALLEL))
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="astride-backend") as pool:
        list(pool.map(work, range(len(backends))))

    reports = [r for r in slots if r is not None]
    if all(r.failed for r in reports):
        raise AllBackendsFailed(reports)
    return reports


# --------------------------------------------------------------------------
# Configuration files
# --------------------------------------------------------------------------

_BACKEND_SCHEMA = {
    "type": "object",
    "required": ["name"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "kind": {"enum": [k.value for k in BackendKind]},
        "endpoint": {"type": "string"},
        "model": {"type": "string"},
        "timeout_ms": {"type": "integer", "exclusiveMinimum": 0},
        "max_retries": {"type": "integer", "minimum": 0, "maximum": 10},
        "api_key": {"type": ["string", "null"]},
    },
    "additionalProperties": False,
}

BACKENDS_FILE_SCHEMA = {
    "oneOf": [
        {"type": "array", "items": _BACKEND_SCHEMA},
        {
            "type": "object",
            "required": ["backends"],
            "properties": {
                "backends": {"type": "array", "items": _BACKEND_SCHEMA},
                "reasoner": {"type": ["string", "null"]},
            },
            "additionalProperties": False,
        },
    ]
}


def env_key(name: str) -> str:
    return ENDPOINT_ENV_PREFIX + re.sub(r"[^A-Za-z0-9]", "_", name).upper()


@dataclass
class BackendsFile:
    backends: list[BackendConfig] = field(default_factory=list)
    reasoner: Optional[str] = None


def parse_backends(data: Any, env: Optional[Mapping[str, str]] = None) -> BackendsFile:
    """Validate a backends document; ``ASTRIDE_ENDPOINT_<NAME>`` overrides endpoints."""
    env = os.environ if env is None else env
    try:
        jsonschema.validate(data, BACKENDS_FILE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"backends config invalid: {exc.message}") from None
    entries = data if isinstance(data, list) else data["backends"]
    reasoner = None if isinstance(data, list) else data.get("reasoner")
    out = []
    for entry in entries:
        entry = dict(entry)
        entry["kind"] = BackendKind(entry.get("kind", BackendKind.REMOTE.value))
        override = env.get(env_key(entry["name"]))
        if override:
            entry["endpoint"] = override
        out.append(BackendConfig(**entry))
    names = [b.name for b in out]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"duplicate backend names: {', '.join(dup)}")
    if reasoner is not None and reasoner not in names:
        raise ConfigError(f"reasoner {reasoner!r} is not a configured backend")
    return BackendsFile(out, reasoner)


def load_backends(path, env: Optional[Mapping[str, str]] = None) -> BackendsFile:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"backends config is not valid JSON: {exc}") from None
    return parse_backends(data, env)
