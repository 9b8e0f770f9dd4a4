"""Synthetic instruction-tuning corpus of agent-architecture diagrams.

Each record holds a canonical Mermaid diagram, its diagram type, the task
instruction, and the rule engine's findings as labels. Generation is a pure
function of (count, seed, template weights); every record draws from its own
sub-seeded RNG so records can be built in parallel without changing output.
"""

from __future__ import annotations

import json
import os
import random
from fractions import Fraction
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .dfd import parse_diagram, serialize_diagram
from .rules import Finding, elicit
from .taxonomy import DEFAULT_TAXONOMY, ElementKind, Taxonomy

INSTRUCTION = (
    "Analyze the Mermaid architecture diagram of this AI agent-based application. "
    "Identify STRIDE threats and recommend corresponding mitigations, including AI agent-specific "
    "(A) threats, and bind each threat to the affected component or data flow."
)

TEMPLATE_TYPES = {
    "pipeline": "data-flow",
    "hub": "component",
    "mesh": "trust-boundary",
}
DEFAULT_TEMPLATE_WEIGHTS = {"pipeline": 1, "hub": 1, "mesh": 1}
MIN_NODES, MAX_NODES = 3, 12

K = ElementKind
VOCABULARY: dict[ElementKind, tuple[str, ...]] = {
    K.EXTERNAL_ENTITY: ("User", "Mobile Client", "External Partner", "Web Client", "End User"),
    K.PROCESS: ("Billing Service", "Scheduler", "Notification Service", "Response Generator",
                "Audit Logger", "Report Builder", "Payment Gateway", "Search Service"),
    K.DATA_STORE: ("Customer Database", "Document Store", "Vector Index", "Audit Log Store",
                   "Knowledge Base", "Order Ledger"),
    K.AGENT_CORE: ("Reasoning Core", "Planner Agent", "Intent & Reasoning", "LLM Controller",
                   "Research Agent", "Support Agent", "Coding Agent", "Review Agent"),
    K.PROMPT_INTERFACE: ("Prompt Processor", "NLU Module", "Prompt Gateway", "Prompt Router"),
    K.MEMORY_STORE: ("Contextual Memory", "Session Memory", "Long-term Memory", "Shared Memory",
                     "Episodic Memory"),
    K.TOOL_INTERFACE: ("Tool Execution Module", "Tool Router", "Web Search Tool",
                       "Code Execution Sandbox", "Payment API", "Email Tool"),
    K.MODEL_ENDPOINT: ("Model Endpoint", "Embedding Model", "Inference Endpoint", "Vision Model"),
}
_ID_PREFIX = {
    K.EXTERNAL_ENTITY: "user", K.PROCESS: "svc", K.DATA_STORE: "db", K.AGENT_CORE: "agent",
    K.PROMPT_INTERFACE: "prompt", K.MEMORY_STORE: "mem", K.TOOL_INTERFACE: "tool",
    K.MODEL_ENDPOINT: "model",
}
_SHAPE_OPEN = {K.DATA_STORE: ("[(", ")]"), K.MEMORY_STORE: ("[(", ")]"),
               K.EXTERNAL_ENTITY: ("([", "])")}
_FLOW_LABELS = ("request", "query", "tool call", "results", "context", "plan", "response",
                "events", "records", "instructions", "embeddings")
_BOUNDARY_LABELS = ("Agent Runtime", "Trusted Zone", "Tool Sandbox", "Private Network",
                    "Tenant Boundary", "Core Services")


class TooFewRecords(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    content: str
    type: str
    instruction: str
    expected: tuple[Finding, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "type": self.type,
            "instruction": self.instruction,
            "expected": [f.to_dict() for f in self.expected],
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetRecord":
        return cls(d["content"], d["type"], d["instruction"],
                   tuple(Finding.from_dict(f) for f in d["expected"]))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[DatasetRecord, ...]
    validation: tuple[DatasetRecord, ...]
    test: tuple[DatasetRecord, ...]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


class _Builder:
    """Accumulates a diagram as nodes, nested boundaries and flows, then renders text."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.nodes: list[tuple[str, str, ElementKind, Optional[int]]] = []
        self.bounds: list[tuple[str, Optional[int]]] = []
        self.edges: list[tuple[str, str, Optional[str]]] = []
        self._used_labels: set[str] = set()
        self._counters: dict[ElementKind, int] = {}

    def boundary(self, parent: Optional[int] = None, label: Optional[str] = None) -> int:
        free = [b for b in _BOUNDARY_LABELS if b not in {x for x, _ in self.bounds}]
        self.bounds.append((label or self.rng.choice(free or list(_BOUNDARY_LABELS)), parent))
        return len(self.bounds) - 1

    def node(self, kind: ElementKind, boundary: Optional[int] = None) -> str:
        n = self._counters.get(kind, 0) + 1
        self._counters[kind] = n
        choices = [v for v in VOCABULARY[kind] if v not in self._used_labels]
        label = self.rng.choice(choices) if choices else f"{VOCABULARY[kind][0]} {n}"
        self._used_labels.add(label)
        node_id = f"{_ID_PREFIX[kind]}{n}"
        self.nodes.append((node_id, label, kind, boundary))
        return node_id

    def flow(self, a: str, b: str) -> None:
        label = self.rng.choice(_FLOW_LABELS) if self.rng.random() < 0.7 else None
        self.edges.append((a, b, label))

    def render(self, title: str) -> str:
        lines = ["---", f"title: {title}", "---", f"flowchart {self.rng.choice(('TD', 'LR'))}"]

        def emit(container: Optional[int], depth: int) -> None:
            pad = "    " * depth
            for node_id, label, kind, b in self.nodes:
                if b == container:
                    op, cl = _SHAPE_OPEN.get(kind, ("[", "]"))
                    lines.append(f"{pad}{node_id}{op}{label}{cl}")
            for i, (label, parent) in enumerate(self.bounds):
                if parent == container:
                    lines.append(f"{pad}subgraph z{i + 1}[{label}]")
                    emit(i, depth + 1)
                    lines.append(f"{pad}end")

        emit(None, 1)
        for a, b, label in self.edges:
            lines.append(f"    {a} -->|{label}| {b}" if label else f"    {a} --> {b}")
        return "\n".join(lines) + "\n"


def _pipeline(rng: random.Random) -> _Builder:
    b = _Builder(rng)
    n = rng.randint(MIN_NODES, MAX_NODES)
    kinds = [K.EXTERNAL_ENTITY]
    if rng.random() < 0.7:
        kinds.append(K.PROMPT_INTERFACE)
    kinds.append(K.AGENT_CORE)
    fillers = (K.TOOL_INTERFACE, K.PROCESS, K.MODEL_ENDPOINT, K.DATA_STORE, K.MEMORY_STORE, K.AGENT_CORE)
    while len(kinds) < n:
        kinds.append(rng.choice(fillers))
    kinds = kinds[:n]
    # One boundary over a contiguous run after the entry point, optionally with a nested run.
    start = rng.randint(1, max(1, n - 2))
    stop = rng.randint(start + 1, n)
    outer = b.boundary()
    inner = None
    if stop - start >= 3 and rng.random() < 0.4:
        inner = b.boundary(parent=outer)
        i0 = rng.randint(start, stop - 2)
        i1 = rng.randint(i0 + 1, stop)
    ids = []
    for i, kind in enumerate(kinds):
        where = None
        if start <= i < stop:
            where = inner if inner is not None and i0 <= i < i1 else outer
        ids.append(b.node(kind, where))
    for x, y in zip(ids, ids[1:]):
        b.flow(x, y)
    if rng.random() < 0.5:
        b.flow(ids[-1], ids[0])
    return b


def _hub(rng: random.Random) -> _Builder:
    b = _Builder(rng)
    runtime = b.boundary(label="Agent Runtime")
    user = b.node(K.EXTERNAL_ENTITY)
    budget = rng.randint(MIN_NODES, MAX_NODES) - 1
    prompt = None
    if budget >= 3 and rng.random() < 0.8:
        prompt = b.node(K.PROMPT_INTERFACE, runtime)
        budget -= 1
    agent = b.node(K.AGENT_CORE, runtime)
    budget -= 1
    b.flow(user, prompt or agent)
    if prompt:
        b.flow(prompt, agent)
    mems = min(budget, rng.randint(1, 2))
    for _ in range(mems):
        mem = b.node(K.MEMORY_STORE, runtime)
        b.flow(agent, mem)
        if rng.random() < 0.85:
            b.flow(mem, agent)
    budget -= mems
    sandbox = b.boundary(parent=runtime, label="Tool Sandbox") if budget >= 2 and rng.random() < 0.5 else runtime
    while budget > 0:
        kind = rng.choice((K.TOOL_INTERFACE, K.TOOL_INTERFACE, K.MODEL_ENDPOINT, K.DATA_STORE, K.PROCESS))
        if kind is K.DATA_STORE:
            store = b.node(kind, None)
            b.flow(agent, store)
            b.flow(store, agent)
        else:
            tool = b.node(kind, sandbox if kind is K.TOOL_INTERFACE else runtime)
            b.flow(agent, tool)
            if rng.random() < 0.5:
                b.flow(tool, agent)
        budget -= 1
    if rng.random() < 0.6:
        b.flow(agent, user)
    return b


def _mesh(rng: random.Random) -> _Builder:
    b = _Builder(rng)
    total = rng.randint(max(MIN_NODES, 4), MAX_NODES)
    user = b.node(K.EXTERNAL_ENTITY)
    n_agents = min(rng.randint(2, 4), total - 1)
    agents, zones = [], []
    for _ in range(n_agents):
        zone = b.boundary()
        zones.append(zone)
        agents.append(b.node(K.AGENT_CORE, zone))
    b.flow(user, agents[0])
    for x, y in zip(agents, agents[1:]):
        b.flow(x, y)
    if n_agents > 2 and rng.random() < 0.5:
        b.flow(agents[-1], agents[0])
    left = total - 1 - n_agents
    shared = None
    while left > 0:
        i = rng.randrange(n_agents)
        kind = rng.choice((K.MEMORY_STORE, K.TOOL_INTERFACE, K.PROMPT_INTERFACE, K.MODEL_ENDPOINT, K.DATA_STORE))
        if kind is K.MEMORY_STORE and shared is None and rng.random() < 0.5:
            shared = b.node(kind, None)
            for a in agents:
                b.flow(a, shared)
            b.flow(shared, agents[-1])
        elif kind is K.PROMPT_INTERFACE:
            p = b.node(kind, zones[i])
            b.flow(user, p)
            b.flow(p, agents[i])
        else:
            x = b.node(kind, zones[i])
            b.flow(agents[i], x)
            if kind is K.MEMORY_STORE or rng.random() < 0.4:
                b.flow(x, agents[i])
        left -= 1
    return b


TEMPLATES = {"pipeline": _pipeline, "hub": _hub, "mesh": _mesh}


def apportion(count: int, weights: Mapping[str, float],
              rng: Optional[random.Random] = None) -> dict[str, int]:
    """Largest-remainder split of ``count`` across templates.

    Every template gets the floor or ceiling of its exact quota. Ties between
    equal remainders go to declaration order, or are drawn from ``rng`` so the
    expected count over many seeds equals the quota exactly.
    """
    names = list(weights)
    exact = {n: Fraction(str(w)) if isinstance(w, float) else Fraction(w) for n, w in weights.items()}
    total = sum(exact.values())
    if total <= 0 or any(w < 0 for w in exact.values()):
        raise ValueError("template weights must be non-negative with a positive sum")
    quotas = {n: count * exact[n] / total for n in names}
    alloc = {n: int(quotas[n]) for n in names}
    rest = count - sum(alloc.values())
    jitter = {n: (rng.random() if rng else 0.0, names.index(n)) for n in names}
    order = sorted(names, key=lambda n: (-(quotas[n] - alloc[n]), jitter[n]))
    for n in order[:rest]:
        alloc[n] += 1
    return alloc


def _build_record(seed: int, index: int, template: str, taxonomy: Taxonomy) -> DatasetRecord:
    rng = random.Random(f"astride-record:{seed}:{index}")
    builder = TEMPLATES[template](rng)
    text = builder.render(f"{TEMPLATE_TYPES[template]} sample {index}")
    content = serialize_diagram(parse_diagram(text))
    labels = elicit(parse_diagram(content), taxonomy)
    return DatasetRecord(content, TEMPLATE_TYPES[template], INSTRUCTION, tuple(labels))


_worker_taxonomy: Optional[Taxonomy] = None


def _init_worker(taxonomy: Taxonomy) -> None:
    global _worker_taxonomy
    _worker_taxonomy = taxonomy


def _worker_build(job: tuple[int, int, str]) -> DatasetRecord:
    return _build_record(*job, _worker_taxonomy)


def template_plan(count: int, seed: int, weights: Optional[Mapping[str, float]] = None) -> list[str]:
    weights = dict(weights or DEFAULT_TEMPLATE_WEIGHTS)
    unknown = set(weights) - set(TEMPLATES)
    if unknown:
        raise ValueError(f"unknown templates: {sorted(unknown)}")
    rng = random.Random(f"astride-plan:{seed}")
    plan = [name for name, k in apportion(count, weights, rng).items() for _ in range(k)]
    rng.shuffle(plan)
    return plan


def generate(count: int, seed: int, weights: Optional[Mapping[str, float]] = None,
             taxonomy: Taxonomy = DEFAULT_TAXONOMY, workers: int = 1) -> list[DatasetRecord]:
    if count < 1:
        raise ValueError("count must be at least 1")
    plan = template_plan(count, seed, weights)
    jobs = [(seed, i, template) for i, template in enumerate(plan)]
    if workers > 1:
        # map() yields in submission order, so output order is by record index.
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(taxonomy,)) as pool:
            return list(pool.map(_worker_build, jobs, chunksize=32))
    return [_build_record(*job, taxonomy) for job in jobs]


def split_sizes(n: int) -> tuple[int, int, int]:
    """2/3 train and 1/6 validation rounded half-up; test takes the remainder."""
    train = (2 * n + 1) // 3
    validation = (n + 3) // 6
    return train, validation, n - train - validation


def split(records: Sequence[DatasetRecord], seed: int) -> DatasetSplit:
    n = len(records)
    if n < 6:
        raise TooFewRecords(f"need at least 6 records to split, got {n}")
    order = list(range(n))
    random.Random(f"astride-split:{seed}").shuffle(order)
    train, validation, _ = split_sizes(n)
    pick = [records[i] for i in order]
    return DatasetSplit(tuple(pick[:train]), tuple(pick[train:train + validation]),
                        tuple(pick[train + validation:]))


@dataclass
class Manifest:
    count: int
    seed: int
    template_weights: dict[str, float]
    taxonomy_version: str
    taxonomy_digest: str
    splits: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "seed": self.seed,
            "template_weights": self.template_weights,
            "template_types": TEMPLATE_TYPES,
            "taxonomy_version": self.taxonomy_version,
            "taxonomy_digest": self.taxonomy_digest,
            "splits": self.splits,
        }


def write_dataset(out_dir, count: int, seed: int, weights: Optional[Mapping[str, float]] = None,
                  taxonomy: Taxonomy = DEFAULT_TAXONOMY, workers: int = 1) -> Manifest:
    """Generate, split and write ``{train,validation,test}.jsonl`` plus ``manifest.json``."""
    weights = dict(weights or DEFAULT_TEMPLATE_WEIGHTS)
    records = generate(count, seed, weights, taxonomy, workers)
    parts = split(records, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", parts.train), ("validation", parts.validation), ("test", parts.test)):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for rec in rows:
                fh.write(rec.to_json_line() + "\n")
    manifest = Manifest(count, seed, weights, taxonomy.version, taxonomy.digest,
                        dict(zip(("train", "validation", "test"), parts.sizes())))
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")
    return manifest


def read_jsonl(path: os.PathLike | str) -> list[DatasetRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [DatasetRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
