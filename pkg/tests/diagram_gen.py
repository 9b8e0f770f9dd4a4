"""Seeded random diagram text plus independent oracles used by the property tests."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

SHAPES = (("[", "]"), ("(", ")"), ("[(", ")]"), ("([", "])"), ("((", "))"))
WORDS = ("User", "Agent", "Prompt", "Memory", "Tool", "API", "Model", "Store", "Billing", "Gateway",
         "Planner", "Cache", "Queue", "Client", "Router", "Service", "Index", "Ledger")
FANCY = ("&", "-", "/", ":", ".", ",", "(v2)", "[beta]", "{x}", "#1", "'s")
FLOW_WORDS = ("request", "reply", "tool call", "context", "query", "plan", "events")


@dataclass
class GeneratedDiagram:
    text: str
    # node id -> innermost boundary id at its first appearance (None if top level)
    membership: dict[str, Optional[str]] = field(default_factory=dict)
    # boundary id -> parent boundary id
    parents: dict[str, Optional[str]] = field(default_factory=dict)
    # boundary id -> (open line, close line), 1-based, inclusive
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)
    # node id -> line of first appearance
    first_line: dict[str, int] = field(default_factory=dict)
    edge_count: int = 0


def _label(rng: random.Random, fancy: bool = True) -> str:
    words = [rng.choice(WORDS) for _ in range(rng.randint(1, 3))]
    if fancy and rng.random() < 0.3:
        words.insert(rng.randint(0, len(words)), rng.choice(FANCY))
    return " ".join(words)


def _decl(node_id: str, rng: random.Random) -> str:
    op, cl = rng.choice(SHAPES)
    label = _label(rng)
    if any(c in label for c in "[](){}|") or rng.random() < 0.1:
        label = f'"{label}"'
    return f"{node_id}{op}{label}{cl}"


def random_diagram(seed: int, max_nodes: int = 12) -> GeneratedDiagram:
    rng = random.Random(seed)
    out = GeneratedDiagram("")
    lines: list[str] = []
    if rng.random() < 0.3:
        lines += ["---", f"title: {_label(rng)}", "---"]
    lines.append(f"flowchart {rng.choice(('TD', 'LR'))}")

    n_nodes = rng.randint(1, max_nodes)
    ids = [f"n{i}" for i in range(n_nodes)]
    shaped: set[str] = set()
    stack: list[str] = []
    sg_counter = [0]

    def mention(node_id: str) -> None:
        if node_id not in out.membership:
            out.membership[node_id] = stack[-1] if stack else None
            out.first_line[node_id] = len(lines) + 1

    def ref(node_id: str) -> str:
        # Inline declaration is allowed only before any other shaped declaration of the id.
        if node_id not in shaped and rng.random() < 0.4:
            shaped.add(node_id)
            return _decl(node_id, rng)
        return node_id

    def block(depth: int, budget: int) -> None:
        for _ in range(budget):
            pad = "    " * (depth + 1)
            roll = rng.random()
            free = [i for i in ids if i not in shaped]
            if roll < 0.35 and free:
                node_id = rng.choice(free)
                shaped.add(node_id)
                mention(node_id)
                lines.append(pad + _decl(node_id, rng) + (";" if rng.random() < 0.1 else ""))
            elif roll < 0.7:
                chain = [rng.choice(ids) for _ in range(rng.randint(2, 3))]
                parts = []
                for node_id in chain:
                    mention(node_id)
                    parts.append(ref(node_id))
                text = parts[0]
                for p in parts[1:]:
                    if rng.random() < 0.5:
                        text += f" -->|{rng.choice(FLOW_WORDS)}| {p}"
                    else:
                        text += f" --> {p}"
                out.edge_count += len(chain) - 1
                lines.append(pad + text)
            elif roll < 0.85 and depth < 3:
                sg_counter[0] += 1
                k = sg_counter[0]
                form = rng.randrange(4)
                if form == 0:
                    bid, head = f"sg{k}", f"subgraph sg{k}[{_label(rng, fancy=False)}]"
                elif form == 1:
                    bid, head = f"sg{k}", f"subgraph sg{k}"
                elif form == 2:
                    bid, head = f"b{k}", f'subgraph "{_label(rng)}"'
                else:
                    bid, head = f"b{k}", f"subgraph Zone {rng.choice(WORDS)} {k}"
                out.parents[bid] = stack[-1] if stack else None
                lines.append(pad + head)
                opened = len(lines)
                stack.append(bid)
                block(depth + 1, rng.randint(0, 3))
                stack.pop()
                lines.append(pad + "end")
                out.spans[bid] = (opened, len(lines))
            elif roll < 0.92:
                lines.append(pad + "%% " + _label(rng))
            else:
                lines.append("")

    block(0, rng.randint(1, 8))
    # Make sure every id shows up at least once.
    for node_id in ids:
        if node_id not in out.membership:
            mention(node_id)
            lines.append("    " + ref(node_id))
    out.text = "\n".join(lines) + "\n"
    return out


def interval_membership(gen: GeneratedDiagram) -> dict[str, Optional[str]]:
    """Innermost boundary by line-interval containment alone (independent of the generator's stack)."""
    result = {}
    for node_id, line in gen.first_line.items():
        best, width = None, None
        for bid, (lo, hi) in gen.spans.items():
            if lo < line < hi and (width is None or hi - lo < width):
                best, width = bid, hi - lo
        result[node_id] = best
    return result


def random_graph_text(seed: int, max_nodes: int = 12) -> str:
    """A small architecture-flavoured graph whose labels span every element kind."""
    rng = random.Random(seed)
    vocab = ("User", "Web Client", "Reasoning Agent", "Planner", "Prompt Gateway", "NLU",
             "Session Memory", "Context Store", "Tool Runner", "Search API", "Model Endpoint",
             "Billing Service", "Orders", "Scheduler")
    n = rng.randint(1, max_nodes)
    n_bounds = rng.randint(0, 3)
    lines = ["flowchart LR"]
    placement = [rng.randint(-1, n_bounds - 1) for _ in range(n)]
    decls = []
    for i in range(n):
        op, cl = ("[(", ")]") if rng.random() < 0.15 else ("[", "]")
        decls.append(f"n{i}{op}{rng.choice(vocab)}{cl}")
    for i in range(n):
        if placement[i] == -1:
            lines.append("    " + decls[i])
    for b in range(n_bounds):
        lines.append(f"    subgraph z{b}[Zone {b}]")
        for i in range(n):
            if placement[i] == b:
                lines.append("        " + decls[i])
        lines.append("    end")
    for _ in range(rng.randint(0, 2 * n)):
        lines.append(f"    n{rng.randrange(n)} --> n{rng.randrange(n)}")
    return "\n".join(lines) + "\n"


def brute_force_tainted(graph, kinds) -> set[str]:
    """Every node on some simple path that starts at a taint source."""
    from astride.taxonomy import ElementKind

    succ: dict[str, list[str]] = {n.id: [] for n in graph.nodes}
    for e in graph.edges:
        succ[e.source].append(e.target)
    sources = [n.id for n in graph.nodes
               if kinds[n.id] is ElementKind.EXTERNAL_ENTITY or n.boundary_id is None]
    seen: set[str] = set()

    def walk(path: list[str]) -> None:
        seen.update(path)
        for nxt in succ[path[-1]]:
            if nxt not in path:
                walk(path + [nxt])

    for s in sources:
        walk([s])
    return seen
