"""``astride`` command line: validate, analyze, gen-dataset, taxonomy.

Exit codes: 0 ok, 1 input/parse error, 2 I/O error, 3 every backend failed,
64 usage error, 78 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from .consortium import (
    AllBackendsFailed,
    BackendConfig,
    ConfigError,
    load_backends,
    run_consortium,
)
from .dataset import DEFAULT_TEMPLATE_WEIGHTS, TEMPLATES, write_dataset
from .dfd import DiagramError, load_diagram, serialize_diagram
from .report import render_markdown
from .synthesis import NoUsableReports, SeverityRule, synthesize, synthesize_with_reasoner
from .taxonomy import TaxonomyError, load_taxonomy

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_IO = 2
EXIT_ALL_FAILED = 3
EXIT_USAGE = 64
EXIT_CONFIG = 78

log = logging.getLogger("astride")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this CLI reserves 2 for I/O errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    backends: list[BackendConfig] = field(default_factory=lambda: [BackendConfig.local()])
    reasoner: Optional[BackendConfig] = None
    taxonomy_override: Optional[str] = None
    min_consensus: Fraction = Fraction(0)
    output_format: str = "json"


def parse_fraction(text: str) -> Fraction:
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"--min-consensus: not a number: {text!r}") from None
    if not 0 <= value <= 1:
        raise UsageError(f"--min-consensus must lie in [0, 1], got {text}")
    return value


def build_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(taxonomy_override=args.taxonomy,
                    min_consensus=parse_fraction(args.min_consensus),
                    output_format=args.format)
    if args.offline:
        if args.reasoner:
            log.warning("--offline ignores --reasoner %s", args.reasoner)
        return cfg
    if not args.backends:
        if args.reasoner:
            raise UsageError("--reasoner needs --backends")
        return cfg
    loaded = load_backends(args.backends)
    reasoner_name = args.reasoner or loaded.reasoner
    backends = list(loaded.backends)
    if reasoner_name:
        match = [b for b in backends if b.name == reasoner_name]
        if not match:
            raise ConfigError(f"reasoner {reasoner_name!r} is not a configured backend")
        cfg.reasoner = match[0]
        backends = [b for b in backends if b.name != reasoner_name]
    if not backends:
        raise ConfigError("no analyzer backends remain after selecting the reasoner")
    cfg.backends = backends
    return cfg


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def cmd_validate(args: argparse.Namespace) -> int:
    graph = load_diagram(args.path)
    _write(serialize_diagram(graph), args.out)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    taxonomy = load_taxonomy(cfg.taxonomy_override)
    graph = load_diagram(args.path)
    context = args.context or ""
    reports = run_consortium(graph, cfg.backends, context, taxonomy)
    if cfg.reasoner is not None:
        model = synthesize_with_reasoner(reports, graph, cfg.reasoner, cfg.min_consensus,
                                         args.severity_rule, weight=args.reasoner_weight,
                                         context=context, taxonomy=taxonomy)
    else:
        model = synthesize(reports, graph, cfg.min_consensus, args.severity_rule)
    if cfg.output_format == "markdown":
        _write(render_markdown(model, graph), args.out)
    else:
        _write(model.to_json(), args.out)
    if args.report:
        Path(args.report).write_text(render_markdown(model, graph), encoding="utf-8", newline="\n")
    return EXIT_OK


def _parse_weights(text: Optional[str]) -> dict[str, float]:
    if not text:
        return dict(DEFAULT_TEMPLATE_WEIGHTS)
    weights = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        name = name.strip()
        if not sep or name not in TEMPLATES:
            raise UsageError(f"--template-weights: expected name=weight with names {sorted(TEMPLATES)}")
        try:
            weights[name] = float(value)
        except ValueError:
            raise UsageError(f"--template-weights: bad weight {value!r}") from None
        if weights[name] < 0:
            raise UsageError("--template-weights: weights must be non-negative")
    if sum(weights.values()) <= 0:
        raise UsageError("--template-weights: at least one weight must be positive")
    return weights


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.count < 6:
        raise UsageError("--count must be at least 6 to produce three splits")
    weights = _parse_weights(args.template_weights)
    taxonomy = load_taxonomy(args.taxonomy)
    manifest = write_dataset(args.out, args.count, args.seed, weights, taxonomy, workers=args.workers)
    sizes = manifest.splits
    print(f"wrote {manifest.count} records to {args.out} "
          f"(train {sizes['train']}, validation {sizes['validation']}, test {sizes['test']}; "
          f"seed {manifest.seed}, taxonomy {manifest.taxonomy_version})")
    return EXIT_OK


def cmd_taxonomy(args: argparse.Namespace) -> int:
    taxonomy = load_taxonomy(args.taxonomy)
    _write(json.dumps(taxonomy.to_dict(), indent=2, ensure_ascii=False) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="astride", description="ASTRIDE threat modeling for AI agent architecture diagrams.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="parse a diagram and print its canonical form")
    v.add_argument("path")
    v.add_argument("--out", help="write to this file instead of stdout")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("analyze", help="run the analyzer consortium and print a threat model")
    a.add_argument("path")
    a.add_argument("--backends", help="JSON file listing analyzer backends")
    a.add_argument("--reasoner", help="backend name to use as the final reasoning layer")
    a.add_argument("--reasoner-weight", type=int, default=2, help="votes carried by the reasoner (default 2)")
    a.add_argument("--offline", action="store_true", help="use only the local rule engine")
    a.add_argument("--min-consensus", default="0", help="drop findings below this score, e.g. 0.5 or 2/3")
    a.add_argument("--severity-rule", choices=[r.value for r in SeverityRule], default="max")
    a.add_argument("--format", choices=["json", "markdown"], default="json")
    a.add_argument("--out", help="write to this file instead of stdout")
    a.add_argument("--report", help="also write a Markdown report to this file")
    a.add_argument("--taxonomy", help="JSON taxonomy override file")
    a.add_argument("--context", help="free-text architecture context passed to remote analyzers")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gen-dataset", help="generate the synthetic instruction-tuning corpus")
    g.add_argument("--count", type=int, default=1200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="dataset", help="output directory (default ./dataset)")
    g.add_argument("--template-weights", help="e.g. pipeline=1,hub=2,mesh=1")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--taxonomy", help="JSON taxonomy override file")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("taxonomy", help="print the effective applicability matrix and mitigations")
    t.add_argument("--taxonomy", help="JSON taxonomy override file")
    t.add_argument("--out", help="write to this file instead of stdout")
    t.set_defaults(func=cmd_taxonomy)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"astride: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TaxonomyError) as exc:
        print(f"astride: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DiagramError, UnicodeDecodeError) as exc:
        print(f"astride: {getattr(args, 'path', '')}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (AllBackendsFailed, NoUsableReports) as exc:
        print(f"astride: {exc}", file=sys.stderr)
        for r in getattr(exc, "reports", []):
            print(f"  {r.analyzer}: {'; '.join(r.diagnostics) or r.raw_output[:200]}", file=sys.stderr)
        return EXIT_ALL_FAILED
    except OSError as exc:
        print(f"astride: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
