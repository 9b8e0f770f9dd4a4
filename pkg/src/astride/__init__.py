"""ASTRIDE threat modeling for AI agent architecture diagrams."""

from .consortium import AnalyzerReport, BackendConfig, run_consortium
from .dfd import DiagramGraph, load_diagram, parse_diagram, serialize_diagram
from .rules import Finding, Target, elicit, tainted_nodes
from .synthesis import ThreatModel, synthesize, synthesize_with_reasoner
from .taxonomy import DEFAULT_TAXONOMY, AiThreatSubtype, ElementKind, Severity, ThreatCategory

__version__ = "0.1.0"

__all__ = [
    "AiThreatSubtype",
    "AnalyzerReport",
    "BackendConfig",
    "DEFAULT_TAXONOMY",
    "DiagramGraph",
    "ElementKind",
    "Finding",
    "Severity",
    "Target",
    "ThreatCategory",
    "ThreatModel",
    "elicit",
    "load_diagram",
    "parse_diagram",
    "run_consortium",
    "serialize_diagram",
    "synthesize",
    "synthesize_with_reasoner",
    "tainted_nodes",
]
