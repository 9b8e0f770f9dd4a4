from __future__ import annotations

import json

import pytest

from astride.cli import main
from astride.mock_backend import MockBackend, MockBehavior, findings_reply
from conftest import FIXTURES

B = str(FIXTURES / "agent_arch_b.mmd")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_validate_ok(capsys):
    code, out, _ = run(capsys, "validate", B)
    assert code == 0 and out.startswith("---\ntitle:")


def test_validate_dangling_edge(tmp_path, capsys):
    p = tmp_path / "bad.mmd"
    p.write_text("flowchart TD\n  subgraph z[Zone]\n    a\n  end\n  a --> z\n")
    code, _, err = run(capsys, "validate", str(p))
    assert code == 1 and "e1" in err


def test_validate_syntax_error_is_located(tmp_path, capsys):
    p = tmp_path / "bad.mmd"
    p.write_text("flowchart TD\n  a --> b\n  a -- b\n")
    code, _, err = run(capsys, "validate", str(p))
    assert code == 1 and "line 3" in err


def test_validate_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "validate", str(tmp_path / "nope.mmd"))
    assert code == 2 and "I/O" in err


def test_usage_errors_exit_64(capsys):
    with pytest.raises(SystemExit) as err:
        main(["analyze"])
    assert err.value.code == 64
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 64
    code, _, _ = run(capsys, "analyze", B, "--offline", "--min-consensus", "1.5")
    assert code == 64


def test_analyze_offline_is_deterministic(tmp_path, capsys):
    code, first, _ = run(capsys, "analyze", B, "--offline")
    _, second, _ = run(capsys, "analyze", B, "--offline")
    assert code == 0 and first == second
    doc = json.loads(first)
    assert [r["analyzer"] for r in doc["reports"]] == ["local-rules"]
    a_rows = {(f["finding"]["target"], f["finding"]["subtype"]) for f in doc["findings"]}
    assert {("pp", "PromptInjection"), ("mem", "ContextPoisoning"), ("e5", "UnsafeToolInvocation")} <= a_rows


def test_analyze_markdown_report(tmp_path, capsys):
    out = tmp_path / "model.json"
    md = tmp_path / "report.md"
    code, _, _ = run(capsys, "analyze", B, "--offline", "--out", str(out), "--report", str(md))
    assert code == 0 and json.loads(out.read_text())["summary"]["total"] > 0
    text = md.read_text()
    assert "| Rank | Target | Category / Subtype | Severity | Score | Mitigations |" in text
    for name in ("PromptInjection", "ContextPoisoning", "UnsafeToolInvocation"):
        assert name in text
    code, stdout, _ = run(capsys, "analyze", B, "--offline", "--format", "markdown")
    assert stdout == text


def _backends_file(tmp_path, urls, reasoner=None, timeout_ms=2000):
    doc = {"backends": [{"name": f"m{i}", "endpoint": u, "model": "mock", "timeout_ms": timeout_ms,
                         "max_retries": 0} for i, u in enumerate(urls, start=1)]}
    if reasoner:
        doc["reasoner"] = reasoner
    path = tmp_path / "backends.json"
    path.write_text(json.dumps(doc))
    return str(path)


PI = {"category": "AiAgentSpecific", "subtype": "PromptInjection", "target": "Prompt Processor",
      "severity": "High", "mitigations": ["input sanitization"]}


def test_analyze_with_three_mocks(tmp_path, capsys):
    with MockBackend(MockBehavior(findings_reply([PI]))) as a, MockBackend(MockBehavior(findings_reply([PI]))) as b, \
            MockBackend(MockBehavior(findings_reply([]))) as c:
        cfg = _backends_file(tmp_path, [a.url, b.url, c.url])
        code, out, _ = run(capsys, "analyze", B, "--backends", cfg)
    doc = json.loads(out)
    assert code == 0
    assert len(doc["reports"]) == 3
    assert doc["summary"]["consensus_denominator"] == 3
    (only,) = doc["findings"]
    assert only["support_count"] == 2 and only["consensus_score"] == pytest.approx(2 / 3)


def test_analyze_with_reasoner(tmp_path, capsys):
    with MockBackend(MockBehavior(findings_reply([PI]))) as a, MockBackend(MockBehavior(findings_reply([PI]))) as r:
        cfg = _backends_file(tmp_path, [a.url, r.url])
        code, out, _ = run(capsys, "analyze", B, "--backends", cfg, "--reasoner", "m2")
    doc = json.loads(out)
    assert code == 0 and doc["reasoner_used"]
    assert doc["summary"]["consensus_denominator"] == 3
    assert doc["findings"][0]["consensus_score"] == 1.0


def test_analyze_all_failed_exit_3(tmp_path, capsys):
    with MockBackend(MockBehavior(status=500)) as a, MockBackend(MockBehavior("no json here")) as b:
        cfg = _backends_file(tmp_path, [a.url, b.url], timeout_ms=500)
        code, out, err = run(capsys, "analyze", B, "--backends", cfg)
    assert code == 3 and out == "" and "m1" in err


def test_analyze_bad_config_exit_78(tmp_path, capsys):
    path = tmp_path / "b.json"
    path.write_text(json.dumps([{"name": "x"}]))
    code, _, err = run(capsys, "analyze", B, "--backends", str(path))
    assert code == 78 and "config" in err


def test_taxonomy_command(tmp_path, capsys):
    code, out, _ = run(capsys, "taxonomy")
    assert code == 0 and len(json.loads(out)["categories"]) == 7
    override = tmp_path / "o.json"
    override.write_text(json.dumps({"severities": {"Repudiation": "Critical"}}))
    code, out, _ = run(capsys, "taxonomy", "--taxonomy", str(override))
    assert json.loads(out)["severities"]["Repudiation"] == "Critical"
    override.write_text(json.dumps({"severities": {"Repudiation": "Meh"}}))
    code, _, err = run(capsys, "taxonomy", "--taxonomy", str(override))
    assert code == 78 and "severities/Repudiation" in err


def test_taxonomy_override_changes_analysis(tmp_path, capsys):
    override = tmp_path / "o.json"
    override.write_text(json.dumps({"severities": {"PromptInjection": "Critical"}}))
    code, out, _ = run(capsys, "analyze", B, "--offline", "--taxonomy", str(override))
    first = json.loads(out)["findings"][0]
    assert first["final_severity"] == "Critical" and first["finding"]["subtype"] == "PromptInjection"


def test_gen_dataset(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-dataset", "--count", "30", "--seed", "3", "--out", str(tmp_path / "a"))
    assert code == 0 and "train 20" in out
    run(capsys, "gen-dataset", "--count", "30", "--seed", "3", "--out", str(tmp_path / "b"))
    for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("count", ["0", "-3", "5"])
def test_gen_dataset_bad_count(tmp_path, capsys, count):
    code, _, _ = run(capsys, "gen-dataset", "--count", count, "--out", str(tmp_path))
    assert code == 64


def test_gen_dataset_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, _ = run(capsys, "gen-dataset", "--count", "6", "--out", str(blocker / "sub"))
    assert code == 2
