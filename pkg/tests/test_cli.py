from __future__ import annotations

import json

import pytest

from graphgen import FIXTURES
from passagehop import cli

CONFIG = str(FIXTURES / "config.json")
GOLDEN = FIXTURES / "golden"


def run(*argv: str) -> int:
    return cli.main(["--config", CONFIG, *argv])


@pytest.fixture(scope="module")
def archive(tmp_path_factory):
    out = tmp_path_factory.mktemp("built") / "g.psg"
    assert run("build", str(FIXTURES / "corpus.jsonl"), "--out", str(out)) == 0
    return out


# --- build ---------------------------------------------------------------------------------


def test_build_matches_golden_report(archive):
    report = archive.with_name("g.psg.report.json").read_text()
    assert report == (GOLDEN / "build_report.json").read_text()


def test_missing_corpus_exits_with_input_error(tmp_path, capsys):
    out = tmp_path / "g.psg"
    assert run("build", str(tmp_path / "nope.jsonl"), "--out", str(out)) == cli.EXIT_INPUT
    assert not out.exists()
    assert "corpus not found" in capsys.readouterr().err


def test_malformed_corpus_writes_nothing(tmp_path):
    corpus = tmp_path / "c.jsonl"
    corpus.write_text('{"id": "a"}\n')
    assert run("build", str(corpus), "--out", str(tmp_path / "g.psg")) == cli.EXIT_INPUT
    assert list(tmp_path.iterdir()) == [corpus]


def test_dry_run_makes_no_provider_calls(tmp_path, monkeypatch, capsys):
    def forbidden(cfg):
        raise AssertionError("provider constructed during dry run")

    monkeypatch.setattr(cli, "make_chat", forbidden)
    monkeypatch.setattr(cli, "make_embedder", forbidden)
    out = tmp_path / "g.psg"
    assert run("build", str(FIXTURES / "corpus.jsonl"), "--out", str(out), "--dry-run") == 0
    text = capsys.readouterr().out
    assert "passages: 8" in text and "planned LLM calls: 16" in text and "edge cap: 24" in text
    assert not out.exists()


# --- query ---------------------------------------------------------------------------------


def test_query_respects_top_k(archive, capsys):
    assert run("query", str(archive), "Which team is in Major League Soccer?", "--top-k", "2", "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert 1 <= len(doc["context"]) <= 2
    assert doc["context"][0]["id"] == "p02"


def test_query_without_hops_uses_no_llm(archive, capsys):
    assert run("query", str(archive), "Who wrote The Frog Prince?", "--n-hop", "0", "--json") == 0
    assert json.loads(capsys.readouterr().out)["llm_calls"] == 0


def test_query_writes_trace(archive, tmp_path, capsys):
    trace = tmp_path / "trace.json"
    assert run("query", str(archive), "Who wrote The Frog Prince?", "--trace", str(trace)) == 0
    doc = json.loads(trace.read_text())
    assert doc["seeds"] and len(doc["rounds"]) <= 2
    assert "LLM calls" in capsys.readouterr().out


def test_query_rejects_blank_question(archive):
    assert run("query", str(archive), "   ") == cli.EXIT_USAGE


# --- eval ----------------------------------------------------------------------------------


def test_eval_matches_golden(archive, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run("eval", str(archive), str(FIXTURES / "dataset.json"), "--out", str(out)) == 0
    assert (out / "report_k4_h2.json").read_text() == (GOLDEN / "eval_report_k4_h2.json").read_text()
    assert (out / "table.txt").read_text() == (GOLDEN / "eval_table.txt").read_text()


def test_eval_sweeps_hop_counts(archive, tmp_path, capsys):
    out = tmp_path / "ev"
    assert run("eval", str(archive), str(FIXTURES / "dataset.json"), "--n-hop", "1,2,3,4", "--out", str(out)) == 0
    assert sorted(p.name for p in out.glob("report_*.json")) == [f"report_k4_h{h}.json" for h in (1, 2, 3, 4)]
    calls = [json.loads((out / f"report_k4_h{h}.json").read_text())["summary"]["mean_llm_calls"] for h in (1, 2, 3, 4)]
    assert calls == sorted(calls)


def test_eval_without_llm_needs_no_chat(archive, tmp_path, capsys):
    cfg = json.loads((FIXTURES / "config.json").read_text())
    del cfg["providers"]["chat"]
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    argv = ["--config", str(path), "eval", str(archive), str(FIXTURES / "dataset.json")]
    assert cli.main(argv) == cli.EXIT_CONFIG
    assert "--no-llm" in capsys.readouterr().err
    assert cli.main([*argv, "--no-llm"]) == 0
    assert "similarity" in capsys.readouterr().out


def test_eval_rejects_unknown_supporting_ids(archive, tmp_path):
    ds = tmp_path / "d.json"
    ds.write_text(json.dumps([{"id": "x", "question": "q?", "answers": ["a"], "supporting_ids": ["zz"]}]))
    assert run("eval", str(archive), str(ds)) == cli.EXIT_INPUT


# --- stats and errors -------------------------------------------------------------------------------


def test_stats_json(archive, capsys):
    assert run("stats", str(archive), "--json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert (doc["vertex_count"], doc["edge_count"], doc["avg_out_degree"]) == (8, 24, 3.0)


def test_missing_archive_exit_code(tmp_path):
    assert run("stats", str(tmp_path / "missing.psg")) == cli.EXIT_ARCHIVE


def test_corrupt_archive_exit_code(archive, tmp_path):
    bad = tmp_path / "bad.psg"
    bad.write_bytes(archive.read_bytes()[:-5])
    assert run("stats", str(bad)) == cli.EXIT_ARCHIVE


@pytest.mark.parametrize(
    "content",
    ["{not json", "[]", '{"colour": 1}', '{"providers": {"embedding": {"kind": "magic"}}}'],
)
def test_bad_config_exit_code(tmp_path, archive, content):
    path = tmp_path / "config.json"
    path.write_text(content)
    assert cli.main(["--config", str(path), "query", str(archive), "q?"]) == cli.EXIT_CONFIG


def test_dimension_mismatch_is_a_config_error(tmp_path, archive):
    cfg = json.loads((FIXTURES / "config.json").read_text())
    cfg["providers"]["embedding"]["dim"] = 32
    cfg["providers"]["chat"]["script"] = str(FIXTURES / "script.json")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["--config", str(path), "query", str(archive), "q?"]) == cli.EXIT_CONFIG


def test_usage_errors():
    assert cli.main(["query"]) == cli.EXIT_USAGE
    assert cli.main(["eval", "--n-hop", "x"]) == cli.EXIT_USAGE


def test_synth_pipeline(tmp_path, capsys):
    out = tmp_path / "synth"
    assert cli.main(["synth", str(out), "--chains", "5"]) == 0
    cfg = ["--config", str(out / "config.json")]
    assert cli.main([*cfg, "build"]) == 0
    assert cli.main([*cfg, "eval", "--out", str(out / "reports")]) == 0
    summary = json.loads((out / "reports" / "report_k4_h3.json").read_text())["summary"]
    assert summary["retrieval_recall"] == 1.0
