import csv
import hashlib
import io
import json

import pytest

from flowtune import cli
from flowtune import evaluator as evmod
from flowtune.cli import main
from flowtune.metrics import Objective, load_baselines, normalized_loss
from flowtune.params import sample_uniform
from flowtune.report import CORRELATION_HEADER, PARETO_HEADER, TRAJECTORY_HEADER, correlation_csv, pareto_csv
from flowtune.tools import retrieval

from conftest import read_jsonl, tune, write_config

SMALL = {"loop": {"iterations": 3, "parallel_k": 6}}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def parse_csv(path_or_text):
    text = path_or_text if isinstance(path_or_text, str) else path_or_text.read_text()
    return list(csv.reader(io.StringIO(text)))


class CountingSession:
    """Stands in for the HTTP session; serves canned search results and counts requests."""

    requests = 0

    def get(self, url, params=None, headers=None, timeout=None):
        CountingSession.requests += 1
        q = (params or {}).get("q") or (params or {}).get("search")
        payload = {"web": {"results": [{"title": f"Note on {q}", "url": f"https://example.org/{i}",
                                        "description": f"guidance {i} for {q}"} for i in range(3)]}}

        class R:
            def raise_for_status(self):
                pass

            def json(self):
                return payload

        return R()


@pytest.fixture
def stub_providers(monkeypatch):
    CountingSession.requests = 0

    class Web(retrieval.WebSearchProvider):
        def __init__(self, api_key, session=None, timeout=15.0):
            super().__init__(api_key, CountingSession(), timeout)

    monkeypatch.setattr(cli, "WebSearchProvider", Web)
    return CountingSession


def test_tune_deterministic(tmp_path):
    rc1, a = tune(tmp_path, "a", SMALL, ["--seed", "7"])
    rc2, b = tune(tmp_path, "b", SMALL, ["--seed", "7"])
    assert rc1 == rc2 == 0
    assert sha(a / "final_report.json") == sha(b / "final_report.json")
    m = json.loads((a / "manifest.json").read_text())
    assert m["seed"] == 7 and m["status"] == "complete" and m["backend"]["kind"] == "scripted"
    assert m["config"]["loop"]["iterations"] == 3 and m["finished"]


def test_retrieval_without_key_or_cache(tmp_path, capsys):
    rc, _ = tune(tmp_path, "r", SMALL, ["--retrieval", "on"])
    assert rc == 2 and "WEB_SEARCH_API_KEY" in capsys.readouterr().err


def test_http_backend_without_env(tmp_path, capsys):
    rc, _ = tune(tmp_path, "h", SMALL, ["--backend", "http"])
    err = capsys.readouterr().err
    assert rc == 2 and "LLM_API_KEY" in err and "LLM_MODEL" in err


def test_full_budget_counts_375_invocations(tmp_path, monkeypatch):
    count = {"n": 0}
    real = evmod.synthetic_evaluate

    def counted(*a, **k):
        count["n"] += 1
        return real(*a, **k)

    monkeypatch.setattr(evmod, "synthetic_evaluate", counted)
    rc, out = tune(tmp_path, "full", {}, ["--iters", "15", "--parallel", "25"])
    assert rc == 0 and count["n"] == 375
    assert json.loads((out / "final_report.json").read_text())["evaluations"] == 375


def test_reports_schema_and_round_trip(tmp_path, capsys):
    rc, out = tune(tmp_path, "rep", SMALL)
    assert main(["report", str(out), "--out", str(tmp_path / "csv")]) == 0
    traj = parse_csv(tmp_path / "csv" / "trajectory.csv")
    assert tuple(traj[0]) == TRAJECTORY_HEADER and len(traj) == 4
    corr = parse_csv(tmp_path / "csv" / "correlation.csv")
    assert tuple(corr[0]) == CORRELATION_HEADER and len(corr) == 11
    par = parse_csv(tmp_path / "csv" / "pareto.csv")
    assert tuple(par[0]) == PARETO_HEADER and len(par) >= 2
    assert main(["report", str(tmp_path / "missing")]) == 2


def test_pareto_fixtures():
    rows = [(1, 0, 100, 10), (1, 1, 90, 12), (1, 2, 110, 9)]
    out = parse_csv(pareto_csv(rows))
    assert sorted((float(r[2]), float(r[3])) for r in out[1:]) == [(90, 12), (100, 10), (110, 9)]
    out = parse_csv(pareto_csv(rows + [(1, 3, 120, 13)]))
    assert len(out) == 4 and all(r[2] != "120" for r in out[1:])


def test_correlation_ten_thousand_runs(ibex, four):
    pts = sample_uniform(four, 10_000, 11)
    recs = [evmod.synthetic_evaluate(p, ibex, i, four, timeout_boost=-1.0).to_dict() for i, p in enumerate(pts)]
    table = parse_csv(correlation_csv(recs))
    header = table[0]
    pearson = {r[1]: r for r in table[1:] if r[0] == "pearson"}
    kendall = {r[1]: r for r in table[1:] if r[0] == "kendall"}
    assert float(pearson["ecp"][header.index("power")]) < -0.5
    assert float(kendall["ecp"][header.index("power")]) < 0
    assert float(pearson["wl"][header.index("wl")]) == 1.0


def test_replay_matches_scripted_run(tmp_path, capsys):
    rc, out = tune(tmp_path, "orig", SMALL)
    assert main(["replay", str(out)]) == 0
    assert "match" in capsys.readouterr().out


def test_replay_with_retrieval_offline(tmp_path, stub_providers, capsys):
    env = {"WEB_SEARCH_API_KEY": "k"}
    cfg = {"loop": {"iterations": 3, "parallel_k": 6}, "retrieval": {"enabled": True}}
    rc, out = tune(tmp_path, "ret", cfg, environ=env)
    assert rc == 0 and stub_providers.requests > 0
    cache_lines = (out / "retrieval_cache.jsonl").read_text().splitlines()
    assert len(cache_lines) == stub_providers.requests
    for rec in read_jsonl(out / "iterations.jsonl"):
        assert rec["retrieval"]["calls"] <= 3 and rec["retrieval"]["payload_chars"] <= 2000
    before = stub_providers.requests
    assert main(["replay", str(out)], environ={}) == 0
    assert stub_providers.requests == before
    # drop the first cached response: replay must stop at the iteration that needed it
    first = json.loads(cache_lines[0])
    (out / "retrieval_cache.jsonl").write_text("\n".join(cache_lines[1:]) + ("\n" if len(cache_lines) > 1 else ""))
    capsys.readouterr()
    assert main(["replay", str(out), "--out", str(tmp_path / "rp2")], environ={}) == 2
    err = capsys.readouterr().err
    assert "iteration 1" in err and "cache miss" in err
    assert stub_providers.requests == before
    assert first["provider"] == "brave"


def test_warm_cache_without_key_runs(tmp_path, stub_providers):
    env = {"WEB_SEARCH_API_KEY": "k"}
    cfg = {"loop": {"iterations": 2, "parallel_k": 6}, "retrieval": {"enabled": True}}
    rc, out = tune(tmp_path, "warm", cfg, environ=env)
    assert rc == 0
    before = stub_providers.requests
    # no key, but the new run directory starts with a warm cache: startup succeeds, nothing is fetched
    (tmp_path / "warm2").mkdir()
    (tmp_path / "warm2" / "retrieval_cache.jsonl").write_bytes((out / "retrieval_cache.jsonl").read_bytes())
    rc2, out2 = tune(tmp_path, "warm2", cfg, environ={})
    assert rc2 == 0 and stub_providers.requests == before
    assert json.loads((out2 / "final_report.json").read_text())["transcript_sha256"] == \
        json.loads((out / "final_report.json").read_text())["transcript_sha256"]


def test_baseline_command(tmp_path, ibex):
    cfg = write_config(tmp_path / "b.json")
    assert main(["baseline", "--config", str(cfg), "--out", str(tmp_path / "b1")]) == 0
    assert main(["baseline", "--config", str(cfg), "--out", str(tmp_path / "b2")]) == 0
    f1, f2 = tmp_path / "b1" / "baseline.json", tmp_path / "b2" / "baseline.json"
    assert f1.read_bytes() == f2.read_bytes()
    table = load_baselines(f1.read_text())
    b = table[("ASAP7", "IBEX")]
    assert b.wl_alpha == 115285 and b.ecp_alpha == 1361
    assert normalized_loss(b.as_record(), Objective.single("wl", b)).value == pytest.approx(1.0)


def test_baseline_external_failure(tmp_path):
    cfg = write_config(tmp_path / "x.json", evaluator={"kind": "external_command", "command_template": "false"})
    assert main(["baseline", "--config", str(cfg), "--out", str(tmp_path / "bx")]) == 2


def test_config_diagnostics_carry_line(tmp_path, capsys):
    text = '{\n "loop": {\n  "iterations": 0\n }\n}\n'
    path = tmp_path / "bad.json"
    path.write_text(text)
    assert main(["tune", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert f"{path}:3:" in capsys.readouterr().err
    path.write_text('{\n "loop": {}, \n "bogus": {}\n}')
    assert main(["tune", "--config", str(path)]) == 2
    assert f"{path}:3:" in capsys.readouterr().err
    path.write_text('{\n "loop": {,}\n}')
    assert main(["tune", "--config", str(path)]) == 2
    assert f"{path}:2:" in capsys.readouterr().err


def test_exit_status_reflects_constraints(tmp_path):
    cfg = {"loop": {"iterations": 3, "parallel_k": 6},
           "objective": {"expression": "WL + ECP", "constraints": {"area": 4, "power": 4}}}
    rc, out = tune(tmp_path, "con", cfg)
    rep = json.loads((out / "final_report.json").read_text())
    assert rep["constraint_status"]["violation_free"] == (rc == 0)
    assert cli._report_ok({"best": None}) is False
    assert cli._report_ok({"best": {}, "constraint_status": {"violation_free": False}}) is False
    assert cli._report_ok({"best": {}}) is True
