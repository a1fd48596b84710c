from __future__ import annotations

import io
import json
import socket
import threading
import time

import pytest
import uvicorn
from fixtures import TWO_SITE_GRID, catalog_rows, doc
from gwutil import client, make_home

from medpipe.cli import EXIT_DOMAIN, EXIT_OK, EXIT_USAGE, main
from medpipe.gateway import create_app


@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.delenv("PIPELINE_TOKEN", raising=False)
    monkeypatch.delenv("PIPELINE_GATEWAY_URL", raising=False)
    h = tmp_path / "home"
    make_home(h)
    (tmp_path / "diamond.json").write_text(json.dumps(doc("diamond")))
    cyc = doc("diamond")
    cyc["edges"].append({"from": "d.out", "to": "a.seed"})
    del cyc["tasks"]["a"]["params"]
    (tmp_path / "cycle.json").write_text(json.dumps(cyc))
    (tmp_path / "grid.json").write_text(json.dumps(TWO_SITE_GRID))
    (tmp_path / "rows.jsonl").write_text("\n".join(json.dumps(r) for r in catalog_rows(3)) + "\n")
    (tmp_path / "policy.json").write_text(json.dumps({"rules": [{"tag": "PatientID", "action": "PSEUDONYMIZE"}], "salt": "s"}))
    (tmp_path / "bad_policy.json").write_text(json.dumps({"rules": [{"tag": "PatientID", "action": "PSEUDONYMIZE"}]}))
    monkeypatch.chdir(tmp_path)
    return h


def cli(home, *args: str) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    code = main(["--home", str(home), *args], out=out, err=err)
    return code, out.getvalue(), err.getvalue()


def test_validate_cycle_fixture(home):
    code, _, err = cli(home, "validate", "cycle.json")
    assert code == EXIT_DOMAIN
    assert "CYCLE" in err and "a,b,d" in err
    code, out, _ = cli(home, "validate", "diamond.json")
    assert code == EXIT_OK and "valid" in out


def test_plan_is_byte_identical_on_repeat(home):
    first = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")
    second = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")
    assert first[0] == EXIT_OK and first[1] == second[1]
    assert json.loads(first[1])["stages"] == [["a"], ["b", "c"], ["d"]]


def test_run_retry_fixture_then_prov_events(home, tmp_path):
    _, plan_text, _ = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")
    (tmp_path / "plan.json").write_text(plan_text)
    code, out, _ = cli(home, "run", "plan.json", "--backend", "simgrid", "--retries", "1")
    assert code == EXIT_OK
    assert "b attempt 2: RUNNING -> DONE" in out and out.strip().endswith("SUCCEEDED")
    code, out, _ = cli(home, "prov", "events", "--filter", "task=b", "--filter", "kind=TASK_TRANSITION")
    assert code == EXIT_OK
    lines = out.strip().splitlines()
    assert len(lines) == 8
    assert {line.split("attempt ")[1].split(":")[0] for line in lines} == {"1", "2"}
    code, out, _ = cli(home, "--json", "prov", "events", "--filter", "task=b")
    attempts = {e["payload"]["attempt"] for e in json.loads(out)["events"]}
    assert attempts == {1, 2}


def test_run_failure_exits_one(home, tmp_path):
    cfg = json.loads((home / "config.json").read_text())
    cfg["backends"]["simgrid"]["fault_plan"] = [{"task": "b", "attempt": 1}, {"task": "b", "attempt": 2}]
    (home / "config.json").write_text(json.dumps(cfg))
    _, plan_text, _ = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")
    (tmp_path / "plan.json").write_text(plan_text)
    code, out, _ = cli(home, "--json", "run", "plan.json")
    assert code == EXIT_DOMAIN and json.loads(out)["status"] == "FAILED"


def test_run_accepts_plan_id(home):
    _, plan_text, _ = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")
    code, out, _ = cli(home, "--json", "run", json.loads(plan_text)["plan_id"], "--backend", "local")
    assert code == EXIT_OK and json.loads(out)["status"] == "SUCCEEDED"


def test_study_and_anonymize_verbs(home):
    assert cli(home, "study", "add", "rows.jsonl")[0] == EXIT_OK
    code, out, _ = cli(home, "--json", "study", "query", "Modality = MR", "--owner", "ana")
    s = json.loads(out)
    assert code == EXIT_OK and s["members"] == ["img000", "img001", "img002"] and s["owner"] == "ana"
    code, out, _ = cli(home, "study", "check", s["set_id"], "--fields", "Modality")
    assert code == EXIT_OK and "homogeneous" in out
    code, out, _ = cli(home, "--json", "anonymize", s["set_id"], "--policy", "policy.json")
    assert code == EXIT_OK
    assert json.loads(out)["pseudonyms"][1] == {"tag": "PatientID", "original": "P1", "token": "47c12c7e754fe3b8"}


@pytest.mark.parametrize(
    "args, expected",
    [
        (["validate", "diamond.json"], EXIT_OK),
        (["validate", "cycle.json"], EXIT_DOMAIN),
        (["validate", "missing.json"], EXIT_USAGE),
        (["validate"], EXIT_USAGE),
        (["frobnicate"], EXIT_USAGE),
        (["plan", "diamond.json"], EXIT_USAGE),
        (["plan", "diamond.json", "--grid", "nope.json"], EXIT_USAGE),
        (["plan", "diamond.json", "--grid", "grid.json", "--studyset", "ss-missing"], EXIT_DOMAIN),
        (["run", "grid.json"], EXIT_USAGE),
        (["run", "plan-000000000000"], EXIT_DOMAIN),
        (["run", "plan.json", "--retries", "x"], EXIT_USAGE),
        (["status", "exec-1"], EXIT_DOMAIN),
        (["prov", "events", "--filter", "bogus"], EXIT_USAGE),
        (["prov", "events", "--filter", "seq_from=x"], EXIT_USAGE),
        (["prov", "events"], EXIT_OK),
        (["prov", "lineage", "0" * 64], EXIT_DOMAIN),
        (["study", "query", "Age >="], EXIT_DOMAIN),
        (["study", "query", "Shoe = 1"], EXIT_DOMAIN),
        (["study", "check", "nope", "--fields", "Age"], EXIT_DOMAIN),
        (["anonymize", "nope", "--policy", "policy.json"], EXIT_DOMAIN),
        (["anonymize", "nope", "--policy", "missing.json"], EXIT_USAGE),
    ],
)
def test_exit_codes(home, args, expected):
    assert cli(home, *args)[0] == expected


def test_json_output_matches_gateway_body(home, tmp_path):
    c = client(make_home(home))
    cli(home, "study", "add", "rows.jsonl")
    _, out, _ = cli(home, "--json", "validate", "diamond.json")
    assert out.strip() == c.post("/pipelines", content=(tmp_path / "diamond.json").read_bytes()).text
    _, out, _ = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")
    assert out.strip() == c.post("/plans", json={"pipeline_id": "diamond", "grid": TWO_SITE_GRID}).text
    (tmp_path / "plan.json").write_text(out)
    _, out, _ = cli(home, "--json", "run", "plan.json")
    exec_id = json.loads(out)["execution_id"]
    assert out.strip() == c.get(f"/executions/{exec_id}").text
    _, out, _ = cli(home, "--json", "prov", "events", "--filter", f"execution={exec_id}", "--filter", "task=b")
    assert out.strip() == c.get("/provenance/events", params={"execution_id": exec_id, "task_id": "b"}).text
    d_out = next(o["artifact_id"] for o in json.loads(c.get(f"/executions/{exec_id}").text)["result"]["outputs"] if o["task_id"] == "d")
    _, out, _ = cli(home, "--json", "prov", "lineage", d_out)
    assert out.strip() == c.get(f"/provenance/lineage/{d_out}").text
    _, out, _ = cli(home, "--json", "study", "query", "Age >= 61")
    assert out.strip() == c.post("/studysets/query", json={"predicate": "Age >= 61"}).text
    set_id = json.loads(out)["set_id"]
    _, out, _ = cli(home, "--json", "study", "check", set_id, "--fields", "Modality", "Age")
    assert out.strip() == c.post(f"/studysets/{set_id}/homogeneity", json={"fields": ["Modality", "Age"]}).text
    _, out, _ = cli(home, "--json", "status", "exec-999")
    assert out.strip() == c.get("/executions/exec-999").text


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_remote_mode(home, tmp_path, monkeypatch):
    settings = make_home(home)
    port = free_port()
    server = uvicorn.Server(uvicorn.Config(create_app(settings), host="127.0.0.1", port=port, log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    try:
        while not server.started:
            time.sleep(0.02)
        remote = "--remote=" + f"http://127.0.0.1:{port}"
        code, out, _ = cli(home, remote, "--json", "plan", "diamond.json", "--grid", "grid.json")
        assert code == EXIT_OK
        local = cli(home, "--json", "plan", "diamond.json", "--grid", "grid.json")[1]
        assert out == local
        (tmp_path / "plan.json").write_text(out)
        code, out, _ = cli(home, remote, "--json", "run", "plan.json")
        assert code == EXIT_OK and json.loads(out)["status"] == "SUCCEEDED"
        code, _, err = cli(home, remote, "status", "exec-999")
        assert code == EXIT_DOMAIN and "UNKNOWN_EXECUTION" in err
        code, out, _ = cli(home, remote, "prov", "events", "--filter", "task=b", "--filter", "kind=TASK_TRANSITION")
        assert code == EXIT_OK and len(out.strip().splitlines()) == 8
        assert cli(home, remote, "study", "add", "rows.jsonl")[0] == EXIT_USAGE
    finally:
        server.should_exit = True
        thread.join(5)
