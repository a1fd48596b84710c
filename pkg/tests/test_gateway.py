from __future__ import annotations

import json

import pytest
from fixtures import TWO_SITE_GRID, catalog_rows, doc
from gwutil import client, make_home, wait_done

from medpipe.service import Services


@pytest.fixture
def gw(tmp_path, monkeypatch):
    monkeypatch.delenv("PIPELINE_TOKEN", raising=False)
    settings = make_home(tmp_path / "home")
    Services(settings).add_images(catalog_rows(3))
    return client(settings)


def test_health(gw):
    r = gw.get("/health")
    assert r.status_code == 200 and r.json() == {"status": "ok"}
    assert r.headers["x-correlation-id"]
    assert gw.get("/health", headers={"X-Correlation-ID": "abc"}).headers["x-correlation-id"] == "abc"


def test_invalid_pipeline_is_422_with_report(gw):
    d = doc("diamond")
    d["edges"].append({"from": "d.out", "to": "a.seed"})
    r = gw.post("/pipelines", content=json.dumps(d))
    assert r.status_code == 422
    body = r.json()
    assert set(body) == {"code", "message", "detail"}
    assert body["detail"]["ok"] is False and "CYCLE" in {i["code"] for i in body["detail"]["issues"]}
    assert gw.post("/pipelines", content=b"{not json").status_code == 422


def test_unknown_ids_are_404(gw):
    assert gw.get("/executions/exec-404").status_code == 404
    assert gw.get("/provenance/lineage/" + "0" * 64).status_code == 404
    assert gw.get("/artifacts/" + "0" * 64).status_code == 404
    assert gw.post("/studysets/none/homogeneity", json={"fields": []}).status_code == 404
    assert gw.post("/plans", json={"pipeline_id": "nope", "grid": TWO_SITE_GRID}).status_code == 404


def test_async_execution(gw):
    assert gw.post("/pipelines", content=json.dumps(doc("diamond"))).status_code == 201
    plan = gw.post("/plans", json={"pipeline_id": "diamond", "grid": TWO_SITE_GRID}).json()
    r = gw.post("/executions", json={"plan_id": plan["plan_id"]})
    assert r.status_code == 202
    exec_id = r.json()["execution_id"]
    assert gw.get(f"/executions/{exec_id}").json()["status"] in {"PENDING", "RUNNING", "SUCCEEDED"}
    final = wait_done(gw, exec_id)
    assert final["status"] == "SUCCEEDED"
    out = next(o["artifact_id"] for o in final["result"]["outputs"] if o["task_id"] == "d")
    assert gw.get(f"/artifacts/{out}").content.startswith(b"simulated output")
    lineage = gw.get(f"/provenance/lineage/{out}").json()
    assert {n.get("task_id") for n in lineage["nodes"] if n["type"] == "task"} == set("abcd")
    b_events = gw.get("/provenance/events", params={"execution_id": exec_id, "task_id": "b", "kind": "TASK_TRANSITION"}).json()
    assert len(b_events["events"]) == 8


def test_unknown_backend_is_400(gw):
    gw.post("/pipelines", content=json.dumps(doc("diamond")))
    plan = gw.post("/plans", json={"pipeline_id": "diamond", "grid": TWO_SITE_GRID}).json()
    assert gw.post("/executions", json={"plan_id": plan["plan_id"], "backend": "glite"}).status_code == 400


def test_no_eligible_site_is_409(gw):
    gw.post("/pipelines", content=json.dumps(doc("diamond")))
    grid = {"sites": [{"site_id": "S1", "installed_actors": ["gen@1"], "slots": 1, "cost_hint": 0}]}
    r = gw.post("/plans", json={"pipeline_id": "diamond", "grid": grid})
    assert r.status_code == 409 and r.json()["code"] == "NO_ELIGIBLE_SITE"


def test_study_endpoints(gw):
    r = gw.post("/studysets/query", json={"predicate": "Age >= 61"})
    assert r.status_code == 201
    s = r.json()
    assert s["members"] == ["img001", "img002"]
    assert gw.post("/studysets/query", json={"predicate": "Age >="}).status_code == 400
    assert gw.post("/studysets/query", json={"predicate": "Shoe = 1"}).status_code == 422
    h = gw.post(f"/studysets/{s['set_id']}/homogeneity", json={"fields": ["Modality", "Age"]}).json()
    assert h["homogeneous"] is False and h["checked_fields"] == ["Modality", "Age"]
    policy = {"rules": [{"tag": "PatientName", "action": "REMOVE"}], "salt": ""}
    anon = gw.post(f"/studysets/{s['set_id']}/anonymize", json={"policy": policy})
    assert anon.status_code == 201 and len(anon.json()["study_set"]["members"]) == 2
    bad = {"rules": [{"tag": "PatientID", "action": "PSEUDONYMIZE"}]}
    assert gw.post(f"/studysets/{s['set_id']}/anonymize", json={"policy": bad}).status_code == 422


def test_bearer_token(tmp_path, monkeypatch):
    monkeypatch.setenv("PIPELINE_TOKEN", "sekrit")
    c = client(make_home(tmp_path / "h"))
    assert c.get("/health").status_code == 401
    assert c.get("/health", headers={"Authorization": "Bearer wrong"}).status_code == 401
    assert c.get("/health", headers={"Authorization": "Bearer sekrit"}).status_code == 200


def test_idempotent_reads(gw):
    gw.post("/pipelines", content=json.dumps(doc("diamond")))
    plan = gw.post("/plans", json={"pipeline_id": "diamond", "grid": TWO_SITE_GRID}).json()
    exec_id = gw.post("/executions", json={"plan_id": plan["plan_id"]}).json()["execution_id"]
    wait_done(gw, exec_id)
    for url in (f"/executions/{exec_id}", "/provenance/events"):
        assert gw.get(url).content == gw.get(url).content


def test_bad_request_bodies(gw):
    assert gw.post("/plans", content=b"[1]").status_code == 400
    assert gw.post("/executions", json={}).status_code == 400
    assert gw.post("/studysets/query", json={"predicate": 3}).status_code == 400
