from __future__ import annotations

import json
import math

import pytest
from fixtures import TWO_SITE_GRID, doc
from hypothesis import given, settings
from hypothesis import strategies as st
from strategies import dag_document, dags, longest_path_depth

from medpipe.catalog import StudySet
from medpipe.errors import EmptyStudySet, InvalidPipeline, NoEligibleSite
from medpipe.pipeline import parse_pipeline
from medpipe.planner import (
    ExecutionPlan,
    GridView,
    SiteDescriptor,
    check_plan,
    eligible_sites,
    parallel_stages,
    plan,
)
from medpipe.util import dumps


def grid(**sites: list[str]) -> GridView:
    return GridView.from_dict({"sites": [{"site_id": k, "installed_actors": v, "slots": 1, "cost_hint": 1.0} for k, v in sites.items()]})


def independent(n: int, actor: str = "a-t", version: str = "1") -> dict:
    return {
        "actors": {actor: {"version": version, "command": "true", "inputs": [], "outputs": ["o"]}},
        "tasks": {f"t{i}": {"actor": actor, "version": version} for i in range(n)},
        "edges": [],
    }


def test_diamond_stages():
    # oracle: longest simple path ending at a, b, c, d is 0, 1, 1, 2 edges
    assert longest_path_depth(list("abcd"), [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]) == {"a": 0, "b": 1, "c": 1, "d": 2}
    assert parallel_stages(parse_pipeline(doc("diamond"))) == [["a"], ["b", "c"], ["d"]]


def test_single_and_independent():
    assert parallel_stages(parse_pipeline(independent(1))) == [["t0"]]
    assert parallel_stages(parse_pipeline(independent(2))) == [["t0", "t1"]]


def test_eligible_sites():
    d = independent(1, "seg", "2")
    task = parse_pipeline(d).tasks[0]
    assert eligible_sites(task, grid(S1=["fsl@1"], S2=["fsl@1", "seg@2"])) == ["S2"]
    assert eligible_sites(task, grid(S1=["fsl@1"])) == []
    assert eligible_sites(task, grid(S2=["seg@2"], S1=["seg@2"])) == ["S1", "S2"]
    assert eligible_sites(task, grid(S1=["seg@20"])) == []


def test_plan_single_site():
    ep = plan(parse_pipeline(independent(2)), None, grid(S1=["a-t@1"], S2=[]))
    assert dict(ep.assignments) == {"t0": "S1", "t1": "S1"}


def test_plan_balances_with_tie_break():
    ep = plan(parse_pipeline(independent(2)), None, grid(S2=["a-t@1"], S1=["a-t@1"]))
    assert dict(ep.assignments) == {"t0": "S1", "t1": "S2"}


def test_plan_prefers_cheaper_then_slots():
    g = GridView((SiteDescriptor("S1", frozenset({("a-t", "1")}), 1, 2.0), SiteDescriptor("S2", frozenset({("a-t", "1")}), 2, 1.0)))
    ep = plan(parse_pipeline(independent(3)), None, g)
    # S2 (cost 1, 2 slots): loads 0/2 -> t0, 1/2 vs S1 0/1 -> S1, then 1/2 vs 1/1 -> S2
    assert dict(ep.assignments) == {"t0": "S2", "t1": "S1", "t2": "S2"}


def test_plan_no_eligible_site():
    with pytest.raises(NoEligibleSite) as err:
        plan(parse_pipeline(independent(1)), None, grid(S1=["other@1"]))
    assert err.value.task_id == "t0" and err.value.detail == {"task_id": "t0"}


def test_plan_requires_valid_pipeline_and_study_set():
    d = doc("diamond")
    d["edges"].append({"from": "d.out", "to": "a.seed"})
    with pytest.raises(InvalidPipeline):
        plan(parse_pipeline(d), None, GridView.from_dict(TWO_SITE_GRID))
    with pytest.raises(EmptyStudySet):
        plan(parse_pipeline(doc("fanout")), StudySet("s", "o", ()), GridView.from_dict(TWO_SITE_GRID))


def test_plan_fanout_and_serialization():
    s = StudySet("ss-1", "o", ("i1", "i2", "i3"))
    ep = plan(parse_pipeline(doc("mapreduce")), s, GridView.from_dict(TWO_SITE_GRID))
    assert dict(ep.study_fanout) == {("m", "img"): ("i1", "i2", "i3")}
    assert ep.study_set_id == "ss-1"
    again = ExecutionPlan.from_dict(json.loads(dumps(ep.to_dict())))
    assert again == ep and dumps(again.to_dict()) == dumps(ep.to_dict())


def test_diamond_plan_on_two_sites():
    ep = plan(parse_pipeline(doc("diamond")), None, GridView.from_dict(TWO_SITE_GRID))
    assert [list(s) for s in ep.stages] == [["a"], ["b", "c"], ["d"]]
    assert dict(ep.assignments) == {"a": "S1", "b": "S1", "c": "S2", "d": "S1"}


# -- properties --------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(dags())
def test_stages_match_longest_path_oracle(dag):
    nodes, edges = dag
    p = parse_pipeline(dag_document(nodes, edges))
    stages = parallel_stages(p)
    depth = longest_path_depth(nodes, edges)
    assert {t: i for i, s in enumerate(stages) for t in s} == depth
    assert all(s == sorted(s) for s in stages)
    assert len(stages) == 1 + max(depth.values())
    ep = plan(p, None, GridView((SiteDescriptor("S", frozenset(p.actors), 1, 0.0),)))
    assert check_plan(ep, p, GridView((SiteDescriptor("S", frozenset(p.actors), 1, 0.0),))) == []


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5))
def test_balance_bound(m, k):
    g = GridView(tuple(SiteDescriptor(f"S{i}", frozenset({("a-t", "1")}), 1, 1.0) for i in range(k)))
    ep = plan(parse_pipeline(independent(m)), None, g)
    counts = [list(ep.assignments.values()).count(f"S{i}") for i in range(k)]
    assert max(counts) <= math.ceil(m / k)


@settings(max_examples=50, deadline=None)
@given(dags(), st.data())
def test_plan_is_deterministic_and_sound(dag, data):
    nodes, edges = dag
    p = parse_pipeline(dag_document(nodes, edges))
    refs = sorted(p.actors)
    sites = []
    for i in range(data.draw(st.integers(1, 4))):
        installed = data.draw(st.sets(st.sampled_from(refs)))
        sites.append(SiteDescriptor(f"S{i}", frozenset(installed), data.draw(st.integers(1, 3)), data.draw(st.sampled_from([0.0, 1.0, 2.5]))))
    g = GridView(tuple(sites))
    coverable = all(any(t.actor_ref in s.installed_actors for s in sites) for t in p.tasks)
    if not coverable:
        with pytest.raises(NoEligibleSite):
            plan(p, None, g)
        return
    a, b = plan(p, None, g), plan(p, None, GridView(tuple(reversed(sites))))
    assert dumps(a.to_dict()) == dumps(b.to_dict())
    for tid, sid in a.assignments.items():
        assert p.task(tid).actor_ref in g.site(sid).installed_actors
