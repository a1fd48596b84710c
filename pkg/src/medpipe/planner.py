"""Global pre-enactment planning: level stages plus site placement."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Optional

from .catalog import StudySet
from .errors import EmptyStudySet, InvalidPipeline, NoEligibleSite
from .pipeline import ActorRef, Pipeline, Task, validate
from .util import short_digest


def parse_actor_ref(text: str) -> ActorRef:
    name, sep, version = text.rpartition("@")
    if not sep or not name:
        raise ValueError(f"actor reference {text!r} must look like name@version")
    return name, version


@dataclass(frozen=True)
class SiteDescriptor:
    site_id: str
    installed_actors: frozenset[ActorRef] = frozenset()
    slots: int = 1
    cost_hint: float = 0.0

    def __post_init__(self) -> None:
        if self.slots < 1:
            raise ValueError(f"site {self.site_id}: slots must be >= 1")
        if self.cost_hint < 0:
            raise ValueError(f"site {self.site_id}: cost_hint must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "site_id": self.site_id,
            "installed_actors": sorted(f"{n}@{v}" for n, v in self.installed_actors),
            "slots": self.slots,
            "cost_hint": self.cost_hint,
        }


@dataclass(frozen=True)
class GridView:
    sites: tuple[SiteDescriptor, ...] = ()

    def __post_init__(self) -> None:
        ids = [s.site_id for s in self.sites]
        if len(ids) != len(set(ids)):
            raise ValueError("site ids must be unique")

    def site(self, site_id: str) -> SiteDescriptor:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(site_id)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GridView:
        return cls(
            tuple(
                SiteDescriptor(
                    s["site_id"],
                    frozenset(parse_actor_ref(a) for a in s.get("installed_actors", [])),
                    int(s.get("slots", 1)),
                    float(s.get("cost_hint", 0.0)),
                )
                for s in d.get("sites", [])
            )
        )

    def to_dict(self) -> dict[str, Any]:
        return {"sites": [s.to_dict() for s in self.sites]}


@dataclass(frozen=True)
class ExecutionPlan:
    plan_id: str
    pipeline_id: str
    stages: tuple[tuple[str, ...], ...]
    assignments: Mapping[str, str] = field(hash=False)
    study_fanout: Mapping[tuple[str, str], tuple[str, ...]] = field(hash=False)
    study_set_id: Optional[str] = None

    def stage_of(self, task_id: str) -> int:
        for i, stage in enumerate(self.stages):
            if task_id in stage:
                return i
        raise KeyError(task_id)

    def body(self) -> dict[str, Any]:
        return {
            "pipeline_id": self.pipeline_id,
            "study_set_id": self.study_set_id,
            "stages": [list(s) for s in self.stages],
            "assignments": dict(sorted(self.assignments.items())),
            "study_fanout": {f"{t}.{p}": list(m) for (t, p), m in sorted(self.study_fanout.items())},
        }

    def to_dict(self) -> dict[str, Any]:
        return {"plan_id": self.plan_id, **self.body()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionPlan:
        fanout = {}
        for key, members in d.get("study_fanout", {}).items():
            t, p = key.rsplit(".", 1)
            fanout[(t, p)] = tuple(members)
        return cls(
            d["plan_id"],
            d["pipeline_id"],
            tuple(tuple(s) for s in d["stages"]),
            dict(d["assignments"]),
            fanout,
            d.get("study_set_id"),
        )


def stage_levels(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> dict[str, int]:
    """Length of the longest edge-path ending at each node (DAG only)."""
    nodes = list(nodes)
    pred: dict[str, set[str]] = {n: set() for n in nodes}
    for u, v in edges:
        pred[v].add(u)
    level: dict[str, int] = {}
    remaining = set(nodes)
    while remaining:
        ready = [n for n in remaining if all(u in level for u in pred[n])]
        if not ready:
            raise ValueError("graph has a cycle")
        for n in ready:
            level[n] = max((level[u] + 1 for u in pred[n]), default=0)
            remaining.discard(n)
    return level


def parallel_stages(p: Pipeline) -> list[list[str]]:
    level = stage_levels(p.task_ids, [(e.from_task, e.to_task) for e in p.edges])
    stages: list[list[str]] = [[] for _ in range(max(level.values(), default=-1) + 1)]
    for tid, lvl in level.items():
        stages[lvl].append(tid)
    return [sorted(s) for s in stages]


def eligible_sites(task: Task, grid: GridView) -> list[str]:
    return sorted(s.site_id for s in grid.sites if task.actor_ref in s.installed_actors)


def plan(p: Pipeline, s: Optional[StudySet], grid: GridView) -> ExecutionPlan:
    """Stage the pipeline and place each task on an eligible site.

    Within a stage, each task goes to the eligible site with the lowest
    projected load per slot (counting tasks already placed there in the
    same stage), then lowest cost hint, then lowest site id.
    """
    report = validate(p)
    if not report.ok:
        raise InvalidPipeline("pipeline does not validate", report.to_dict())
    if p.study_inputs and (s is None or not s.members):
        raise EmptyStudySet("pipeline declares study inputs but the study set is empty")
    stages = parallel_stages(p)
    sites = {site.site_id: site for site in grid.sites}
    assignments: dict[str, str] = {}
    for stage in stages:
        load: dict[str, int] = dict.fromkeys(sites, 0)
        for tid in stage:
            candidates = eligible_sites(p.task(tid), grid)
            if not candidates:
                raise NoEligibleSite(tid)
            best = min(
                candidates,
                key=lambda sid: (Fraction(load[sid], sites[sid].slots), sites[sid].cost_hint, sid),
            )
            assignments[tid] = best
            load[best] += 1
    members = tuple(s.members) if s is not None else ()
    fanout = {ref: members for ref in sorted(p.study_inputs)}
    draft = ExecutionPlan("", p.id, tuple(tuple(st) for st in stages), assignments, fanout, s.set_id if s else None)
    return replace(draft, plan_id="plan-" + short_digest(draft.body()))


def check_plan(ep: ExecutionPlan, p: Pipeline, grid: GridView) -> list[str]:
    """Return human-readable violations of the plan invariants."""
    problems: list[str] = []
    flat = [t for st in ep.stages for t in st]
    if sorted(flat) != sorted(p.task_ids) or len(flat) != len(set(flat)):
        problems.append("stages do not partition the task ids")
    for e in p.edges:
        if ep.stage_of(e.from_task) >= ep.stage_of(e.to_task):
            problems.append(f"edge {e} does not cross stages forward")
    for tid, sid in ep.assignments.items():
        if p.task(tid).actor_ref not in grid.site(sid).installed_actors:
            problems.append(f"site {sid} lacks the actor of {tid}")
    return problems
