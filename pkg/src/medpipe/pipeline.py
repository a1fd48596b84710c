"""Abstract pipeline language: actors, tasks, edges and study inputs.

A pipeline document is a single JSON object::

    {
      "id": "optional-id", "name": "optional",
      "actors": {"seg": {"version": "2", "command": "seg {in:img} {out:mask}",
                         "inputs": ["img"], "outputs": ["mask"], "params": []}},
      "tasks": {"t1": {"actor": "seg", "version": "2", "params": {}}},
      "edges": [{"from": "t1.mask", "to": "t2.mask"}],
      "study_inputs": ["t1.img"],
      "persist": ["t1.mask"]
    }

A task parameter whose name matches one of the actor's input ports binds
that port to a literal value.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

from .errors import PipelineSyntaxError, UnknownActorRef, UnknownPortRef, UnknownTaskRef
from .util import short_digest

ACTOR_NAME_RE = re.compile(r"[a-z][a-z0-9_-]{0,63}")
IDENT_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_-]*")
PLACEHOLDER_RE = re.compile(r"\{(in|out|param):([^{}]*)\}")

ActorRef = tuple[str, str]
PortRef = tuple[str, str]


@dataclass(frozen=True)
class Actor:
    name: str
    version: str
    command: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    params: tuple[str, ...] = ()

    @property
    def ref(self) -> ActorRef:
        return (self.name, self.version)

    def placeholders(self) -> list[tuple[str, str]]:
        return PLACEHOLDER_RE.findall(self.command)


@dataclass(frozen=True)
class Task:
    id: str
    actor: str
    version: str
    params: Mapping[str, Any] = field(default_factory=dict, hash=False)
    # consume every study-indexed artifact of fanned-out predecessors at once
    gather: bool = False

    @property
    def actor_ref(self) -> ActorRef:
        return (self.actor, self.version)


@dataclass(frozen=True)
class Edge:
    from_task: str
    from_port: str
    to_task: str
    to_port: str

    def __str__(self) -> str:
        return f"{self.from_task}.{self.from_port}->{self.to_task}.{self.to_port}"


@dataclass(frozen=True)
class Pipeline:
    id: str
    name: str
    actors: Mapping[ActorRef, Actor] = field(hash=False)
    tasks: tuple[Task, ...] = ()
    edges: tuple[Edge, ...] = ()
    study_inputs: tuple[PortRef, ...] = ()
    persist: tuple[PortRef, ...] = ()

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise UnknownTaskRef(f"unknown task {task_id!r}")

    def actor_of(self, task: Task | str) -> Actor:
        if isinstance(task, str):
            task = self.task(task)
        try:
            return self.actors[task.actor_ref]
        except KeyError:
            raise UnknownActorRef(f"task {task.id!r} uses unknown actor {task.actor}@{task.version}") from None

    @property
    def task_ids(self) -> list[str]:
        return [t.id for t in self.tasks]

    def predecessors(self, task_id: str) -> list[str]:
        return sorted({e.from_task for e in self.edges if e.to_task == task_id})

    def successors(self, task_id: str) -> list[str]:
        return sorted({e.to_task for e in self.edges if e.from_task == task_id})

    def incoming(self, task_id: str) -> list[Edge]:
        return [e for e in self.edges if e.to_task == task_id]


@dataclass(frozen=True)
class Issue:
    code: str
    locus: tuple[str, ...]
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "locus": list(self.locus), "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def codes(self) -> set[str]:
        return {i.code for i in self.issues}

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "issues": [i.to_dict() for i in self.issues]}


# -- parsing -----------------------------------------------------------------


class _Obj(dict):
    """JSON object that remembers repeated keys instead of dropping them."""

    dups: list[tuple[str, Any]]


def _object_hook(pairs: list[tuple[str, Any]]) -> _Obj:
    obj = _Obj()
    obj.dups = []
    for k, v in pairs:
        if k in obj:
            obj.dups.append((k, v))
        else:
            obj[k] = v
    return obj


def _items(obj: Mapping[str, Any]) -> list[tuple[str, Any]]:
    return list(obj.items()) + list(getattr(obj, "dups", []))


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise PipelineSyntaxError(msg)


def _str_list(value: Any, what: str) -> tuple[str, ...]:
    _expect(isinstance(value, list) and all(isinstance(v, str) for v in value), f"{what} must be a list of strings")
    return tuple(value)


def _split_port(ref: Any, what: str) -> PortRef:
    _expect(isinstance(ref, str) and "." in ref, f"{what} must look like 'task.port', got {ref!r}")
    task_id, port = ref.rsplit(".", 1)
    _expect(bool(task_id) and bool(port), f"{what} must look like 'task.port', got {ref!r}")
    return task_id, port


def parse_pipeline(doc: str | bytes | Mapping[str, Any]) -> Pipeline:
    """Parse a pipeline document and resolve every cross-reference.

    Raises PipelineSyntaxError for malformed documents and UnknownTaskRef,
    UnknownActorRef or UnknownPortRef for dangling references. Structural
    problems that are not reference errors (cycles, unfed ports, duplicate
    ids) are left for :func:`validate`.
    """
    if isinstance(doc, (str, bytes)):
        try:
            raw = json.loads(doc, object_pairs_hook=_object_hook)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise PipelineSyntaxError(f"invalid JSON: {exc}") from None
    else:
        raw = doc
    _expect(isinstance(raw, Mapping), "pipeline document must be a JSON object")
    unknown = set(raw) - {"id", "name", "actors", "tasks", "edges", "study_inputs", "persist"}
    _expect(not unknown, f"unknown top-level keys: {sorted(unknown)}")

    actors_raw = raw.get("actors", {})
    tasks_raw = raw.get("tasks", {})
    _expect(isinstance(actors_raw, Mapping), "'actors' must be an object")
    _expect(isinstance(tasks_raw, Mapping), "'tasks' must be an object")
    _expect(not getattr(actors_raw, "dups", None), "actor names must be unique")

    actors: dict[ActorRef, Actor] = {}
    for name, spec in actors_raw.items():
        _expect(isinstance(spec, Mapping), f"actor {name!r} must be an object")
        version, command = spec.get("version"), spec.get("command")
        _expect(isinstance(version, str), f"actor {name!r} needs a string 'version'")
        _expect(isinstance(command, str), f"actor {name!r} needs a string 'command'")
        actor = Actor(
            name=name,
            version=version,
            command=command,
            inputs=_str_list(spec.get("inputs", []), f"actor {name!r} inputs"),
            outputs=_str_list(spec.get("outputs", []), f"actor {name!r} outputs"),
            params=_str_list(spec.get("params", []), f"actor {name!r} params"),
        )
        actors[actor.ref] = actor

    tasks: list[Task] = []
    for task_id, spec in _items(tasks_raw):
        _expect(isinstance(spec, Mapping), f"task {task_id!r} must be an object")
        actor_name, version = spec.get("actor"), spec.get("version")
        _expect(isinstance(actor_name, str), f"task {task_id!r} needs a string 'actor'")
        if version is None:
            matches = [ref for ref in actors if ref[0] == actor_name]
            version = matches[0][1] if len(matches) == 1 else None
        _expect(isinstance(version, str), f"task {task_id!r} needs a string 'version'")
        if (actor_name, version) not in actors:
            raise UnknownActorRef(f"task {task_id!r} references unknown actor {actor_name}@{version}")
        params = spec.get("params", {})
        _expect(isinstance(params, Mapping), f"task {task_id!r} params must be an object")
        gather = spec.get("gather", False)
        _expect(isinstance(gather, bool), f"task {task_id!r} 'gather' must be a boolean")
        tasks.append(Task(task_id, actor_name, version, dict(params), gather))

    by_id = {t.id: t for t in tasks}

    def port_ref(ref: Any, what: str, direction: str) -> PortRef:
        task_id, port = _split_port(ref, what)
        if task_id not in by_id:
            raise UnknownTaskRef(f"{what} {ref!r} names undeclared task {task_id!r}")
        actor = actors[by_id[task_id].actor_ref]
        ports = actor.outputs if direction == "out" else actor.inputs
        if port not in ports:
            kind = "output" if direction == "out" else "input"
            raise UnknownPortRef(f"{what} {ref!r}: {port!r} is not an {kind} port of actor {actor.name}")
        return task_id, port

    edges_raw = raw.get("edges", [])
    _expect(isinstance(edges_raw, list), "'edges' must be a list")
    edges: list[Edge] = []
    for e in edges_raw:
        _expect(isinstance(e, Mapping) and "from" in e and "to" in e, "each edge needs 'from' and 'to'")
        src = port_ref(e["from"], "edge source", "out")
        dst = port_ref(e["to"], "edge target", "in")
        edges.append(Edge(src[0], src[1], dst[0], dst[1]))

    study_raw = raw.get("study_inputs", [])
    _expect(isinstance(study_raw, list), "'study_inputs' must be a list")
    study = tuple(port_ref(r, "study input", "in") for r in study_raw)
    persist_raw = raw.get("persist", [])
    _expect(isinstance(persist_raw, list), "'persist' must be a list")
    persist = tuple(port_ref(r, "persist entry", "out") for r in persist_raw)

    pid = raw.get("id")
    if pid is None:
        body = {k: v for k, v in raw.items() if k != "id"}
        pid = "p-" + short_digest(json.loads(json.dumps(body)))
    _expect(isinstance(pid, str) and bool(pid), "'id' must be a non-empty string")
    name = raw.get("name", pid)
    _expect(isinstance(name, str), "'name' must be a string")
    return Pipeline(pid, name, actors, tuple(tasks), tuple(edges), study, persist)


def serialize_pipeline(p: Pipeline) -> dict[str, Any]:
    """Inverse of :func:`parse_pipeline` (returns the JSON-ready document)."""
    names = [a.name for a in p.actors.values()]
    if len(names) != len(set(names)):
        raise PipelineSyntaxError("documents hold one version per actor name")
    if len(set(p.task_ids)) != len(p.tasks):
        raise PipelineSyntaxError("cannot serialize duplicate task ids")
    doc: dict[str, Any] = {
        "id": p.id,
        "name": p.name,
        "actors": {
            a.name: {
                "version": a.version,
                "command": a.command,
                "inputs": list(a.inputs),
                "outputs": list(a.outputs),
                "params": list(a.params),
            }
            for a in p.actors.values()
        },
        "tasks": {},
        "edges": [{"from": f"{e.from_task}.{e.from_port}", "to": f"{e.to_task}.{e.to_port}"} for e in p.edges],
        "study_inputs": [f"{t}.{port}" for t, port in p.study_inputs],
        "persist": [f"{t}.{port}" for t, port in p.persist],
    }
    for t in p.tasks:
        entry: dict[str, Any] = {"actor": t.actor, "version": t.version, "params": dict(t.params)}
        if t.gather:
            entry["gather"] = True
        doc["tasks"][t.id] = entry
    return doc


# -- validation --------------------------------------------------------------


def find_cycle(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> list[str] | None:
    """Return one witness cycle (smallest id first) or None for a DAG.

    Search starts from nodes in lexicographic order and follows successors
    in lexicographic order, so the witness is deterministic.
    """
    succ: dict[str, set[str]] = {n: set() for n in nodes}
    for u, v in edges:
        succ.setdefault(u, set()).add(v)
        succ.setdefault(v, set())
    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(succ, WHITE)
    stack_path: list[str] = []

    def visit(u: str) -> list[str] | None:
        color[u] = GREY
        stack_path.append(u)
        for v in sorted(succ[u]):
            if color[v] == GREY:
                cyc = stack_path[stack_path.index(v):]
                i = cyc.index(min(cyc))
                return cyc[i:] + cyc[:i]
            if color[v] == WHITE:
                found = visit(v)
                if found:
                    return found
        stack_path.pop()
        color[u] = BLACK
        return None

    for n in sorted(succ):
        if color[n] == WHITE:
            found = visit(n)
            if found:
                return found
    return None


def topological_order(p: Pipeline) -> list[str]:
    """Kahn's algorithm with a lexicographic ready queue."""
    ids = sorted(set(p.task_ids))
    indeg = dict.fromkeys(ids, 0)
    succ: dict[str, set[str]] = {i: set() for i in ids}
    for e in {(e.from_task, e.to_task) for e in p.edges}:
        succ[e[0]].add(e[1])
        indeg[e[1]] += 1
    ready = [i for i in ids if indeg[i] == 0]
    order: list[str] = []
    while ready:
        ready.sort()
        u = ready.pop(0)
        order.append(u)
        for v in sorted(succ[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    if len(order) != len(ids):
        raise ValueError("pipeline graph has a cycle")
    return order


def validate(p: Pipeline) -> ValidationReport:
    """Report every violated structural invariant; never raises."""
    issues: list[Issue] = []

    def add(code: str, locus: Iterable[str], message: str) -> None:
        issues.append(Issue(code, tuple(locus), message))

    for actor in p.actors.values():
        if not ACTOR_NAME_RE.fullmatch(actor.name):
            add("BAD_NAME", (actor.name,), f"actor name {actor.name!r} is not a valid identifier")
        ports = actor.inputs + actor.outputs
        for dup in sorted({x for x in ports if ports.count(x) > 1}):
            add("DUP_PORT", (actor.name, dup), f"port {dup!r} declared twice on actor {actor.name}")
        for kind, ref in actor.placeholders():
            declared = {"in": actor.inputs, "out": actor.outputs, "param": actor.params}[kind]
            if ref not in declared:
                add("BAD_TEMPLATE", (actor.name,), f"command references undeclared {kind} {ref!r}")

    seen: set[str] = set()
    for t in p.tasks:
        if t.id in seen:
            add("DUP_ID", (t.id,), f"task id {t.id!r} declared more than once")
        seen.add(t.id)
        if not IDENT_RE.fullmatch(t.id):
            add("BAD_NAME", (t.id,), f"task id {t.id!r} is not a valid identifier")

    tasks = {t.id: t for t in p.tasks}
    known_actor: dict[str, Actor] = {}
    for t in p.tasks:
        actor = p.actors.get(t.actor_ref)
        if actor is None:
            add("UNKNOWN_ACTOR", (t.id,), f"task {t.id!r} uses unknown actor {t.actor}@{t.version}")
            continue
        known_actor[t.id] = actor
        for key in t.params:
            if key not in actor.params and key not in actor.inputs:
                add("UNKNOWN_PARAM", (t.id, key), f"task {t.id!r} binds undeclared parameter {key!r}")
        for kind, ref in actor.placeholders():
            if kind == "param" and ref in actor.params and ref not in t.params:
                add("UNBOUND_PARAM", (t.id, ref), f"task {t.id!r} leaves parameter {ref!r} unbound")

    feeds: dict[PortRef, int] = {}
    for e in p.edges:
        bad = False
        for tid, port, direction in ((e.from_task, e.from_port, "out"), (e.to_task, e.to_port, "in")):
            if tid not in tasks:
                add("UNKNOWN_TASK", (str(e),), f"edge {e} names unknown task {tid!r}")
                bad = True
            elif tid in known_actor:
                actor = known_actor[tid]
                if port not in (actor.outputs if direction == "out" else actor.inputs):
                    add("UNKNOWN_PORT", (str(e),), f"edge {e}: {port!r} is not an {direction}put port of {actor.name}")
                    bad = True
        if not bad:
            feeds[(e.to_task, e.to_port)] = feeds.get((e.to_task, e.to_port), 0) + 1
    for kind, refs, direction in (("study input", p.study_inputs, "in"), ("persist entry", p.persist, "out")):
        for tid, port in refs:
            actor = known_actor.get(tid)
            if tid not in tasks:
                add("UNKNOWN_TASK", (f"{tid}.{port}",), f"{kind} names unknown task {tid!r}")
            elif actor is not None and port not in (actor.outputs if direction == "out" else actor.inputs):
                add("UNKNOWN_PORT", (f"{tid}.{port}",), f"{kind} {tid}.{port} is not an {direction}put port")
            elif direction == "in":
                feeds[(tid, port)] = feeds.get((tid, port), 0) + 1

    for tid, actor in known_actor.items():
        for port in actor.inputs:
            n = feeds.get((tid, port), 0) + (1 if port in tasks[tid].params else 0)
            if n == 0:
                add("UNFED_PORT", (tid, port), f"input port {tid}.{port} is not fed")
            elif n > 1:
                add("MULTIPLY_FED", (tid, port), f"input port {tid}.{port} is fed {n} times")

    cycle = find_cycle(tasks, [(e.from_task, e.to_task) for e in p.edges if e.from_task in tasks and e.to_task in tasks])
    if cycle:
        add("CYCLE", cycle, "dependency cycle " + " -> ".join(cycle + [cycle[0]]))
    return ValidationReport(tuple(issues))


def required_actors(p: Pipeline) -> frozenset[ActorRef]:
    return frozenset(t.actor_ref for t in p.tasks)


def consumers(p: Pipeline, task_id: str, port: str) -> list[Edge]:
    return [e for e in p.edges if e.from_task == task_id and e.from_port == port]


def fanned_tasks(p: Pipeline) -> set[str]:
    """Tasks that run once per study-set member.

    Study-fed tasks fan out; fan-out propagates along edges except into
    tasks flagged ``gather``.
    """
    fanned = {t for t, _ in p.study_inputs}
    for tid in topological_order(p):
        task = p.task(tid)
        if tid not in fanned and not task.gather and any(u in fanned for u in p.predecessors(tid)):
            fanned.add(tid)
    return fanned
