"""Plan enactment through the glueing layer.

The coordinator walks the plan stage by stage. Every (task, study index)
job of a stage is submitted before any of them is awaited, failed attempts
are resubmitted to the same site up to ``retry_limit`` times, and the next
stage only starts once the whole current stage is DONE. Each observed job
transition and each produced artifact is written to the provenance store
as it happens.
"""

from __future__ import annotations

import json
import logging
import shlex
import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

from .catalog import Catalog
from .errors import Canceled, EnactmentFailed, InvalidPipeline, UnknownBackend, UnknownExecution, UnknownPort
from .glue import Glue, JobDescription, JobHandle, JobState
from .pipeline import PLACEHOLDER_RE, Actor, Pipeline, Task, consumers, fanned_tasks, serialize_pipeline
from .planner import ExecutionPlan
from .provenance import (
    LOCATOR_PREFIX,
    PERSISTENT,
    TRANSITORY,
    ProvenanceEvent,
    ProvenanceStore,
)
from .states import State

log = logging.getLogger(__name__)

SUCCEEDED, FAILED, CANCELED = "SUCCEEDED", "FAILED", "CANCELED"

OutputKey = tuple[str, str, Optional[int]]


@dataclass
class ExecutionResult:
    execution_id: str
    plan_id: str
    status: str
    outputs: dict[OutputKey, str] = field(default_factory=dict)
    failure: Optional[tuple[str, str]] = None

    def to_dict(self) -> dict[str, Any]:
        rows = [
            {"task_id": t, "port": p, "study_index": i, "artifact_id": a}
            for (t, p, i), a in sorted(self.outputs.items(), key=lambda kv: (kv[0][0], kv[0][1], -1 if kv[0][2] is None else kv[0][2]))
        ]
        return {
            "execution_id": self.execution_id,
            "plan_id": self.plan_id,
            "status": self.status,
            "outputs": rows,
            "failure": None if self.failure is None else {"task_id": self.failure[0], "diagnostics": self.failure[1]},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionResult:
        outputs = {(r["task_id"], r["port"], r["study_index"]): r["artifact_id"] for r in d.get("outputs", [])}
        f = d.get("failure")
        return cls(d["execution_id"], d["plan_id"], d["status"], outputs, None if f is None else (f["task_id"], f["diagnostics"]))


@dataclass
class TaskAttempt:
    task_id: str
    study_index: Optional[int]
    attempt: int
    handle: JobHandle
    jd: JobDescription
    inputs: tuple[str, ...]
    recorded: int = 0
    state: State = State.PENDING
    settled: bool = False


def classify_artifact(task_id: str, port: str, p: Pipeline) -> str:
    """PERSISTENT for pipeline-terminal or ``persist``-marked ports, else TRANSITORY."""
    actor = p.actor_of(task_id)
    if port not in actor.outputs:
        raise UnknownPort(f"{port!r} is not an output port of task {task_id!r}")
    if (task_id, port) in p.persist or not consumers(p, task_id, port):
        return PERSISTENT
    return TRANSITORY


def _render(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, sort_keys=True)


def expand_command(
    actor: Actor,
    params: Mapping[str, Any],
    inputs: Mapping[str, Sequence[str]],
    outputs: Mapping[str, str],
) -> list[str]:
    """Expand an actor's command template into an argv list.

    A token that is exactly one multi-valued ``{in:PORT}`` placeholder
    expands into one argument per file; elsewhere values are space-joined.
    """

    def lookup(kind: str, name: str) -> list[str]:
        if kind == "in":
            return list(inputs[name])
        if kind == "out":
            return [outputs[name]]
        return [_render(params[name])]

    argv: list[str] = []
    for token in shlex.split(actor.command):
        whole = PLACEHOLDER_RE.fullmatch(token)
        if whole:
            argv.extend(lookup(whole.group(1), whole.group(2)))
        else:
            argv.append(PLACEHOLDER_RE.sub(lambda m: " ".join(lookup(m.group(1), m.group(2))), token))
    return argv


def in_name(port: str, i: Optional[int] = None) -> str:
    return f"in_{port}" if i is None else f"in_{port}_{i}"


def out_name(port: str) -> str:
    return f"out_{port}"


def _artifact_id(locator: str) -> str:
    if not locator.startswith(LOCATOR_PREFIX):
        raise ValueError(f"{locator} is not a store locator")
    return locator[len(LOCATOR_PREFIX):]


class _Execution:
    def __init__(self, execution_id: str, plan: ExecutionPlan, pipeline: Pipeline, backend: str, retry_limit: int) -> None:
        self.execution_id = execution_id
        self.plan = plan
        self.pipeline = pipeline
        self.backend = backend
        self.retry_limit = retry_limit
        self.cancel_requested = threading.Event()
        self.active: list[TaskAttempt] = []
        self.lock = threading.Lock()


class Enactor:
    """Runs execution plans; keeps a registry of live executions for cancel."""

    def __init__(
        self,
        glue: Glue,
        prov: ProvenanceStore,
        catalog: Optional[Catalog] = None,
        backend: str = "local",
        retry_limit: int = 1,
        on_event: Optional[Callable[[ProvenanceEvent], None]] = None,
    ) -> None:
        self.glue = glue
        self.prov = prov
        self.catalog = catalog
        self.backend = backend
        self.retry_limit = retry_limit
        self.on_event = on_event
        self._live: dict[str, _Execution] = {}
        self._lock = threading.Lock()

    # -- public ---------------------------------------------------------------

    def start(
        self,
        plan: ExecutionPlan,
        p: Pipeline,
        backend: Optional[str] = None,
        retry_limit: Optional[int] = None,
    ) -> str:
        """Record EXEC_STARTED and register the execution; :meth:`run` does the work."""
        backend = backend or self.backend
        retry_limit = self.retry_limit if retry_limit is None else retry_limit
        if retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if plan.pipeline_id != p.id or sorted(t for st in plan.stages for t in st) != sorted(p.task_ids):
            raise InvalidPipeline(f"plan {plan.plan_id} does not belong to pipeline {p.id}")
        if backend not in self.glue.backends():
            raise UnknownBackend(f"no adaptor registered for backend {backend!r}")
        self.prov.register_pipeline(p.id, serialize_pipeline(p))
        self.prov.register_plan(plan.to_dict())
        exec_id = self.prov.start_execution(
            {"plan_id": plan.plan_id, "pipeline_id": p.id, "backend": backend, "retry_limit": retry_limit}
        )
        with self._lock:
            self._live[exec_id] = _Execution(exec_id, plan, p, backend, retry_limit)
        return exec_id

    def run(self, execution_id: str) -> ExecutionResult:
        with self._lock:
            ex = self._live.get(execution_id)
        if ex is None:
            raise UnknownExecution(f"execution {execution_id!r} is not live")
        try:
            return self._run(ex)
        finally:
            with self._lock:
                self._live.pop(execution_id, None)

    def enact(
        self,
        plan: ExecutionPlan,
        p: Pipeline,
        backend: Optional[str] = None,
        retry_limit: Optional[int] = None,
    ) -> ExecutionResult:
        return self.run(self.start(plan, p, backend, retry_limit))

    def cancel_execution(self, execution_id: str) -> None:
        """Request cancellation; the coordinator records the CANCELED ends."""
        with self._lock:
            ex = self._live.get(execution_id)
        if ex is None:
            raise UnknownExecution(f"execution {execution_id!r} is not live")
        ex.cancel_requested.set()
        with ex.lock:
            handles = [a.handle for a in ex.active if not a.settled]
        for h in handles:
            self.glue.cancel(h)

    def live(self) -> list[str]:
        with self._lock:
            return sorted(self._live)

    # -- coordinator ----------------------------------------------------------

    def _emit(self, kind: str, payload: Mapping[str, Any], ex: _Execution) -> ProvenanceEvent:
        event = self.prov.append(kind, payload, ex.execution_id)
        if self.on_event is not None:
            self.on_event(event)
        return event

    def _resolve_study_member(self, image_id: str) -> str:
        if self.catalog is None:
            raise InvalidPipeline("a catalog is needed to resolve study-set members")
        self.catalog.refresh()
        ref = self.catalog.get(image_id).payload_ref
        if ref.startswith(LOCATOR_PREFIX):
            aid = _artifact_id(ref)
            self.prov.ensure_external(aid)
            return aid
        return self.prov.import_artifact(self.prov.artifacts.resolve(ref).read_bytes())

    def _run(self, ex: _Execution) -> ExecutionResult:
        p, plan = ex.pipeline, ex.plan
        result = ExecutionResult(ex.execution_id, plan.plan_id, SUCCEEDED)
        fanned = fanned_tasks(p)
        members: tuple[str, ...] = ()
        for ref in p.study_inputs:
            members = plan.study_fanout.get(ref, ())
            break
        n = len(members)
        study_artifacts = [self._resolve_study_member(m) for m in members]
        literals: dict[tuple[str, str], str] = {}
        try:
            for stage_no, stage in enumerate(plan.stages):
                if ex.cancel_requested.is_set():
                    result.status = CANCELED
                    break
                attempts: list[TaskAttempt] = []
                for tid in stage:
                    task = p.task(tid)
                    for idx in (range(n) if tid in fanned else [None]):
                        attempts.append(
                            self._submit(ex, task, idx, 1, stage_no, fanned, n, study_artifacts, literals, result)
                        )
                self._await_stage(ex, attempts, result)
                if result.status != SUCCEEDED:
                    break
        except BaseException as exc:
            result.status = FAILED
            result.failure = result.failure or ("", f"coordinator error: {exc}")
            self._cancel_active(ex)
            self._finish(ex, result)
            raise
        self._finish(ex, result)
        if result.status == FAILED:
            assert result.failure is not None
            raise EnactmentFailed(result.failure[0], result.failure[1], result)
        if result.status == CANCELED:
            raise Canceled(ex.execution_id, result)
        return result

    def _finish(self, ex: _Execution, result: ExecutionResult) -> None:
        self._emit("EXEC_ENDED", {"status": result.status, "result": result.to_dict()}, ex)

    def _cancel_active(self, ex: _Execution) -> None:
        with ex.lock:
            handles = [a.handle for a in ex.active if not a.settled]
        for h in handles:
            try:
                self.glue.cancel(h)
            except Exception:  # noqa: BLE001
                log.exception("cancel of %s failed", h.handle_id)

    def _submit(
        self,
        ex: _Execution,
        task: Task,
        idx: Optional[int],
        attempt: int,
        stage_no: int,
        fanned: set[str],
        n: int,
        study_artifacts: Sequence[str],
        literals: dict[tuple[str, str], str],
        result: ExecutionResult,
    ) -> TaskAttempt:
        p = ex.pipeline
        actor = p.actor_of(task)
        names: dict[str, list[str]] = {}
        files: list[tuple[str, str]] = []
        consumed: list[str] = []
        incoming = {e.to_port: e for e in p.incoming(task.id)}
        for port in actor.inputs:
            if port in incoming:
                e = incoming[port]
                if e.from_task in fanned and task.id not in fanned:
                    aids = [result.outputs[(e.from_task, e.from_port, i)] for i in range(n)]
                    port_names = [in_name(port, i) for i in range(n)]
                else:
                    src_idx = idx if e.from_task in fanned else None
                    aids = [result.outputs[(e.from_task, e.from_port, src_idx)]]
                    port_names = [in_name(port)]
            elif (task.id, port) in p.study_inputs:
                aids = [study_artifacts[idx]]  # type: ignore[index]
                port_names = [in_name(port)]
            else:
                key = (task.id, port)
                if key not in literals:
                    literals[key] = self.prov.import_artifact(_render(task.params[port]).encode("utf-8"))
                aids = [literals[key]]
                port_names = [in_name(port)]
            names[port] = port_names
            files.extend((LOCATOR_PREFIX + a, nm) for a, nm in zip(aids, port_names))
            consumed.extend(aids)
        outs = {port: out_name(port) for port in actor.outputs}
        argv = expand_command(actor, task.params, names, outs)
        jd = JobDescription(
            executable=argv[0],
            arguments=tuple(argv[1:]),
            input_files=tuple(files),
            output_files=tuple(outs.values()),
            site_id=ex.plan.assignments[task.id],
            labels={
                "execution_id": ex.execution_id,
                "task_id": task.id,
                "attempt": attempt,
                "stage": stage_no,
                "study_index": idx,
                "actor": actor.name,
            },
            side_effect_free=not actor.outputs,
        )
        return self._submit_jd(ex, task.id, idx, attempt, jd, tuple(consumed))

    def _submit_jd(
        self, ex: _Execution, task_id: str, idx: Optional[int], attempt: int, jd: JobDescription, inputs: tuple[str, ...]
    ) -> TaskAttempt:
        handle = self.glue.submit(jd, ex.backend)
        ta = TaskAttempt(task_id, idx, attempt, handle, jd, inputs)
        with ex.lock:
            ex.active.append(ta)
        if ex.cancel_requested.is_set():
            self.glue.cancel(handle)
        return ta

    def _record_transitions(self, ex: _Execution, ta: TaskAttempt, st: JobState) -> None:
        history = st.history
        for i in range(ta.recorded, len(history)):
            src = history[i - 1].value if i > 0 else None
            payload = {
                "task_id": ta.task_id,
                "study_index": ta.study_index,
                "attempt": ta.attempt,
                "site_id": ta.jd.site_id,
                "from_state": src,
                "to_state": history[i].value,
            }
            if history[i].terminal:
                payload["exit_code"] = st.exit_code
                if history[i] is not State.DONE:
                    payload["diagnostics"] = st.diagnostics
            self._emit("TASK_TRANSITION", payload, ex)
        ta.recorded = len(history)
        ta.state = history[-1]

    def _await_stage(self, ex: _Execution, attempts: list[TaskAttempt], result: ExecutionResult) -> None:
        p = ex.pipeline
        pending = list(attempts)
        while pending:
            still: list[TaskAttempt] = []
            for ta in pending:
                st = self.glue.status(ta.handle)
                self._record_transitions(ex, ta, st)
                if not st.terminal:
                    still.append(ta)
                    continue
                with ex.lock:
                    ta.settled = True
                if st.state is State.DONE:
                    for port in p.actor_of(ta.task_id).outputs:
                        locator = st.outputs[out_name(port)]
                        aid = _artifact_id(locator)
                        self._emit(
                            "ARTIFACT_CREATED",
                            {
                                "artifact_id": aid,
                                "produced_by": {
                                    "execution_id": ex.execution_id,
                                    "task_id": ta.task_id,
                                    "port": port,
                                    "study_index": ta.study_index,
                                },
                                "attempt": ta.attempt,
                                "classification": classify_artifact(ta.task_id, port, p),
                                "size_bytes": self.prov.artifacts.path(aid).stat().st_size,
                                "inputs": list(ta.inputs),
                            },
                            ex,
                        )
                        result.outputs[(ta.task_id, port, ta.study_index)] = aid
                elif st.state is State.FAILED and ta.attempt <= ex.retry_limit and not ex.cancel_requested.is_set():
                    jd = JobDescription(
                        ta.jd.executable,
                        ta.jd.arguments,
                        ta.jd.input_files,
                        ta.jd.output_files,
                        ta.jd.site_id,
                        {**ta.jd.labels, "attempt": ta.attempt + 1},
                        ta.jd.side_effect_free,
                    )
                    still.append(self._submit_jd(ex, ta.task_id, ta.study_index, ta.attempt + 1, jd, ta.inputs))
                elif st.state is State.FAILED:
                    if result.status == SUCCEEDED:
                        result.status = FAILED
                        result.failure = (ta.task_id, st.diagnostics or f"exit code {st.exit_code}")
                elif result.status == SUCCEEDED:
                    result.status = CANCELED
            pending = still
            if pending:
                if ex.cancel_requested.is_set():
                    self._cancel_active(ex)
                self.glue.advance(ex.backend)
        if ex.cancel_requested.is_set() and result.status == SUCCEEDED:
            result.status = CANCELED


def enact(
    plan: ExecutionPlan,
    p: Pipeline,
    glue: Glue,
    prov: ProvenanceStore,
    retry_limit: int = 1,
    backend: str = "local",
    catalog: Optional[Catalog] = None,
    on_event: Optional[Callable[[ProvenanceEvent], None]] = None,
) -> ExecutionResult:
    """One-shot enactment; raises EnactmentFailed or Canceled on those outcomes."""
    return Enactor(glue, prov, catalog, backend, retry_limit, on_event).enact(plan, p)


def collectable_artifacts(prov: ProvenanceStore, execution_id: str) -> list[str]:
    """TRANSITORY artifacts of a finished execution; all their consumers are done."""
    summary = prov.execution(execution_id)
    if summary["status"] == "RUNNING":
        return []
    return sorted(
        r.artifact_id
        for r in prov.artifact_records()
        if r.classification == TRANSITORY
        and isinstance(r.produced_by, Mapping)
        and r.produced_by.get("execution_id") == execution_id
    )


__all__ = [
    "CANCELED",
    "FAILED",
    "SUCCEEDED",
    "Enactor",
    "ExecutionResult",
    "TaskAttempt",
    "classify_artifact",
    "collectable_artifacts",
    "enact",
    "expand_command",
]
