"""Provenance service: append-only event log plus content-addressed artifacts.

On disk a store is a directory holding ``events.jsonl`` (one event per
line, seq-ascending) and ``artifacts/`` (one file per SHA-256 digest).
Every piece of derived state (artifact records, study sets, registered
pipelines and plans, execution summaries) is rebuilt by replaying the log,
which is also how several store objects opened on the same directory stay
consistent with each other.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
from collections import OrderedDict
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Optional, Union

from filelock import FileLock

from .catalog import StudySet
from .errors import (
    IllegalTransition,
    SourceMissing,
    StorageError,
    UnknownArtifact,
    UnknownExecution,
    UnknownPipeline,
    UnknownPlan,
    UnknownStudySet,
)
from .states import is_legal
from .util import dumps, sha256_hex

KINDS = (
    "PIPELINE_REGISTERED",
    "STUDYSET_CREATED",
    "ANONYMIZED",
    "PLAN_CREATED",
    "EXEC_STARTED",
    "TASK_TRANSITION",
    "ARTIFACT_CREATED",
    "EXEC_ENDED",
)
EXTERNAL = "EXTERNAL"
TRANSITORY = "TRANSITORY"
PERSISTENT = "PERSISTENT"
LOCATOR_PREFIX = "store://"

Clock = Callable[[int], str]


def wall_clock(seq: int) -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def logical_clock(seq: int) -> str:
    """Deterministic timestamps derived from the sequence number."""
    t = datetime(2000, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=seq)
    return t.isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class ProvenanceEvent:
    kind: str
    payload: Mapping[str, Any] = field(default_factory=dict, hash=False)
    execution_id: Optional[str] = None
    seq: int = 0
    at: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "at": self.at,
            "execution_id": self.execution_id,
            "payload": dict(self.payload),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ProvenanceEvent:
        return cls(d["kind"], d.get("payload", {}), d.get("execution_id"), d["seq"], d.get("at", ""))


@dataclass(frozen=True)
class ArtifactRecord:
    artifact_id: str
    produced_by: Union[str, Mapping[str, Any]] = field(hash=False)
    classification: str
    size_bytes: int
    inputs: tuple[str, ...] = ()
    seq: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "artifact_id": self.artifact_id,
            "produced_by": self.produced_by if isinstance(self.produced_by, str) else dict(self.produced_by),
            "classification": self.classification,
            "size_bytes": self.size_bytes,
            "inputs": list(self.inputs),
            "seq": self.seq,
        }


@dataclass(frozen=True)
class LineageGraph:
    root: str
    nodes: tuple[dict[str, Any], ...]
    edges: tuple[dict[str, str], ...]

    def node_ids(self, kind: Optional[str] = None) -> list[str]:
        return [n["id"] for n in self.nodes if kind is None or n["type"] == kind]

    def to_dict(self) -> dict[str, Any]:
        return {"root": self.root, "nodes": list(self.nodes), "edges": list(self.edges)}


def task_instance_id(execution_id: str, task_id: str, study_index: Optional[int]) -> str:
    return f"{execution_id}/{task_id}" + ("" if study_index is None else f"#{study_index}")


class ArtifactStore:
    """Directory of immutable blobs named by the SHA-256 of their bytes."""

    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def locator(artifact_id: str) -> str:
        return LOCATOR_PREFIX + artifact_id

    def path(self, artifact_id: str) -> Path:
        if not artifact_id or "/" in artifact_id or artifact_id.startswith("."):
            raise UnknownArtifact(f"malformed artifact id {artifact_id!r}")
        return self.root / artifact_id

    def exists(self, artifact_id: str) -> bool:
        try:
            return self.path(artifact_id).is_file()
        except UnknownArtifact:
            return False

    def put_bytes(self, data: bytes) -> str:
        digest = sha256_hex(data)
        target = self.path(digest)
        if not target.exists():
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, target)
            except OSError as exc:
                Path(tmp).unlink(missing_ok=True)
                raise StorageError(str(exc)) from exc
        return digest

    def put_file(self, path: str | os.PathLike[str]) -> str:
        return self.put_bytes(Path(path).read_bytes())

    def read(self, artifact_id: str) -> bytes:
        p = self.path(artifact_id)
        if not p.is_file():
            raise UnknownArtifact(f"artifact {artifact_id} is not in the store")
        return p.read_bytes()

    def resolve(self, locator: str) -> Path:
        """Map ``store://<digest>``, ``file://<path>`` or a plain path to a file."""
        if locator.startswith(LOCATOR_PREFIX):
            return self.path(locator[len(LOCATOR_PREFIX):])
        if locator.startswith("file://"):
            return Path(locator[len("file://"):])
        return Path(locator)

    def fetch(self, locator: str, dest: str | os.PathLike[str]) -> None:
        src = self.resolve(locator)
        if not src.is_file():
            raise SourceMissing(f"{locator} does not exist")
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dest)

    def store(self, path: str | os.PathLike[str], locator: Optional[str] = None) -> str:
        """Upload a file. Without an explicit destination it is content-addressed."""
        path = Path(path)
        if not path.is_file():
            raise SourceMissing(f"{path} does not exist")
        if locator is None or locator == LOCATOR_PREFIX:
            return self.locator(self.put_file(path))
        if locator.startswith(LOCATOR_PREFIX):
            digest = self.put_file(path)
            if locator != self.locator(digest):
                raise StorageError(f"{locator} does not match the content digest {digest}")
            return locator
        dest = self.resolve(locator)
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(path, dest)
        return locator

    def digests(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_file() and not p.name.startswith("."))

    def verify(self) -> list[str]:
        """Return ids whose bytes no longer hash to their name."""
        return [d for d in self.digests() if sha256_hex(self.path(d).read_bytes()) != d]


def _matches(flt: Mapping[str, Any], e: ProvenanceEvent) -> bool:
    if flt.get("execution_id") is not None and e.execution_id != flt["execution_id"]:
        return False
    if flt.get("task_id") is not None and e.payload.get("task_id") != flt["task_id"]:
        return False
    if flt.get("kind") is not None and e.kind != flt["kind"]:
        return False
    lo, hi = flt.get("seq_range") or (None, None)
    if lo is not None and e.seq < lo:
        return False
    if hi is not None and e.seq > hi:
        return False
    return True


def _canonical_filter(
    execution_id: Optional[str] = None,
    task_id: Optional[str] = None,
    kind: Optional[str] = None,
    seq_range: Optional[tuple[Optional[int], Optional[int]]] = None,
) -> dict[str, Any]:
    flt: dict[str, Any] = {}
    if execution_id is not None:
        flt["execution_id"] = execution_id
    if task_id is not None:
        flt["task_id"] = task_id
    if kind is not None:
        flt["kind"] = kind
    if seq_range is not None and seq_range != (None, None):
        flt["seq_range"] = [seq_range[0], seq_range[1]]
    return flt


class ProvenanceStore:
    """Append-only provenance log with a bounded read cache.

    ``record`` is serialized through a file lock, so any number of store
    objects (threads, processes, gateway replicas) can share one directory.
    Reads first catch up with lines appended by other writers.
    """

    def __init__(
        self,
        root: str | os.PathLike[str],
        clock: Clock = wall_clock,
        cache_size: int = 256,
        durable: bool = True,
    ) -> None:
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot open store at {self.root}: {exc}") from exc
        self.events_path = self.root / "events.jsonl"
        self.artifacts = ArtifactStore(self.root / "artifacts")
        self.clock = clock
        self.durable = durable
        self.cache_size = cache_size
        self.cache_hits = 0
        self.cache_misses = 0
        self._cache: OrderedDict[str, tuple[dict[str, Any], list[ProvenanceEvent]]] = OrderedDict()
        self._lock = threading.RLock()
        self._file_lock = FileLock(str(self.root / "events.lock"))
        self._reset()
        self.sync()

    # -- state ----------------------------------------------------------------

    def _reset(self) -> None:
        self._offset = 0
        self._events: list[ProvenanceEvent] = []
        self._artifacts: dict[str, ArtifactRecord] = {}
        self._productions: dict[str, list[int]] = {}
        self._attempt_state: dict[tuple[Any, ...], str] = {}
        self._instance_seq: dict[str, int] = {}
        self._study_sets: dict[str, StudySet] = {}
        self._pipelines: dict[str, dict[str, Any]] = {}
        self._plans: dict[str, dict[str, Any]] = {}
        self._executions: dict[str, dict[str, Any]] = {}

    def sync(self) -> None:
        """Apply events appended to the log since the last sync."""
        with self._lock:
            if not self.events_path.exists():
                return
            try:
                with open(self.events_path, "rb") as fh:
                    fh.seek(self._offset)
                    for line in fh:
                        if not line.endswith(b"\n"):
                            break
                        self._offset += len(line)
                        if line.strip():
                            self._apply(ProvenanceEvent.from_dict(json.loads(line)))
            except OSError as exc:
                raise StorageError(f"cannot read {self.events_path}: {exc}") from exc

    def _apply(self, e: ProvenanceEvent) -> None:
        self._events.append(e)
        p = e.payload
        if e.kind == "ARTIFACT_CREATED":
            aid = p["artifact_id"]
            self._productions.setdefault(aid, []).append(e.seq)
            if aid not in self._artifacts:
                self._artifacts[aid] = ArtifactRecord(
                    aid, p["produced_by"], p["classification"], p["size_bytes"], tuple(p.get("inputs", ())), e.seq
                )
        elif e.kind == "TASK_TRANSITION":
            self._attempt_state[self._attempt_key(e)] = p["to_state"]
            inst = task_instance_id(e.execution_id or "", p["task_id"], p.get("study_index"))
            self._instance_seq.setdefault(inst, e.seq)
        elif e.kind == "STUDYSET_CREATED":
            d = dict(p)
            d["created_at"] = e.at
            self._study_sets.setdefault(d["set_id"], StudySet.from_dict(d))
        elif e.kind == "PIPELINE_REGISTERED":
            self._pipelines[p["pipeline_id"]] = dict(p["document"])
        elif e.kind == "PLAN_CREATED":
            self._plans.setdefault(p["plan"]["plan_id"], {"plan": p["plan"], "grid": p.get("grid")})
        elif e.kind == "EXEC_STARTED":
            self._executions[e.execution_id] = {  # type: ignore[index]
                "execution_id": e.execution_id,
                "plan_id": p.get("plan_id"),
                "pipeline_id": p.get("pipeline_id"),
                "backend": p.get("backend"),
                "status": "RUNNING",
                "result": None,
            }
        elif e.kind == "EXEC_ENDED":
            summary = self._executions.get(e.execution_id)  # type: ignore[arg-type]
            if summary is not None:
                summary["status"] = p["status"]
                summary["result"] = p.get("result")
        if self._cache:
            for key in [k for k, (flt, _) in self._cache.items() if _matches(flt, e)]:
                del self._cache[key]

    @staticmethod
    def _attempt_key(e: ProvenanceEvent) -> tuple[Any, ...]:
        p = e.payload
        return (e.execution_id, p["task_id"], p.get("study_index"), p.get("attempt"))

    def _check(self, e: ProvenanceEvent) -> None:
        if e.kind not in KINDS:
            raise StorageError(f"unknown event kind {e.kind!r}")
        if e.kind == "TASK_TRANSITION":
            p = e.payload
            for key in ("task_id", "attempt", "to_state"):
                if key not in p:
                    raise StorageError(f"TASK_TRANSITION payload lacks {key!r}")
            src, dst = p.get("from_state"), p["to_state"]
            if not is_legal(src, dst):
                raise IllegalTransition(f"{src} -> {dst} is not a legal job transition")
            current = self._attempt_state.get(self._attempt_key(e))
            if current != src:
                raise IllegalTransition(f"attempt is in state {current}, cannot record {src} -> {dst}")
        elif e.kind == "ARTIFACT_CREATED":
            aid = e.payload.get("artifact_id")
            if not isinstance(aid, str) or not self.artifacts.exists(aid):
                raise StorageError(f"artifact {aid!r} must be stored before it is recorded")

    # -- writing --------------------------------------------------------------

    def append(
        self,
        kind: str,
        payload: Mapping[str, Any] | Callable[[int], Mapping[str, Any]],
        execution_id: Optional[str] | Callable[[int], str] = None,
    ) -> ProvenanceEvent:
        """Append one event and return it with its assigned seq and time.

        ``payload`` and ``execution_id`` may be callables receiving the seq,
        for records whose identifiers derive from their own position.
        """
        with self._lock, self._file_lock:
            self.sync()
            seq = self._events[-1].seq + 1 if self._events else 1
            body = payload(seq) if callable(payload) else payload
            exec_id = execution_id(seq) if callable(execution_id) else execution_id
            event = ProvenanceEvent(kind, dict(body), exec_id, seq, self.clock(seq))
            self._check(event)
            line = (dumps(event.to_dict()) + "\n").encode("utf-8")
            try:
                with open(self.events_path, "ab") as fh:
                    fh.write(line)
                    fh.flush()
                    if self.durable:
                        os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageError(f"cannot append to {self.events_path}: {exc}") from exc
            self._offset += len(line)
            self._apply(event)
            return event

    def record(self, e: ProvenanceEvent) -> int:
        """Append ``e`` (its seq and time are assigned here) and return the seq."""
        return self.append(e.kind, e.payload, e.execution_id).seq

    def register_study_set(self, s: StudySet) -> StudySet:
        with self._lock:
            self.sync()
            if s.set_id in self._study_sets:
                return self._study_sets[s.set_id]
            payload = s.to_dict()
            del payload["created_at"]
            self.append("STUDYSET_CREATED", payload)
            return self._study_sets[s.set_id]

    def register_pipeline(self, pipeline_id: str, document: Mapping[str, Any]) -> None:
        with self._lock:
            self.sync()
            if dumps(self._pipelines.get(pipeline_id)) != dumps(document):
                self.append("PIPELINE_REGISTERED", {"pipeline_id": pipeline_id, "document": document})

    def register_plan(self, plan: Mapping[str, Any], grid: Optional[Mapping[str, Any]] = None) -> None:
        with self._lock:
            self.sync()
            if plan["plan_id"] not in self._plans:
                self.append("PLAN_CREATED", {"plan": plan, "grid": grid})

    def start_execution(self, payload: Mapping[str, Any]) -> str:
        return self.append("EXEC_STARTED", payload, execution_id=lambda seq: f"exec-{seq}").execution_id  # type: ignore[return-value]

    def import_artifact(self, data: bytes) -> str:
        """Store bytes from outside any execution and record them as EXTERNAL."""
        aid = self.artifacts.put_bytes(data)
        self.ensure_external(aid)
        return aid

    def ensure_external(self, artifact_id: str) -> None:
        with self._lock:
            self.sync()
            if artifact_id in self._artifacts:
                return
            if not self.artifacts.exists(artifact_id):
                raise UnknownArtifact(f"artifact {artifact_id} is not in the store")
            size = self.artifacts.path(artifact_id).stat().st_size
            self.append(
                "ARTIFACT_CREATED",
                {
                    "artifact_id": artifact_id,
                    "produced_by": EXTERNAL,
                    "classification": PERSISTENT,
                    "size_bytes": size,
                    "inputs": [],
                },
            )

    # -- reading --------------------------------------------------------------

    def events(self) -> list[ProvenanceEvent]:
        self.sync()
        return list(self._events)

    def query_events(
        self,
        execution_id: Optional[str] = None,
        task_id: Optional[str] = None,
        kind: Optional[str] = None,
        seq_range: Optional[tuple[Optional[int], Optional[int]]] = None,
    ) -> list[ProvenanceEvent]:
        flt = _canonical_filter(execution_id, task_id, kind, seq_range)
        with self._lock:
            self.sync()
            return [e for e in self._events if _matches(flt, e)]

    def cached_query(
        self,
        execution_id: Optional[str] = None,
        task_id: Optional[str] = None,
        kind: Optional[str] = None,
        seq_range: Optional[tuple[Optional[int], Optional[int]]] = None,
    ) -> list[ProvenanceEvent]:
        flt = _canonical_filter(execution_id, task_id, kind, seq_range)
        key = dumps(flt)
        with self._lock:
            self.sync()  # invalidates entries hit by other writers' events
            hit = self._cache.get(key)
            if hit is not None:
                self.cache_hits += 1
                self._cache.move_to_end(key)
                return list(hit[1])
            self.cache_misses += 1
            result = [e for e in self._events if _matches(flt, e)]
            self._cache[key] = (flt, result)
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
            return list(result)

    def artifact(self, artifact_id: str) -> ArtifactRecord:
        self.sync()
        try:
            return self._artifacts[artifact_id]
        except KeyError:
            raise UnknownArtifact(f"no provenance record for artifact {artifact_id}") from None

    def artifact_records(self) -> list[ArtifactRecord]:
        self.sync()
        return sorted(self._artifacts.values(), key=lambda r: r.seq)

    def study_set(self, set_id: str) -> StudySet:
        self.sync()
        try:
            return self._study_sets[set_id]
        except KeyError:
            raise UnknownStudySet(f"unknown study set {set_id!r}") from None

    def pipeline_document(self, pipeline_id: str) -> dict[str, Any]:
        self.sync()
        try:
            return self._pipelines[pipeline_id]
        except KeyError:
            raise UnknownPipeline(f"pipeline {pipeline_id!r} is not registered") from None

    def plan_record(self, plan_id: str) -> dict[str, Any]:
        self.sync()
        try:
            return self._plans[plan_id]
        except KeyError:
            raise UnknownPlan(f"plan {plan_id!r} is not registered") from None

    def execution(self, execution_id: str) -> dict[str, Any]:
        self.sync()
        try:
            return dict(self._executions[execution_id])
        except KeyError:
            raise UnknownExecution(f"unknown execution {execution_id!r}") from None

    def execution_ids(self) -> list[str]:
        self.sync()
        return list(self._executions)

    def lineage(self, artifact_id: str) -> LineageGraph:
        """Walk produced-by / consumed-by links back to EXTERNAL inputs."""
        with self._lock:
            self.sync()
            if artifact_id not in self._artifacts:
                raise UnknownArtifact(f"no provenance record for artifact {artifact_id}")
            nodes: dict[str, dict[str, Any]] = {}
            edges: list[dict[str, str]] = []
            todo = [artifact_id]
            while todo:
                aid = todo.pop()
                if aid in nodes:
                    continue
                rec = self._artifacts.get(aid)
                nodes[aid] = {"id": aid, "type": "artifact", "seq": rec.seq if rec else 0}
                if rec is None or rec.produced_by == EXTERNAL:
                    continue
                pb = rec.produced_by
                inst = task_instance_id(pb["execution_id"], pb["task_id"], pb.get("study_index"))  # type: ignore[index]
                edges.append({"from": inst, "to": aid, "relation": "produced", "port": pb["port"]})  # type: ignore[index]
                if inst not in nodes:
                    nodes[inst] = {
                        "id": inst,
                        "type": "task",
                        "seq": self._instance_seq.get(inst, rec.seq),
                        "execution_id": pb["execution_id"],  # type: ignore[index]
                        "task_id": pb["task_id"],  # type: ignore[index]
                        "study_index": pb.get("study_index"),  # type: ignore[union-attr]
                    }
                    for src in rec.inputs:
                        edges.append({"from": src, "to": inst, "relation": "consumed"})
                        todo.append(src)
            ordered = sorted(nodes.values(), key=lambda n: (n["seq"], n["id"]))
            uniq = {dumps(e): e for e in edges}
            return LineageGraph(artifact_id, tuple(ordered), tuple(sorted(uniq.values(), key=dumps)))

    def snapshot(self) -> dict[str, Any]:
        """Full derived state, used to check that replay is lossless."""
        with self._lock:
            self.sync()
            return {
                "events": [e.to_dict() for e in self._events],
                "artifacts": {k: v.to_dict() for k, v in sorted(self._artifacts.items())},
                "productions": {k: list(v) for k, v in sorted(self._productions.items())},
                "attempt_states": sorted(([list(k), v] for k, v in self._attempt_state.items()), key=dumps),
                "study_sets": {k: v.to_dict() for k, v in sorted(self._study_sets.items())},
                "pipelines": dict(sorted(self._pipelines.items())),
                "plans": dict(sorted(self._plans.items())),
                "executions": dict(sorted(self._executions.items())),
            }


def replay(root: str | os.PathLike[str]) -> ProvenanceStore:
    """Rebuild a store from its log alone."""
    return ProvenanceStore(root)


def iter_log(path: str | os.PathLike[str]) -> Iterable[ProvenanceEvent]:
    with open(path, "rb") as fh:
        for line in fh:
            if line.strip():
                yield ProvenanceEvent.from_dict(json.loads(line))
