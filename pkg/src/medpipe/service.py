"""Request-level operations shared by the HTTP gateway and the CLI.

Every method takes plain JSON-ready arguments and returns a JSON-ready
body, so both fronts serialize exactly the same thing. No state lives
here beyond handles on the shared stores.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .anonymize import AnonymizationPolicy, anonymize_study
from .catalog import Catalog, ImageRecord, check_homogeneity, evaluate_query
from .enactor import Enactor, ExecutionResult
from .errors import Canceled, EnactmentFailed, InvalidPipeline, MedpipeError, UnknownBackend
from .glue import Glue
from .glue.local import LocalAdaptor
from .glue.simgrid import SimGridAdaptor
from .pipeline import parse_pipeline, serialize_pipeline, validate
from .planner import ExecutionPlan, GridView, plan
from .provenance import ProvenanceEvent, ProvenanceStore, logical_clock, wall_clock

log = logging.getLogger(__name__)


@dataclass
class Settings:
    """Deployment settings: where the shared stores live and which backends exist."""

    store_dir: Path
    catalog_path: Path
    token: Optional[str] = None
    bind_address: str = "127.0.0.1:8080"
    default_backend: str = "local"
    backends: dict[str, dict[str, Any]] = field(default_factory=lambda: {"local": {}, "simgrid": {}})
    grid_view_file: Optional[Path] = None
    clock: str = "wall"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: Optional[Path] = None) -> Settings:
        base = base or Path.cwd()

        def path(key: str, default: Optional[str] = None) -> Optional[Path]:
            v = d.get(key, default)
            return None if v is None else (base / v)

        backend_cfg = dict(d.get("backends") or {"local": {}, "simgrid": {}})
        grid_file = path("grid_view_file") or (
            base / backend_cfg["simgrid"]["grid_view_file"]
            if "grid_view_file" in (backend_cfg.get("simgrid") or {})
            else None
        )
        settings = cls(
            store_dir=path("store_dir", "store"),  # type: ignore[arg-type]
            catalog_path=path("catalog_path", "catalog.jsonl"),  # type: ignore[arg-type]
            token=d.get("token"),
            bind_address=d.get("bind_address", "127.0.0.1:8080"),
            default_backend=d.get("default_backend", "local"),
            backends=backend_cfg,
            grid_view_file=grid_file,
            clock=d.get("clock", "wall"),
        )
        return settings.with_env()

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> Settings:
        p = Path(path)
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")), p.parent)

    @classmethod
    def at_home(cls, home: str | os.PathLike[str]) -> Settings:
        home = Path(home)
        cfg = home / "config.json"
        if cfg.exists():
            return cls.load(cfg)
        return cls(store_dir=home / "store", catalog_path=home / "catalog.jsonl").with_env()

    def with_env(self) -> Settings:
        self.bind_address = os.environ.get("PIPELINE_BIND_ADDRESS", self.bind_address)
        self.token = os.environ.get("PIPELINE_TOKEN", self.token)
        return self


def error_body(exc: MedpipeError) -> dict[str, Any]:
    return {"code": exc.code, "message": exc.message, "detail": exc.detail}


def event_dict(e: ProvenanceEvent) -> dict[str, Any]:
    return e.to_dict()


class Services:
    def __init__(self, settings: Settings, store: Optional[ProvenanceStore] = None) -> None:
        self.settings = settings
        clock = logical_clock if settings.clock == "logical" else wall_clock
        self.store = store or ProvenanceStore(settings.store_dir, clock=clock)
        self.catalog = Catalog(path=settings.catalog_path)
        self._threads: list[threading.Thread] = []

    # -- catalog ------------------------------------------------------------

    def add_images(self, rows: list[Mapping[str, Any]], base: Optional[Path] = None) -> dict[str, Any]:
        """Import catalog rows; a ``payload`` (text) or ``payload_file`` becomes an EXTERNAL artifact."""
        records = []
        for row in rows:
            row = dict(row)
            if "payload" in row:
                aid = self.store.import_artifact(str(row.pop("payload")).encode("utf-8"))
                row["payload_ref"] = self.store.artifacts.locator(aid)
            elif "payload_file" in row:
                f = Path(row.pop("payload_file"))
                aid = self.store.import_artifact(((base or Path.cwd()) / f).read_bytes())
                row["payload_ref"] = self.store.artifacts.locator(aid)
            records.append(ImageRecord.from_dict(row))
        self.catalog.add(records)
        return {"added": [r.image_id for r in records]}

    # -- pipelines ----------------------------------------------------------

    def register_pipeline(self, document: Any) -> dict[str, Any]:
        text = document if isinstance(document, (str, bytes)) else json.dumps(document)
        p = parse_pipeline(text)
        report = validate(p)
        if not report.ok:
            raise InvalidPipeline("pipeline failed validation", report.to_dict())
        self.store.register_pipeline(p.id, serialize_pipeline(p))
        return {"pipeline_id": p.id, "report": report.to_dict()}

    # -- study sets ---------------------------------------------------------

    def query_study(self, predicate: str, owner: str = "anonymous") -> dict[str, Any]:
        self.catalog.refresh()
        s = evaluate_query(predicate, self.catalog, owner=owner, created_at="")
        return self.store.register_study_set(s).to_dict()

    def homogeneity(self, set_id: str, fields: list[str]) -> dict[str, Any]:
        self.catalog.refresh()
        return check_homogeneity(self.store.study_set(set_id), fields, self.catalog).to_dict()

    def anonymize(self, set_id: str, policy: Mapping[str, Any], owner: Optional[str] = None) -> dict[str, Any]:
        self.catalog.refresh()
        pol = AnonymizationPolicy.from_dict(policy)
        new_set, pmap = anonymize_study(self.store.study_set(set_id), pol, self.catalog, self.store, owner)
        return {"study_set": new_set.to_dict(), "pseudonyms": pmap.to_list()}

    # -- planning -----------------------------------------------------------

    def default_grid(self) -> Optional[dict[str, Any]]:
        if self.settings.grid_view_file is None:
            return None
        return json.loads(Path(self.settings.grid_view_file).read_text(encoding="utf-8"))

    def make_plan(
        self, pipeline_id: str, study_set_id: Optional[str] = None, grid: Optional[Mapping[str, Any]] = None
    ) -> dict[str, Any]:
        p = parse_pipeline(json.dumps(self.store.pipeline_document(pipeline_id)))
        s = self.store.study_set(study_set_id) if study_set_id else None
        grid_doc = dict(grid) if grid is not None else self.default_grid()
        if grid_doc is None:
            raise InvalidPipeline("no grid view given and none configured")
        gv = GridView.from_dict(grid_doc)
        ep = plan(p, s, gv)
        self.store.register_plan(ep.to_dict(), gv.to_dict())
        return ep.to_dict()

    # -- execution ----------------------------------------------------------

    def build_glue(self, grid: Optional[Mapping[str, Any]]) -> Glue:
        """Register the configured adaptors on a fresh glue instance."""
        glue = Glue()
        cfg = self.settings.backends
        if "local" in cfg:
            local = cfg["local"] or {}
            glue.register_adaptor("local", LocalAdaptor(self.store.artifacts, int(local.get("max_concurrent", 4))))
        if "simgrid" in cfg:
            sim = cfg["simgrid"] or {}
            grid_doc = self.default_grid() or grid or {"sites": []}
            faults = [(f["task"], int(f["attempt"])) for f in sim.get("fault_plan", [])]
            glue.register_adaptor(
                "simgrid",
                SimGridAdaptor(GridView.from_dict(grid_doc), self.store.artifacts, sim.get("actor_runtimes"), faults),
            )
        return glue

    def start_execution(
        self,
        plan_id: str,
        backend: Optional[str] = None,
        retry_limit: int = 1,
        on_event: Optional[Callable[[ProvenanceEvent], None]] = None,
    ) -> tuple[str, Callable[[], Optional[ExecutionResult]]]:
        """Record EXEC_STARTED and return (execution id, runner)."""
        record = self.store.plan_record(plan_id)
        ep = ExecutionPlan.from_dict(record["plan"])
        p = parse_pipeline(json.dumps(self.store.pipeline_document(ep.pipeline_id)))
        backend = backend or self.settings.default_backend
        glue = self.build_glue(record.get("grid"))
        if backend not in glue.backends():
            glue.close()
            raise UnknownBackend(f"backend {backend!r} is not configured")
        self.catalog.refresh()
        enactor = Enactor(glue, self.store, self.catalog, backend, retry_limit, on_event)
        exec_id = enactor.start(ep, p)

        def runner() -> Optional[ExecutionResult]:
            try:
                return enactor.run(exec_id)
            except (EnactmentFailed, Canceled) as exc:
                return exc.result  # type: ignore[return-value]
            finally:
                glue.close()

        return exec_id, runner

    def submit_execution(self, plan_id: str, backend: Optional[str] = None, retry_limit: int = 1) -> dict[str, Any]:
        exec_id, runner = self.start_execution(plan_id, backend, retry_limit)

        def guarded() -> None:
            try:
                runner()
            except Exception:  # noqa: BLE001
                log.exception("execution %s crashed", exec_id)

        t = threading.Thread(target=guarded, name=f"enact-{exec_id}", daemon=True)
        self._threads.append(t)
        t.start()
        return {"execution_id": exec_id, "status": "RUNNING"}

    def execution_status(self, execution_id: str) -> dict[str, Any]:
        return self.store.execution(execution_id)

    def wait(self, timeout: Optional[float] = None) -> None:
        for t in list(self._threads):
            t.join(timeout)

    # -- provenance ---------------------------------------------------------

    def events(
        self,
        execution_id: Optional[str] = None,
        task_id: Optional[str] = None,
        kind: Optional[str] = None,
        seq_from: Optional[int] = None,
        seq_to: Optional[int] = None,
    ) -> dict[str, Any]:
        evs = self.store.cached_query(execution_id, task_id, kind, (seq_from, seq_to))
        return {"events": [event_dict(e) for e in evs]}

    def lineage(self, artifact_id: str) -> dict[str, Any]:
        return self.store.lineage(artifact_id).to_dict()

    def artifact_bytes(self, artifact_id: str) -> bytes:
        return self.store.artifacts.read(artifact_id)
