"""Reference backend: jobs are OS subprocesses in per-job working directories."""

from __future__ import annotations

import shutil
import subprocess
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..errors import SourceMissing, UnknownHandle
from ..provenance import ArtifactStore
from . import AdaptorContract, JobDescription, JobState, State


@dataclass
class _Job:
    jd: JobDescription
    history: list[State] = field(default_factory=lambda: [State.PENDING])
    exit_code: Optional[int] = None
    diagnostics: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    proc: Optional[subprocess.Popen] = None

    @property
    def state(self) -> State:
        return self.history[-1]


class LocalAdaptor(AdaptorContract):
    def __init__(
        self,
        artifacts: ArtifactStore,
        max_concurrent: int = 4,
        work_root: Union[str, Path, None] = None,
        keep_workdirs: bool = False,
    ) -> None:
        self.artifacts = artifacts
        self.keep_workdirs = keep_workdirs
        self.work_root = Path(work_root) if work_root else Path(tempfile.mkdtemp(prefix="medpipe-local-"))
        self.work_root.mkdir(parents=True, exist_ok=True)
        self._pool = ThreadPoolExecutor(max_workers=max(1, max_concurrent), thread_name_prefix="medpipe-local")
        self._jobs: dict[str, _Job] = {}
        self._lock = threading.RLock()

    def _job(self, job_id: str) -> _Job:
        try:
            return self._jobs[job_id]
        except KeyError:
            raise UnknownHandle(f"local job {job_id!r} unknown") from None

    def _move(self, job: _Job, dst: State, **kw: object) -> bool:
        # caller holds the lock; refuses to leave a terminal state
        if job.state.terminal:
            return False
        job.history.append(dst)
        for k, v in kw.items():
            setattr(job, k, v)
        return True

    def submit(self, jd: JobDescription) -> str:
        job_id = uuid.uuid4().hex
        with self._lock:
            self._jobs[job_id] = _Job(jd)
        self._pool.submit(self._run, job_id)
        return job_id

    def _run(self, job_id: str) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if not self._move(job, State.STAGING):
                return
        wd = self.work_root / job_id
        try:
            wd.mkdir(parents=True)
            staged_ok, diag = True, ""
            try:
                for locator, name in job.jd.input_files:
                    self.stage_in(locator, wd / name)
            except (SourceMissing, OSError) as exc:
                staged_ok, diag = False, f"stage-in failed: {exc}"
            with self._lock:
                if not self._move(job, State.RUNNING):
                    return
                if not staged_ok:
                    self._move(job, State.FAILED, exit_code=-1, diagnostics=diag)
                    return
                try:
                    job.proc = subprocess.Popen(
                        [job.jd.executable, *job.jd.arguments],
                        cwd=wd,
                        stdin=subprocess.DEVNULL,
                        stdout=subprocess.PIPE,
                        stderr=subprocess.PIPE,
                    )
                except OSError as exc:
                    self._move(job, State.FAILED, exit_code=-1, diagnostics=f"cannot start: {exc}")
                    return
            _, err = job.proc.communicate()
            code = job.proc.returncode
            outputs: dict[str, str] = {}
            diag = err.decode("utf-8", "replace")[-2000:]
            if code == 0:
                try:
                    for name in job.jd.output_files:
                        outputs[name] = self.stage_out(wd / name)
                except SourceMissing as exc:
                    code, diag = -1, f"declared output missing: {exc}"
            with self._lock:
                if code == 0:
                    self._move(job, State.DONE, exit_code=0, outputs=outputs, diagnostics=diag)
                else:
                    self._move(job, State.FAILED, exit_code=code, diagnostics=diag)
        finally:
            if not self.keep_workdirs:
                shutil.rmtree(wd, ignore_errors=True)

    def poll(self, job_id: str) -> JobState:
        with self._lock:
            job = self._job(job_id)
            return JobState(job.state, job.exit_code, job.diagnostics, tuple(job.history), dict(job.outputs))

    def cancel(self, job_id: str) -> None:
        with self._lock:
            job = self._job(job_id)
            if self._move(job, State.CANCELED, diagnostics="canceled by request") and job.proc is not None:
                job.proc.kill()

    def stage_in(self, locator: str, dest: Union[str, Path]) -> None:
        self.artifacts.fetch(locator, dest)

    def stage_out(self, path: Union[str, Path], locator: Optional[str] = None) -> str:
        return self.artifacts.store(path, locator)

    def close(self) -> None:
        self._pool.shutdown(wait=True, cancel_futures=True)
