"""Simulated grid backend driven by a manually advanced virtual clock.

Each site runs at most ``slots`` jobs at once; further jobs wait in a FIFO
queue per site. A job admitted at tick ``t`` finishes at ``t + runtime``
where the runtime is configured per actor. Outputs are placeholder files
whose content is derived from the job's identity and input digests, so
identical submissions always produce identical artifacts.
"""

from __future__ import annotations

import threading
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..errors import InvalidJobDescription, MedpipeError, UnknownHandle
from ..planner import GridView
from ..provenance import LOCATOR_PREFIX, ArtifactStore
from ..util import sha256_hex
from . import AdaptorContract, JobDescription, JobState, State


@dataclass
class _SimJob:
    job_id: str
    jd: JobDescription
    site: str
    runtime: int
    fail: bool
    history: list[State] = field(default_factory=lambda: [State.PENDING])
    end: Optional[int] = None
    exit_code: Optional[int] = None
    diagnostics: str = ""
    outputs: dict[str, str] = field(default_factory=dict)

    @property
    def state(self) -> State:
        return self.history[-1]


class SimGridAdaptor(AdaptorContract):
    def __init__(
        self,
        grid: GridView,
        artifacts: ArtifactStore,
        actor_runtimes: Optional[Mapping[str, int]] = None,
        fault_plan: Iterable[tuple[str, int]] = (),
        default_runtime: int = 1,
    ) -> None:
        self.grid = grid
        self.artifacts = artifacts
        self.actor_runtimes = dict(actor_runtimes or {})
        self.default_runtime = default_runtime
        self.fault_plan = {(str(t), int(a)) for t, a in fault_plan}
        self.clock = 0
        self.peak_running: dict[str, int] = {s.site_id: 0 for s in grid.sites}
        self._slots = {s.site_id: s.slots for s in grid.sites}
        self._queues: dict[str, deque[str]] = {s.site_id: deque() for s in grid.sites}
        self._running: dict[str, set[str]] = {s.site_id: set() for s in grid.sites}
        self._jobs: dict[str, _SimJob] = {}
        self._counter = 0
        self._lock = threading.RLock()

    def _runtime(self, jd: JobDescription) -> int:
        rt = int(self.actor_runtimes.get(str(jd.labels.get("actor", "")), self.default_runtime))
        return max(1, rt)

    def submit(self, jd: JobDescription) -> str:
        if jd.site_id not in self._slots:
            raise InvalidJobDescription(f"site {jd.site_id!r} is not part of the simulated grid")
        key = (str(jd.labels.get("task_id", "")), int(jd.labels.get("attempt", 1)))
        with self._lock:
            self._counter += 1
            job_id = f"sim-{self._counter}"
            self._jobs[job_id] = _SimJob(job_id, jd, jd.site_id, self._runtime(jd), key in self.fault_plan)
            self._queues[jd.site_id].append(job_id)
            self._admit()
        return job_id

    def tick(self, n: int = 1) -> int:
        """Advance the virtual clock by ``n`` ticks; returns the new time."""
        with self._lock:
            for _ in range(n):
                self.clock += 1
                self._complete()
                self._admit()
            return self.clock

    def advance(self) -> None:
        self.tick(1)

    def running_at(self, site_id: str) -> int:
        with self._lock:
            return len(self._running[site_id])

    def _admit(self) -> None:
        for site in sorted(self._queues):
            queue, running = self._queues[site], self._running[site]
            while queue and len(running) < self._slots[site]:
                job = self._jobs[queue.popleft()]
                if job.state.terminal:
                    continue
                job.history.append(State.STAGING)
                missing = [loc for loc, _ in job.jd.input_files if not self._exists(loc)]
                job.history.append(State.RUNNING)
                if missing:
                    job.history.append(State.FAILED)
                    job.exit_code = -1
                    job.diagnostics = f"stage-in failed: missing {', '.join(missing)}"
                    continue
                job.end = self.clock + job.runtime
                running.add(job.job_id)
            self.peak_running[site] = max(self.peak_running[site], len(running))

    def _complete(self) -> None:
        for site, running in self._running.items():
            for job_id in sorted(running):
                job = self._jobs[job_id]
                if job.end is not None and job.end <= self.clock:
                    running.discard(job_id)
                    if job.fail:
                        job.history.append(State.FAILED)
                        job.exit_code = 1
                        job.diagnostics = "injected fault"
                    else:
                        job.outputs = {name: self._synthesize(job, name) for name in job.jd.output_files}
                        job.history.append(State.DONE)
                        job.exit_code = 0

    def _exists(self, locator: str) -> bool:
        try:
            return self.artifacts.resolve(locator).is_file()
        except (OSError, ValueError, MedpipeError):
            return False

    def _digest(self, locator: str) -> str:
        if locator.startswith(LOCATOR_PREFIX):
            return locator[len(LOCATOR_PREFIX):]
        return sha256_hex(self.artifacts.resolve(locator).read_bytes())

    def _synthesize(self, job: _SimJob, name: str) -> str:
        labels = job.jd.labels
        lines = [
            "simulated output",
            f"task={labels.get('task_id')} output={name} study_index={labels.get('study_index')}",
        ]
        lines += [f"input {n}={self._digest(loc)}" for loc, n in job.jd.input_files]
        return self.artifacts.locator(self.artifacts.put_bytes(("\n".join(lines) + "\n").encode()))

    def poll(self, job_id: str) -> JobState:
        with self._lock:
            try:
                job = self._jobs[job_id]
            except KeyError:
                raise UnknownHandle(f"simulated job {job_id!r} unknown") from None
            return JobState(job.state, job.exit_code, job.diagnostics, tuple(job.history), dict(job.outputs))

    def cancel(self, job_id: str) -> None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise UnknownHandle(f"simulated job {job_id!r} unknown")
            if job.state.terminal:
                return
            job.history.append(State.CANCELED)
            job.diagnostics = "canceled by request"
            self._running[job.site].discard(job_id)
            self._admit()

    def stage_in(self, locator: str, dest: Union[str, Path]) -> None:
        self.artifacts.fetch(locator, dest)

    def stage_out(self, path: Union[str, Path], locator: Optional[str] = None) -> str:
        return self.artifacts.store(path, locator)
