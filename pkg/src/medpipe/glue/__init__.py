"""Middleware abstraction: a small job + file API over pluggable adaptors.

Upper layers only ever see :class:`JobDescription`, :class:`JobHandle` and
:class:`JobState`. Backend adaptors implement :class:`AdaptorContract` and
are registered by name on a :class:`Glue` instance at startup.
"""

from __future__ import annotations

import abc
import tempfile
import threading
import time
import uuid
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath
from typing import Any, Optional, Union

from ..errors import DuplicateBackend, InvalidJobDescription, UnknownBackend, UnknownHandle
from ..states import State

__all__ = [
    "AdaptorContract",
    "Glue",
    "JobDescription",
    "JobHandle",
    "JobState",
    "State",
]


@dataclass(frozen=True)
class JobDescription:
    executable: str
    arguments: tuple[str, ...] = ()
    input_files: tuple[tuple[str, str], ...] = ()  # (artifact locator, working-dir name)
    output_files: tuple[str, ...] = ()
    site_id: str = ""
    labels: Mapping[str, Any] = field(default_factory=dict, hash=False)
    side_effect_free: bool = False

    def check(self) -> None:
        if not self.executable:
            raise InvalidJobDescription("executable is empty")
        if not self.output_files and not self.side_effect_free:
            raise InvalidJobDescription("declare output files or mark the job side-effect-free")
        names = [n for _, n in self.input_files] + list(self.output_files)
        if len(names) != len(set(names)):
            raise InvalidJobDescription("staged file names must be unique")
        for n in names:
            pp = PurePosixPath(n)
            if not n or pp.is_absolute() or ".." in pp.parts:
                raise InvalidJobDescription(f"staged name {n!r} must be relative to the working directory")


@dataclass(frozen=True)
class JobHandle:
    handle_id: str
    backend: str
    submitted_at: str


@dataclass(frozen=True)
class JobState:
    state: State
    exit_code: Optional[int] = None
    diagnostics: str = ""
    history: tuple[State, ...] = ()
    outputs: Mapping[str, str] = field(default_factory=dict, hash=False)

    @property
    def terminal(self) -> bool:
        return self.state.terminal


class AdaptorContract(abc.ABC):
    """What every backend must provide.

    ``poll`` never blocks and keeps returning the same terminal state once
    one is reached. ``advance`` lets a waiting caller hand the backend a
    chance to make progress; real backends just sleep briefly.
    """

    @abc.abstractmethod
    def submit(self, jd: JobDescription) -> str: ...

    @abc.abstractmethod
    def poll(self, job_id: str) -> JobState: ...

    @abc.abstractmethod
    def cancel(self, job_id: str) -> None: ...

    @abc.abstractmethod
    def stage_in(self, locator: str, dest: Union[str, Path]) -> None: ...

    @abc.abstractmethod
    def stage_out(self, path: Union[str, Path], locator: Optional[str] = None) -> str: ...

    def advance(self) -> None:
        time.sleep(0.005)

    def close(self) -> None:
        pass


class Glue:
    """Backend registry and dispatcher. Safe to share between threads."""

    def __init__(self) -> None:
        self._adaptors: dict[str, AdaptorContract] = {}
        self._handles: dict[str, tuple[str, str]] = {}
        self._last: dict[str, JobState] = {}
        self._lock = threading.RLock()

    def register_adaptor(self, name: str, adaptor: AdaptorContract) -> None:
        with self._lock:
            if name in self._adaptors:
                raise DuplicateBackend(f"backend {name!r} is already registered")
            self._adaptors[name] = adaptor

    def backends(self) -> list[str]:
        with self._lock:
            return sorted(self._adaptors)

    def _adaptor(self, backend: str) -> AdaptorContract:
        try:
            return self._adaptors[backend]
        except KeyError:
            raise UnknownBackend(f"no adaptor registered for backend {backend!r}") from None

    def _resolve(self, h: Union[JobHandle, str]) -> tuple[str, AdaptorContract, str]:
        hid = h.handle_id if isinstance(h, JobHandle) else h
        with self._lock:
            try:
                backend, job_id = self._handles[hid]
            except KeyError:
                raise UnknownHandle(f"handle {hid!r} was not issued here") from None
            return hid, self._adaptors[backend], job_id

    def submit(self, jd: JobDescription, backend: str) -> JobHandle:
        adaptor = self._adaptor(backend)
        jd.check()
        job_id = adaptor.submit(jd)
        handle = JobHandle(
            uuid.uuid4().hex,
            backend,
            datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z"),
        )
        with self._lock:
            self._handles[handle.handle_id] = (backend, job_id)
        return handle

    def status(self, h: Union[JobHandle, str]) -> JobState:
        hid, adaptor, job_id = self._resolve(h)
        current = adaptor.poll(job_id)
        with self._lock:
            last = self._last.get(hid)
            if last is not None and (last.terminal or len(current.history) < len(last.history)):
                return last
            self._last[hid] = current
            return current

    def cancel(self, h: Union[JobHandle, str]) -> JobState:
        _, adaptor, job_id = self._resolve(h)
        if not adaptor.poll(job_id).terminal:
            adaptor.cancel(job_id)
        return self.status(h)

    def transfer(self, src: str, dst: Optional[str], backend: str) -> str:
        """Copy ``src`` to ``dst`` through the backend; returns the destination locator."""
        adaptor = self._adaptor(backend)
        with tempfile.TemporaryDirectory(prefix="medpipe-xfer-") as tmp:
            local = Path(tmp) / "blob"
            adaptor.stage_in(src, local)
            return adaptor.stage_out(local, dst)

    def advance(self, backend: str) -> None:
        self._adaptor(backend).advance()

    def close(self) -> None:
        with self._lock:
            for adaptor in self._adaptors.values():
                adaptor.close()
