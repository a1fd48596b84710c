"""Job lifecycle states and the legal-transition relation."""

from __future__ import annotations

from enum import Enum
from typing import Optional


class State(str, Enum):
    PENDING = "PENDING"
    STAGING = "STAGING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL


TERMINAL = frozenset({State.DONE, State.FAILED, State.CANCELED})

_FORWARD = {
    State.PENDING: {State.STAGING},
    State.STAGING: {State.RUNNING},
    State.RUNNING: {State.DONE, State.FAILED},
}


def is_legal(src: Optional[State | str], dst: State | str) -> bool:
    """``src=None`` denotes job creation, which may only enter PENDING."""
    dst = State(dst)
    if src is None:
        return dst is State.PENDING
    src = State(src)
    if src.terminal:
        return False
    return dst in _FORWARD.get(src, set()) or dst is State.CANCELED
