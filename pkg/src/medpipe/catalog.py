"""Image metadata catalog, study-set queries and homogeneity checks."""

from __future__ import annotations

import json
import os
import re
import threading
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

from filelock import FileLock

from .errors import DuplicateImage, PredicateSyntaxError, UnknownMember, UnknownTag
from .util import dumps, short_digest

STANDARD_TAGS = ("PatientName", "PatientID", "StudyDate", "Modality", "Age")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    subject_id: str
    header: Mapping[str, str] = field(default_factory=dict, hash=False)
    payload_ref: str = ""

    def __post_init__(self) -> None:
        age = self.header.get("Age")
        if age is not None and _parse_age(age) is None:
            raise ValueError(f"image {self.image_id}: Age {age!r} is not a non-negative integer")

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "subject_id": self.subject_id,
            "header": dict(self.header),
            "payload_ref": self.payload_ref,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ImageRecord:
        return cls(d["image_id"], d["subject_id"], {k: str(v) for k, v in d.get("header", {}).items()}, d.get("payload_ref", ""))


@dataclass(frozen=True)
class StudySet:
    set_id: str
    owner: str
    members: tuple[str, ...]
    created_at: str = ""
    defining_query: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "set_id": self.set_id,
            "owner": self.owner,
            "members": list(self.members),
            "created_at": self.created_at,
            "defining_query": self.defining_query,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StudySet:
        return cls(d["set_id"], d["owner"], tuple(d["members"]), d.get("created_at", ""), d.get("defining_query"))


@dataclass(frozen=True)
class HomogeneityReport:
    checked_fields: tuple[str, ...]
    offenders: tuple[tuple[str, str, Optional[str]], ...] = ()

    @property
    def homogeneous(self) -> bool:
        return not self.offenders

    def to_dict(self) -> dict[str, Any]:
        return {
            "homogeneous": self.homogeneous,
            "checked_fields": list(self.checked_fields),
            "offenders": [list(o) for o in self.offenders],
        }


class Catalog:
    """In-memory catalog, optionally backed by a JSON-lines file.

    The file is the source of truth when a path is given: :meth:`refresh`
    picks up lines appended by other processes, and :meth:`add` appends
    under a file lock.
    """

    def __init__(self, records: Iterable[ImageRecord] = (), path: str | os.PathLike[str] | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._records: dict[str, ImageRecord] = {}
        self._offset = 0
        self._lock = threading.RLock()
        for r in records:
            self._insert(r)
        if self.path is not None:
            self.refresh()

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> Catalog:
        return cls(path=path)

    def _insert(self, r: ImageRecord) -> None:
        if r.image_id in self._records:
            raise DuplicateImage(f"image id {r.image_id!r} already in catalog")
        self._records[r.image_id] = r

    def refresh(self) -> None:
        if self.path is None or not self.path.exists():
            return
        with self._lock, open(self.path, "rb") as fh:
            fh.seek(self._offset)
            for line in fh:
                if not line.endswith(b"\n"):
                    break  # partially written line; pick it up next time
                self._offset += len(line)
                if line.strip():
                    self._insert(ImageRecord.from_dict(json.loads(line)))

    def add(self, records: Iterable[ImageRecord]) -> None:
        records = list(records)
        with self._lock:
            if self.path is None:
                ids = [r.image_id for r in records]
                if len(set(ids)) != len(ids) or any(i in self._records for i in ids):
                    raise DuplicateImage("image ids must be unique")
                for r in records:
                    self._insert(r)
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with FileLock(str(self.path) + ".lock"):
                self.refresh()
                ids = [r.image_id for r in records]
                if len(set(ids)) != len(ids) or any(i in self._records for i in ids):
                    raise DuplicateImage("image ids must be unique")
                with open(self.path, "ab") as fh:
                    for r in records:
                        fh.write((dumps(r.to_dict()) + "\n").encode("utf-8"))
                    fh.flush()
                    os.fsync(fh.fileno())
                self.refresh()

    def get(self, image_id: str) -> ImageRecord:
        try:
            return self._records[image_id]
        except KeyError:
            raise UnknownMember(f"image {image_id!r} is not in the catalog") from None

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[ImageRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def schema(self) -> set[str]:
        tags = set(STANDARD_TAGS)
        for r in self._records.values():
            tags.update(r.header)
        return tags


# -- predicates --------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<lp>\() | (?P<rp>\)) |
        (?P<op>!=|>=|<=|=) |
        "(?P<dq>(?:[^"\\]|\\.)*)" |
        '(?P<sq>[^']*)' |
        (?P<word>[^\s()=!<>"']+)
    )""",
    re.VERBOSE,
)
_KEYWORDS = {"AND", "OR", "NOT"}


def _parse_age(value: str) -> Optional[int]:
    value = value.strip()
    return int(value) if value.isdigit() else None


def _parse_date(value: str) -> Optional[date]:
    for fmt in ("%Y%m%d", "%Y-%m-%d"):
        try:
            return datetime.strptime(value.strip(), fmt).date()
        except ValueError:
            continue
    return None


_TYPED: dict[str, Callable[[str], Any]] = {"Age": _parse_age, "StudyDate": _parse_date}


class Predicate:
    def __call__(self, header: Mapping[str, str]) -> bool:
        raise NotImplementedError

    def tags(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class Compare(Predicate):
    tag: str
    op: str
    value: str

    def __call__(self, header: Mapping[str, str]) -> bool:
        raw = header.get(self.tag)
        if raw is None:
            return False
        conv = _TYPED.get(self.tag)
        if conv is not None:
            left, right = conv(raw), conv(self.value)
            if left is None:
                return False
        else:
            left, right = raw, self.value
        if self.op == "=":
            return left == right
        if self.op == "!=":
            return left != right
        if self.op == ">=":
            return left >= right
        return left <= right

    def tags(self) -> set[str]:
        return {self.tag}


@dataclass(frozen=True)
class Not(Predicate):
    inner: Predicate

    def __call__(self, header: Mapping[str, str]) -> bool:
        return not self.inner(header)

    def tags(self) -> set[str]:
        return self.inner.tags()


@dataclass(frozen=True)
class And(Predicate):
    parts: tuple[Predicate, ...]

    def __call__(self, header: Mapping[str, str]) -> bool:
        return all(p(header) for p in self.parts)

    def tags(self) -> set[str]:
        return set().union(*(p.tags() for p in self.parts))


@dataclass(frozen=True)
class Or(Predicate):
    parts: tuple[Predicate, ...]

    def __call__(self, header: Mapping[str, str]) -> bool:
        return any(p(header) for p in self.parts)

    def tags(self) -> set[str]:
        return set().union(*(p.tags() for p in self.parts))


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens: list[tuple[str, str]] = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise PredicateSyntaxError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        pos = m.end()
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "dq":
            tokens.append(("lit", re.sub(r"\\(.)", r"\1", value)))
        elif kind == "sq":
            tokens.append(("lit", value))
        elif kind == "word" and value.upper() in _KEYWORDS:
            tokens.append((value.upper(), value))
        else:
            tokens.append((kind, value))
    return tokens


def parse_predicate(text: str) -> Predicate:
    """Parse ``TAG op VALUE`` comparisons joined by NOT/AND/OR and parentheses.

    Precedence is NOT > AND > OR. Values may be bare words or quoted strings.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek() -> Optional[str]:
        return tokens[pos][0] if pos < len(tokens) else None

    def take(kind: str) -> str:
        nonlocal pos
        if peek() != kind:
            found = tokens[pos][1] if pos < len(tokens) else "end of input"
            raise PredicateSyntaxError(f"expected {kind} but found {found!r}")
        pos += 1
        return tokens[pos - 1][1]

    def or_expr() -> Predicate:
        parts = [and_expr()]
        while peek() == "OR":
            take("OR")
            parts.append(and_expr())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def and_expr() -> Predicate:
        parts = [not_expr()]
        while peek() == "AND":
            take("AND")
            parts.append(not_expr())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def not_expr() -> Predicate:
        if peek() == "NOT":
            take("NOT")
            return Not(not_expr())
        if peek() == "lp":
            take("lp")
            inner = or_expr()
            take("rp")
            return inner
        tag = take("word")
        op = take("op")
        if peek() in ("word", "lit"):
            value = tokens[pos][1]
            take(peek())  # type: ignore[arg-type]
        else:
            raise PredicateSyntaxError(f"comparison on {tag!r} is missing a value")
        conv = _TYPED.get(tag)
        if conv is not None and conv(value) is None:
            raise PredicateSyntaxError(f"{value!r} is not a valid value for {tag}")
        return Compare(tag, op, value)

    if not tokens:
        raise PredicateSyntaxError("empty predicate")
    pred = or_expr()
    if pos != len(tokens):
        raise PredicateSyntaxError(f"unexpected trailing input {tokens[pos][1]!r}")
    return pred


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def evaluate_query(
    predicate: str,
    catalog: Catalog,
    owner: str = "anonymous",
    created_at: Optional[str] = None,
) -> StudySet:
    """Select the records satisfying ``predicate`` into a study set.

    The set id is derived from owner, query and members, so re-running a
    query over an unchanged catalog yields the same set.
    """
    pred = parse_predicate(predicate)
    unknown = pred.tags() - catalog.schema()
    if unknown:
        raise UnknownTag(f"unknown tag(s): {', '.join(sorted(unknown))}", sorted(unknown))
    members = tuple(r.image_id for r in catalog.records() if pred(r.header))
    set_id = "ss-" + short_digest({"owner": owner, "query": predicate, "members": list(members)})
    return StudySet(set_id, owner, members, created_at or _now(), predicate)


def _majority(values: Sequence[tuple[str, Optional[str]]]) -> Optional[str]:
    counts = Counter(v for _, v in values)
    best = max(counts.values())
    # ties go to the value held by the lowest image id
    for _, v in sorted(values, key=lambda iv: iv[0]):
        if counts[v] == best:
            return v
    return None  # pragma: no cover


def check_homogeneity(s: StudySet, fields: Sequence[str], catalog: Catalog) -> HomogeneityReport:
    records = [catalog.get(m) for m in s.members]
    checked = tuple(dict.fromkeys(fields))
    offenders: list[tuple[str, str, Optional[str]]] = []
    for tag in checked:
        values = [(r.image_id, r.header.get(tag)) for r in records]
        if not values:
            continue
        majority = _majority(values)
        offenders.extend((iid, tag, v) for iid, v in sorted(values, key=lambda iv: iv[0]) if v != majority)
    return HomogeneityReport(checked, tuple(offenders))
