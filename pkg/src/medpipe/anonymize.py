"""Header anonymization policies.

Pseudonym tokens are the first 16 hex characters of
``SHA-256(salt | 0x1F | tag | 0x1F | value)``. The token table returned
alongside the anonymized header is the only way back to the originals, so
callers must keep it away from the provenance log.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Optional

from .catalog import Catalog, ImageRecord, StudySet
from .errors import InvalidPolicy
from .util import sha256_hex

if TYPE_CHECKING:
    from .provenance import ProvenanceStore

SEP = b"\x1f"


class Action(str, Enum):
    REMOVE = "REMOVE"
    REPLACE = "REPLACE"
    PSEUDONYMIZE = "PSEUDONYMIZE"


@dataclass(frozen=True)
class Rule:
    tag: str
    action: Action
    value: Optional[str] = None


@dataclass(frozen=True)
class AnonymizationPolicy:
    rules: tuple[Rule, ...] = ()
    salt: bytes = b""

    def __post_init__(self) -> None:
        tags = [r.tag for r in self.rules]
        if len(tags) != len(set(tags)):
            raise InvalidPolicy("at most one rule per tag")
        for r in self.rules:
            if r.action is Action.REPLACE and r.value is None:
                raise InvalidPolicy(f"REPLACE rule for {r.tag} needs a value")
        if not self.salt and any(r.action is Action.PSEUDONYMIZE for r in self.rules):
            raise InvalidPolicy("PSEUDONYMIZE rules need a non-empty salt")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AnonymizationPolicy:
        try:
            rules = tuple(
                Rule(r["tag"], Action(str(r["action"]).upper()), None if r.get("value") is None else str(r["value"]))
                for r in d.get("rules", [])
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidPolicy(f"malformed rule: {exc}") from None
        salt = d.get("salt", "")
        if not isinstance(salt, str):
            raise InvalidPolicy("salt must be a string")
        return cls(rules, salt.encode("utf-8"))

    @classmethod
    def from_json(cls, text: str) -> AnonymizationPolicy:
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict[str, Any]:
        rules: list[dict[str, Any]] = []
        for r in self.rules:
            entry: dict[str, Any] = {"tag": r.tag, "action": r.action.value}
            if r.value is not None:
                entry["value"] = r.value
            rules.append(entry)
        return {"rules": rules, "salt": self.salt.decode("utf-8", "surrogateescape")}

    def digest(self) -> str:
        """Fingerprint that identifies the policy without revealing the salt."""
        rules = [(r.tag, r.action.value, r.value) for r in self.rules]
        return sha256_hex(json.dumps(rules).encode() + SEP + hashlib.sha256(self.salt).digest())[:16]


@dataclass
class PseudonymMap:
    entries: dict[tuple[str, str], str] = field(default_factory=dict)

    def update(self, other: PseudonymMap) -> None:
        self.entries.update(other.entries)

    def to_list(self) -> list[dict[str, str]]:
        return [{"tag": t, "original": o, "token": tok} for (t, o), tok in sorted(self.entries.items())]


def pseudonym(salt: bytes, tag: str, value: str) -> str:
    h = hashlib.sha256(salt + SEP + tag.encode("utf-8") + SEP + value.encode("utf-8"))
    return h.hexdigest()[:16]


def anonymize_header(header: Mapping[str, str], policy: AnonymizationPolicy) -> tuple[dict[str, str], PseudonymMap]:
    rules = {r.tag: r for r in policy.rules}
    out: dict[str, str] = {}
    pmap = PseudonymMap()
    for tag, value in header.items():
        rule = rules.get(tag)
        if rule is None:
            out[tag] = value
        elif rule.action is Action.REPLACE:
            out[tag] = rule.value  # type: ignore[assignment]
        elif rule.action is Action.PSEUDONYMIZE:
            token = pseudonym(policy.salt, tag, value)
            pmap.entries[(tag, value)] = token
            out[tag] = token
    return out, pmap


def anonymize_study(
    study: StudySet,
    policy: AnonymizationPolicy,
    catalog: Catalog,
    store: ProvenanceStore,
    owner: Optional[str] = None,
) -> tuple[StudySet, PseudonymMap]:
    """Copy every member with an anonymized header into a fresh study set.

    Originals are left untouched. The new records get fresh image ids, the
    catalog receives them, and the store records ANONYMIZED followed by the
    new set's STUDYSET_CREATED. The pseudonym map is only returned.
    """
    originals: Sequence[ImageRecord] = [catalog.get(m) for m in study.members]
    pmap = PseudonymMap()
    headers = []
    for rec in originals:
        h, m = anonymize_header(rec.header, policy)
        headers.append(h)
        pmap.update(m)

    def build(seq: int) -> dict[str, Any]:
        new_set_id = f"anon-{seq}"
        return {
            "source_set": study.set_id,
            "new_set": new_set_id,
            "images": {rec.image_id: f"{rec.image_id}.a{seq}" for rec in originals},
            "policy": policy.digest(),
        }

    event = store.append("ANONYMIZED", build)
    image_map = event.payload["images"]
    new_records = [
        ImageRecord(image_map[rec.image_id], rec.subject_id, h, rec.payload_ref) for rec, h in zip(originals, headers)
    ]
    catalog.add(new_records)
    new_set = StudySet(
        event.payload["new_set"],
        owner or study.owner,
        tuple(r.image_id for r in new_records),
        event.at,
        None,
    )
    new_set = store.register_study_set(new_set)
    return new_set, pmap
