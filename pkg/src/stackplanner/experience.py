"""Cross-task experience memory: per-user profiles, facts, and procedures.

Records live one JSON document per user in a store directory. Retrieval is
lexical (Jaccard over normalized tokens); scorers are swappable.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .metrics import normalized_tokens
from .task_memory import EntryKind, MemoryEntry, MemoryStack

logger = logging.getLogger(__name__)

RECORD_KEYS = ("user_profiles", "semantic_memory", "procedural_memory")
SOP_KEYS = ("scenario", "procedure", "rationale")
STORE_KEYS = ("user_id", "updated_at") + RECORD_KEYS

INJECTION_TOKEN_LIMIT = 512
INJECTION_HEADER = "Relevant prior experience:"
EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class SchemaError(ValueError):
    """A document does not match the experience schema."""


class MissingKey(SchemaError):
    pass


class ExtraKey(SchemaError):
    pass


class EmptyElement(SchemaError):
    pass


class UserMismatch(ValueError):
    pass


class StorageError(OSError):
    pass


class CurationParseFailure(Exception):
    pass


@dataclass(frozen=True)
class ProcedureSop:
    scenario: str
    procedure: str
    rationale: str

    def __post_init__(self):
        for key in SOP_KEYS:
            if not getattr(self, key):
                raise EmptyElement(f"SOP field {key!r} is empty")

    def to_dict(self) -> dict[str, str]:
        return {"scenario": self.scenario, "procedure": self.procedure, "rationale": self.rationale}

    def as_text(self) -> str:
        return f"Scenario: {self.scenario} | Procedure: {self.procedure} | Rationale: {self.rationale}"


def _dedupe(items: Iterable) -> tuple:
    seen = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return tuple(out)


@dataclass(frozen=True)
class ExperienceRecord:
    user_id: str
    updated_at: datetime = EPOCH
    user_profiles: tuple[str, ...] = ()
    semantic_memory: tuple[str, ...] = ()
    procedural_memory: tuple[ProcedureSop, ...] = ()

    def __post_init__(self):
        for name in RECORD_KEYS:
            items = getattr(self, name)
            if any(not item for item in items):
                raise EmptyElement(f"{name} contains an empty element")
            object.__setattr__(self, name, _dedupe(items))

    def is_empty(self) -> bool:
        return not (self.user_profiles or self.semantic_memory or self.procedural_memory)

    def content_dict(self) -> dict[str, Any]:
        return {
            "user_profiles": list(self.user_profiles),
            "semantic_memory": list(self.semantic_memory),
            "procedural_memory": [sop.to_dict() for sop in self.procedural_memory],
        }

    def to_dict(self) -> dict[str, Any]:
        return {"user_id": self.user_id, "updated_at": self.updated_at.isoformat(), **self.content_dict()}


def _check_keys(doc: Mapping[str, Any], expected: tuple[str, ...], where: str) -> None:
    if not isinstance(doc, Mapping):
        raise SchemaError(f"{where} must be an object")
    missing = [k for k in expected if k not in doc]
    if missing:
        raise MissingKey(f"{where} is missing {', '.join(missing)}")
    extra = [k for k in doc if k not in expected]
    if extra:
        raise ExtraKey(f"{where} has unexpected keys {', '.join(map(str, extra))}")


def _strings(value: Any, where: str) -> list[str]:
    if not isinstance(value, list):
        raise SchemaError(f"{where} must be a list")
    for item in value:
        if not isinstance(item, str):
            raise SchemaError(f"{where} must contain strings")
        if not item:
            raise EmptyElement(f"{where} contains an empty string")
    return value


def validate_record(doc: Mapping[str, Any], user_id: str = "", updated_at: datetime = EPOCH) -> ExperienceRecord:
    """Validate a curator document with exactly the three memory components."""
    _check_keys(doc, RECORD_KEYS, "experience document")
    sops = doc["procedural_memory"]
    if not isinstance(sops, list):
        raise SchemaError("procedural_memory must be a list")
    parsed = []
    for i, sop in enumerate(sops):
        _check_keys(sop, SOP_KEYS, f"procedural_memory[{i}]")
        for key in SOP_KEYS:
            if not isinstance(sop[key], str):
                raise SchemaError(f"procedural_memory[{i}].{key} must be a string")
        parsed.append(ProcedureSop(sop["scenario"], sop["procedure"], sop["rationale"]))
    return ExperienceRecord(
        user_id=user_id,
        updated_at=updated_at,
        user_profiles=tuple(_strings(doc["user_profiles"], "user_profiles")),
        semantic_memory=tuple(_strings(doc["semantic_memory"], "semantic_memory")),
        procedural_memory=tuple(parsed),
    )


def record_from_store_doc(doc: Mapping[str, Any]) -> ExperienceRecord:
    _check_keys(doc, STORE_KEYS, "store document")
    if not isinstance(doc["user_id"], str) or not doc["user_id"]:
        raise SchemaError("user_id must be a non-empty string")
    try:
        updated_at = datetime.fromisoformat(doc["updated_at"])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad updated_at: {doc['updated_at']!r}") from exc
    body = {k: doc[k] for k in RECORD_KEYS}
    return validate_record(body, doc["user_id"], updated_at)


def merge(existing: ExperienceRecord, fresh: ExperienceRecord) -> ExperienceRecord:
    """Union per component, existing entries first, exact duplicates dropped."""
    if existing.user_id != fresh.user_id:
        raise UserMismatch(f"cannot merge {fresh.user_id!r} into {existing.user_id!r}")
    return ExperienceRecord(
        user_id=existing.user_id,
        updated_at=max(existing.updated_at, fresh.updated_at),
        user_profiles=existing.user_profiles + fresh.user_profiles,
        semantic_memory=existing.semantic_memory + fresh.semantic_memory,
        procedural_memory=existing.procedural_memory + fresh.procedural_memory,
    )


# ---------------------------------------------------------------------------
# retrieval


class Component(str, enum.Enum):
    PROFILE = "Profile"
    SEMANTIC = "Semantic"
    PROCEDURAL = "Procedural"


# tie-break order after recency
_COMPONENT_RANK = {Component.PROFILE: 0, Component.PROCEDURAL: 1, Component.SEMANTIC: 2}


@dataclass(frozen=True)
class ExperienceQuery:
    task_text: str
    user_id: str
    top_k: int = 5

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True)
class RetrievedItem:
    component: Component
    content: str
    score: float


@dataclass(frozen=True)
class RetrievedExperience:
    items: tuple[RetrievedItem, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def __bool__(self) -> bool:
        return bool(self.items)


Scorer = Callable[[str, str], float]


def jaccard_score(query: str, text: str) -> float:
    a, b = set(normalized_tokens(query)), set(normalized_tokens(text))
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def _candidates(record: ExperienceRecord):
    for i, text in enumerate(record.user_profiles):
        yield Component.PROFILE, i, text, text
    for i, text in enumerate(record.semantic_memory):
        yield Component.SEMANTIC, i, text, text
    for i, sop in enumerate(record.procedural_memory):
        yield Component.PROCEDURAL, i, f"{sop.scenario} {sop.procedure} {sop.rationale}", sop.as_text()


def retrieve_from_record(
    record: ExperienceRecord | None,
    query: ExperienceQuery,
    scorer: Scorer = jaccard_score,
) -> RetrievedExperience:
    if record is None:
        return RetrievedExperience()
    scored = []
    for component, index, match_text, display in _candidates(record):
        score = scorer(query.task_text, match_text)
        if score > 0:
            scored.append((score, index, component, display))
    # higher score, then later insertion, then component order
    scored.sort(key=lambda s: (-s[0], -s[1], _COMPONENT_RANK[s[2]]))
    return RetrievedExperience(tuple(RetrievedItem(c, d, s) for s, _, c, d in scored[: query.top_k]))


# ---------------------------------------------------------------------------
# store


_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def _filename(user_id: str) -> str:
    return _SAFE.sub("_", user_id) + ".json"


class ExperienceStore:
    """Per-user experience records, optionally backed by a directory.

    Reads are unsynchronized; writes are serialized per user id.
    """

    def __init__(self, directory: str | os.PathLike | None = None, scorer: Scorer = jaccard_score):
        self.directory = Path(directory) if directory is not None else None
        self.scorer = scorer
        self._records: dict[str, ExperienceRecord] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperienceStore) and self._records == other._records

    def users(self) -> list[str]:
        return sorted(self._records)

    def get(self, user_id: str) -> ExperienceRecord | None:
        return self._records.get(user_id)

    def get_or_empty(self, user_id: str) -> ExperienceRecord:
        return self._records.get(user_id) or ExperienceRecord(user_id=user_id)

    def lock_for(self, user_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(user_id, threading.Lock())

    def put(self, record: ExperienceRecord) -> None:
        with self.lock_for(record.user_id):
            self._records[record.user_id] = record
            if self.directory is not None:
                _write_record(self.directory, record)

    def remove(self, user_id: str) -> bool:
        with self.lock_for(user_id):
            existed = self._records.pop(user_id, None) is not None
            if self.directory is not None:
                path = self.directory / _filename(user_id)
                if path.exists():
                    path.unlink()
                    existed = True
            return existed

    def clear(self) -> None:
        for user_id in list(self._records):
            self.remove(user_id)

    def retrieve(self, query: ExperienceQuery) -> RetrievedExperience:
        return retrieve_from_record(self._records.get(query.user_id), query, self.scorer)

    @classmethod
    def open(cls, directory: str | os.PathLike, **kwargs) -> "ExperienceStore":
        store = load(directory)
        store.directory = Path(directory)
        if kwargs.get("scorer"):
            store.scorer = kwargs["scorer"]
        return store


def retrieve(store: ExperienceStore, query: ExperienceQuery) -> RetrievedExperience:
    return store.retrieve(query)


def _write_record(directory: Path, record: ExperienceRecord) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / _filename(record.user_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(record.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write experience record for {record.user_id!r}: {exc}") from exc


def persist(store: ExperienceStore, path: str | os.PathLike) -> None:
    """Write every record as ``<path>/<user_id>.json``."""
    directory = Path(path)
    for user_id in store.users():
        _write_record(directory, store._records[user_id])


def _load_doc(path: Path, text: str) -> ExperienceRecord:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return record_from_store_doc(doc)


def load(path: str | os.PathLike) -> ExperienceStore:
    """Load a store directory (or a single user document).

    A missing directory, an empty directory, or a blank file gives an empty
    store.
    """
    path = Path(path)
    store = ExperienceStore()
    try:
        if path.is_dir():
            files = sorted(path.glob("*.json"))
        elif path.exists():
            files = [path]
        else:
            files = []
        for file in files:
            text = file.read_text(encoding="utf-8")
            if not text.strip():
                continue
            record = _load_doc(file, text)
            store._records[record.user_id] = record
    except OSError as exc:
        raise StorageError(f"cannot read experience store at {path}: {exc}") from exc
    return store


# ---------------------------------------------------------------------------
# injection and curation


def format_experience(retrieved: RetrievedExperience) -> str:
    lines = [INJECTION_HEADER]
    lines += [f"- ({item.component.value}) {item.content}" for item in retrieved.items]
    return "\n".join(lines)


def inject(
    stack: MemoryStack,
    retrieved: RetrievedExperience,
    summarizer: Callable[[str], str] | None = None,
    step: int = 0,
    limit: int = INJECTION_TOKEN_LIMIT,
) -> MemoryEntry | None:
    """Push one ExperienceInjection entry carrying the retrieved items.

    Blocks over ``limit`` tokens go through ``summarizer`` when given; any
    remaining excess is removed by dropping the lowest-ranked items and, as a
    last resort, truncating.
    """
    if not retrieved:
        return None
    block = format_experience(retrieved)
    if stack.estimator(block) > limit and summarizer is not None:
        summary = summarizer(block).strip()
        if summary:
            block = summary if summary.startswith(INJECTION_HEADER) else f"{INJECTION_HEADER}\n{summary}"
    items = list(retrieved.items)
    while stack.estimator(block) > limit and len(items) > 1:
        items.pop()
        block = format_experience(RetrievedExperience(tuple(items)))
    while stack.estimator(block) > limit:
        block = block[: max(len(block) * 3 // 4, len(INJECTION_HEADER))]
        if len(block) <= len(INJECTION_HEADER):
            break
    return stack.push(EntryKind.EXPERIENCE_INJECTION, block, step=step, source="experience")


def extract_json_object(raw: str) -> dict[str, Any] | None:
    """Return the first JSON object embedded in ``raw``, or None."""
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", raw):
        try:
            obj, _ = decoder.raw_decode(raw, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def curate(
    task_stack: MemoryStack,
    existing: ExperienceRecord,
    now: datetime,
    gateway,
    max_retries: int = 2,
    strict: bool = False,
) -> ExperienceRecord:
    """Ask the curator model for new experience and merge it in.

    A run with no task memory has nothing to extract and skips the call.
    If the curator never produces a schema-conformant document, ``existing``
    is returned unchanged (or CurationParseFailure raised when ``strict``).
    """
    from .templates import load_prompt, render_template

    if len(task_stack) == 0:
        return replace(existing, updated_at=now)
    prompt = render_template(
        load_prompt("curator.md"),
        {
            "task_memory_json": task_stack.to_json(),
            "existing_long_term_memory_json": json.dumps(existing.content_dict(), ensure_ascii=False),
            "now_timestamp": now.isoformat(),
        },
    )
    messages = [("system", prompt), ("user", "Return the updated experience memory as JSON.")]
    last_error = "no response"
    for _ in range(max_retries + 1):
        reply = gateway.chat(messages, purpose="curate").text
        doc = extract_json_object(reply)
        if doc is None:
            last_error = "no JSON object found"
        else:
            try:
                fresh = validate_record(doc, existing.user_id, now)
            except SchemaError as exc:
                last_error = str(exc)
            else:
                return replace(merge(existing, fresh), updated_at=now)
        messages = messages + [
            ("assistant", reply),
            ("user", f"That output was rejected ({last_error}). Reply with JSON matching the schema exactly."),
        ]
    if strict:
        raise CurationParseFailure(last_error)
    logger.warning("experience curation failed for %s, keeping existing record: %s", existing.user_id, last_error)
    return existing
