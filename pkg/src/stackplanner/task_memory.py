"""Stack-structured task memory owned by a single coordinator run.

Entries are pushed in execution order; the coordinator may replace a suffix
with a summary (condense) or drop a suffix and leave a failure note (prune).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Iterable

TokenEstimator = Callable[[str], int]


def estimate_tokens(content: str) -> int:
    """Rough token count: ceil(utf-8 byte length / 4)."""
    return math.ceil(len(content.encode("utf-8")) / 4)


class EntryKind(str, enum.Enum):
    TASK_SPEC = "TaskSpecEntry"
    COORDINATOR_MESSAGE = "CoordinatorMessage"
    SUBAGENT_INPUT = "SubAgentInput"
    SUBAGENT_OUTPUT = "SubAgentOutput"
    CONDENSED = "Condensed"
    FAILURE_RECORD = "FailureRecord"
    EXPERIENCE_INJECTION = "ExperienceInjection"


class StackError(Exception):
    """Base class for invalid stack operations."""


class EmptyContent(StackError):
    pass


class EmptySummary(StackError):
    pass


class IndexOutOfRange(StackError):
    pass


class PopTooDeep(StackError):
    pass


class MissingFailureNote(StackError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    id: int
    kind: EntryKind
    content: str
    token_estimate: int
    created_step: int
    source: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "content": self.content,
            "token_estimate": self.token_estimate,
            "created_step": self.created_step,
            "source": self.source,
        }


ELISION_MARKER = "[... {n} earlier entries elided; consider SUMMARIZE ...]"
EMPTY_SENTINEL = "(empty)"


class MemoryStack:
    """Ordered memory entries, bottom (index 1) to top (index t).

    Indices used by :meth:`condense` are 1-based to match the usual
    ``{m_k, ..., m_t}`` notation. Ids are never reused, even after entries
    are popped.
    """

    def __init__(
        self,
        token_budget: int = 4096,
        estimator: TokenEstimator = estimate_tokens,
    ):
        if token_budget < 1:
            raise ValueError("token_budget must be positive")
        self.token_budget = token_budget
        self.estimator = estimator
        self.entries: list[MemoryEntry] = []
        self.next_id = 1
        self.total_tokens = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def top(self) -> MemoryEntry | None:
        return self.entries[-1] if self.entries else None

    def _new_entry(self, kind: EntryKind, content: str, step: int, source: str) -> MemoryEntry:
        entry = MemoryEntry(
            id=self.next_id,
            kind=EntryKind(kind),
            content=content,
            token_estimate=self.estimator(content),
            created_step=step,
            source=source,
        )
        self.next_id += 1
        return entry

    def _append(self, entry: MemoryEntry) -> MemoryEntry:
        self.entries.append(entry)
        self.total_tokens += entry.token_estimate
        return entry

    def _pop_suffix(self, start: int) -> list[MemoryEntry]:
        popped = self.entries[start:]
        del self.entries[start:]
        self.total_tokens -= sum(e.token_estimate for e in popped)
        return popped

    def push(self, kind: EntryKind, content: str, step: int = 0, source: str = "coordinator") -> MemoryEntry:
        if not content:
            raise EmptyContent("memory entries need non-empty content")
        return self._append(self._new_entry(kind, content, step, source))

    def condense(self, k: int, summary: str, step: int = 0, source: str = "coordinator") -> MemoryEntry:
        """Replace entries ``k..t`` with one Condensed entry; length becomes ``k``.

        The new entry's first line records the id range it replaced.
        """
        t = len(self.entries)
        if not 1 <= k <= t:
            raise IndexOutOfRange(f"condense index {k} outside 1..{t}")
        if not summary or not summary.strip():
            raise EmptySummary("condensation needs a non-empty summary")
        popped = self._pop_suffix(k - 1)
        header = f"[condensed ids {popped[0].id}-{popped[-1].id}]"
        return self._append(self._new_entry(EntryKind.CONDENSED, f"{header}\n{summary}", step, source))

    def prune(
        self,
        pop_count: int,
        failure_note: str | None = None,
        step: int = 0,
        source: str = "coordinator",
    ) -> MemoryEntry | None:
        """Drop the top ``pop_count`` entries and record why.

        Returns the FailureRecord entry, or None when ``pop_count`` is 0.
        The TaskSpecEntry at the bottom can never be pruned.
        """
        t = len(self.entries)
        if pop_count < 0:
            raise ValueError("pop_count must be non-negative")
        if pop_count == 0:
            return None
        if pop_count > t:
            raise PopTooDeep(f"cannot pop {pop_count} of {t} entries")
        if pop_count == t and self.entries[0].kind == EntryKind.TASK_SPEC:
            raise PopTooDeep("the task specification entry cannot be pruned")
        if not failure_note:
            raise MissingFailureNote("pruning requires a failure note")
        self._pop_suffix(t - pop_count)
        return self._append(self._new_entry(EntryKind.FAILURE_RECORD, failure_note, step, source))

    # rendering ---------------------------------------------------------

    @staticmethod
    def format_entry(position: int, entry: MemoryEntry) -> str:
        return f"[{position}][{entry.kind.value}][{entry.source}] {entry.content}"

    def render(self, budget: int | None = None) -> tuple[str, bool]:
        """Render bottom to top within ``budget`` tokens.

        Returns ``(text, verbose)``; ``verbose`` is set when older entries had
        to be elided to fit, which is the cue for the coordinator to summarize.
        """
        budget = self.token_budget if budget is None else budget
        if not self.entries:
            return EMPTY_SENTINEL, False
        blocks = [self.format_entry(i, e) for i, e in enumerate(self.entries, start=1)]
        text = "\n".join(blocks)
        if self.estimator(text) <= budget:
            return text, False

        # elide oldest entries that are not the task specification
        keep = list(range(len(blocks)))
        elidable = [i for i in keep if self.entries[i].kind != EntryKind.TASK_SPEC]
        elided = 0
        while elidable:
            keep.remove(elidable.pop(0))
            elided += 1
            text = _join_with_marker(blocks, keep, elided, self.entries)
            if self.estimator(text) <= budget:
                return text, True
        return _truncate_to_budget(text, budget, self.estimator), True

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "token_budget": self.token_budget,
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, doc: dict[str, Any], estimator: TokenEstimator = estimate_tokens) -> "MemoryStack":
        stack = cls(token_budget=int(doc["token_budget"]), estimator=estimator)
        for raw in doc["entries"]:
            entry = MemoryEntry(
                id=int(raw["id"]),
                kind=EntryKind(raw["kind"]),
                content=raw["content"],
                token_estimate=int(raw["token_estimate"]),
                created_step=int(raw["created_step"]),
                source=raw["source"],
            )
            if stack.entries and entry.id <= stack.entries[-1].id:
                raise ValueError("entry ids must be strictly increasing")
            stack._append(entry)
        stack.next_id = stack.entries[-1].id + 1 if stack.entries else 1
        return stack

    def kinds(self) -> list[EntryKind]:
        return [e.kind for e in self.entries]

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]


def _join_with_marker(blocks: list[str], keep: Iterable[int], elided: int, entries) -> str:
    keep = list(keep)
    marker = ELISION_MARKER.format(n=elided)
    out: list[str] = []
    placed = False
    for i in keep:
        if not placed and entries[i].kind != EntryKind.TASK_SPEC:
            out.append(marker)
            placed = True
        out.append(blocks[i])
    if not placed:
        out.append(marker)
    return "\n".join(out)


def _truncate_to_budget(text: str, budget: int, estimator: TokenEstimator) -> str:
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if estimator(text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]
