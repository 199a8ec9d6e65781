"""Random operation sequences against MemoryStack with a list-based reference model."""

import random

from stackplanner.task_memory import (
    EmptyContent,
    EmptySummary,
    EntryKind,
    IndexOutOfRange,
    MemoryStack,
    MissingFailureNote,
    PopTooDeep,
)

KINDS = [k for k in EntryKind if k != EntryKind.TASK_SPEC]


def check_invariants(stack: MemoryStack, model: list[tuple[int, str]], retired: set[int]) -> None:
    ids = stack.ids()
    assert ids == [i for i, _ in model]
    assert all(a < b for a, b in zip(ids, ids[1:]))
    assert stack[0].kind == EntryKind.TASK_SPEC
    assert stack.total_tokens == sum(e.token_estimate for e in stack)
    assert not retired & set(ids)


def run_sequence(rng: random.Random, n_ops: int = 25) -> None:
    stack = MemoryStack(token_budget=64)
    stack.push(EntryKind.TASK_SPEC, "task", 0)
    model = [(stack.top.id, "TaskSpecEntry")]
    retired: set[int] = set()
    last_id = stack.top.id
    for step in range(1, n_ops + 1):
        op = rng.choice(("push", "push", "condense", "prune", "bad"))
        t = len(stack)
        if op == "push":
            kind = rng.choice(KINDS)
            entry = stack.push(kind, "x" * rng.randint(1, 40), step)
            assert entry.id > last_id
            last_id = entry.id
            model.append((entry.id, kind.value))
        elif op == "condense" and t >= 2:
            # never condense the task entry itself
            k = rng.randint(2, t)
            before_tokens = stack.total_tokens
            popped = model[k - 1:]
            summary = "s" * rng.randint(1, 8)
            entry = stack.condense(k, summary, step)
            assert len(stack) == k
            assert entry.kind == EntryKind.CONDENSED
            assert entry.content.startswith(f"[condensed ids {popped[0][0]}-{popped[-1][0]}]")
            retired |= {i for i, _ in popped}
            model[k - 1:] = [(entry.id, "Condensed")]
            assert entry.id > last_id
            last_id = entry.id
            popped_tokens = before_tokens - sum(stack[i].token_estimate for i in range(k - 1))
            if entry.token_estimate <= popped_tokens:
                assert stack.total_tokens <= before_tokens
        elif op == "prune" and t >= 2:
            pop = rng.randint(0, t - 1)
            entry = stack.prune(pop, "failed attempt", step)
            if pop == 0:
                assert entry is None
            else:
                assert entry.kind == EntryKind.FAILURE_RECORD
                assert entry.content == "failed attempt"
                retired |= {i for i, _ in model[t - pop:]}
                model[t - pop:] = [(entry.id, "FailureRecord")]
                assert len(stack) == t - pop + 1
                last_id = entry.id
        else:
            snapshot = stack.to_json()
            bad = rng.choice(("empty_push", "k_zero", "k_big", "empty_summary", "pop_all", "no_note", "pop_big"))
            expected = {
                "empty_push": EmptyContent,
                "k_zero": IndexOutOfRange,
                "k_big": IndexOutOfRange,
                "empty_summary": EmptySummary,
                "pop_all": PopTooDeep,
                "no_note": MissingFailureNote,
                "pop_big": PopTooDeep,
            }[bad]
            if bad == "no_note" and t == 1:
                expected = PopTooDeep  # protection of the task entry is checked first
            try:
                if bad == "empty_push":
                    stack.push(EntryKind.COORDINATOR_MESSAGE, "", step)
                elif bad == "k_zero":
                    stack.condense(0, "s", step)
                elif bad == "k_big":
                    stack.condense(t + 1, "s", step)
                elif bad == "empty_summary":
                    stack.condense(t, "   ", step)
                elif bad == "pop_all":
                    stack.prune(t, "note", step)
                elif bad == "no_note":
                    stack.prune(1, None, step)
                else:
                    stack.prune(t + 1, "note", step)
            except expected:
                pass
            else:
                raise AssertionError(f"{bad} did not raise {expected.__name__}")
            # failed operations leave the stack untouched
            assert stack.to_json() == snapshot
        check_invariants(stack, model, retired)
    restored = MemoryStack.from_dict(stack.to_dict())
    assert restored.to_json() == stack.to_json()
