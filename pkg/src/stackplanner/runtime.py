"""Coordinator loop: decide, dispatch, update task memory, stop."""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import agents
from .agents import AgentResult, AgentStatus, SubTask
from .experience import (
    ExperienceQuery,
    ExperienceStore,
    curate,
    extract_json_object,
    inject,
)
from .gateway import ChatMessage, ChatRequest, Completion, Gateway, GatewayError
from .task_memory import EntryKind, MemoryStack, StackError
from .templates import load_prompt, render_template
from .tools import ToolRegistry

logger = logging.getLogger(__name__)


class ActionKind(str, enum.Enum):
    PLAN = "plan"
    REFLECT = "reflect"
    SUMMARIZE = "summarize"
    DELEGATE = "delegate"
    FINISH = "finish"


class Termination(str, enum.Enum):
    FINISHED = "Finished"
    STEP_CAP_REACHED = "StepCapReached"
    UNRECOVERABLE_ERROR = "UnrecoverableError"


class ParseFailure(ValueError):
    """Coordinator output could not be turned into a decision."""


class MalformedDocument(ParseFailure):
    pass


class UnknownAction(ParseFailure):
    pass


class MissingField(ParseFailure):
    pass


@dataclass(frozen=True)
class TaskSpec:
    query: str
    user_id: str = "anonymous"
    locale: str = "en-US"
    max_steps: int = 25
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("query must be non-empty")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def render(self) -> str:
        return f"Task: {self.query}\nUser: {self.user_id}\nLocale: {self.locale}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "query": self.query,
            "user_id": self.user_id,
            "locale": self.locale,
            "max_steps": self.max_steps,
            "created_at": self.created_at.isoformat(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TaskSpec":
        return cls(
            query=doc["query"],
            user_id=doc.get("user_id", "anonymous"),
            locale=doc.get("locale", "en-US"),
            max_steps=int(doc.get("max_steps", 25)),
            created_at=datetime.fromisoformat(doc["created_at"]),
        )


@dataclass(frozen=True)
class CoordinatorDecision:
    action: ActionKind
    reasoning: str
    params: Mapping[str, str] | None = None
    instruction: str = ""
    locale: str = ""

    def __post_init__(self):
        if self.action == ActionKind.DELEGATE:
            if not self.params or not self.params.get("agent_type") or not self.params.get("task_description"):
                raise MissingField("delegate decisions need params.agent_type and params.task_description")
        elif self.params:
            raise ValueError(f"{self.action.value} decisions take no params")


@dataclass(frozen=True)
class StepRecord:
    step: int
    decision: CoordinatorDecision
    outcome_digest: str
    memory_len_before: int
    memory_len_after: int
    tokens_used: int
    wall_time_ms: int

    def to_trace(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "action": self.decision.action.value,
            "reasoning": self.decision.reasoning,
            "params": dict(self.decision.params) if self.decision.params else None,
            "outcome_digest": self.outcome_digest,
            "memory_len_before": self.memory_len_before,
            "memory_len_after": self.memory_len_after,
            "tokens_used": self.tokens_used,
            "wall_time_ms": self.wall_time_ms,
        }


@dataclass
class RunResult:
    final_answer: str
    termination: Termination
    steps: list[StepRecord]
    final_stack_snapshot: MemoryStack
    error: str | None = None


@dataclass
class RuntimeConfig:
    max_steps: int = 25
    max_reparse: int = 2
    token_budget: int = 4096
    delegate_context_budget: int = 1024
    search_max_iters: int = agents.DEFAULT_MAX_ITERS
    experience_top_k: int = 5
    curate: bool = True
    disable_revise: bool = False
    disable_experience: bool = False
    model: str = "default"
    temperature: float = 0.0


class TraceWriter:
    """Writes ``<name>.jsonl`` plus its sidecars.

    Sidecars: ``<name>.agents.jsonl`` (sub-agent transcripts),
    ``<name>.memory.jsonl`` (entries pushed/removed per step) and
    ``<name>.meta.json`` (what is needed to re-execute the run).
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._trace = open(self.path, "w", encoding="utf-8")
        self._agents = open(sidecar(self.path, "agents.jsonl"), "w", encoding="utf-8")
        self._memory = open(sidecar(self.path, "memory.jsonl"), "w", encoding="utf-8")

    @staticmethod
    def _line(fh, doc: Mapping[str, Any]) -> None:
        fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
        fh.flush()

    def step(self, record: StepRecord) -> None:
        self._line(self._trace, record.to_trace())

    def agent(self, doc: Mapping[str, Any]) -> None:
        self._line(self._agents, doc)

    def memory(self, doc: Mapping[str, Any]) -> None:
        self._line(self._memory, doc)

    def meta(self, doc: Mapping[str, Any]) -> None:
        sidecar(self.path, "meta.json").write_text(json.dumps(doc, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")

    def close(self) -> None:
        for fh in (self._trace, self._agents, self._memory):
            fh.close()


def sidecar(trace_path: str | os.PathLike, suffix: str) -> Path:
    path = Path(trace_path)
    stem = path.name[: -len(".jsonl")] if path.name.endswith(".jsonl") else path.name
    return path.with_name(f"{stem}.{suffix}")


@dataclass
class RuntimeContext:
    gateway: Gateway
    tools: ToolRegistry
    store: ExperienceStore | None = None
    config: RuntimeConfig = field(default_factory=RuntimeConfig)
    trace: TraceWriter | None = None
    # deterministic runs report zero wall time and use the task timestamp as "now"
    deterministic: bool = False
    clock: Callable[[], float] = time.perf_counter


class _RunGateway:
    """Per-run view of the shared gateway that counts this run's tokens."""

    def __init__(self, gateway: Gateway, cfg: RuntimeConfig):
        self._gateway = gateway
        self._cfg = cfg
        self.tokens_used = 0

    def complete(self, req: ChatRequest) -> Completion:
        completion = self._gateway.complete(req)
        self.tokens_used += completion.total_tokens
        return completion

    def chat(self, messages, purpose: str = "default", **kwargs) -> Completion:
        msgs = tuple(m if isinstance(m, ChatMessage) else ChatMessage(*m) for m in messages)
        kwargs.setdefault("model", self._cfg.model)
        kwargs.setdefault("temperature", self._cfg.temperature)
        return self.complete(ChatRequest(msgs, purpose=purpose, **kwargs))


# ---------------------------------------------------------------------------
# decisions


def parse_decision(raw: str) -> CoordinatorDecision:
    """Extract and validate the first JSON object in a coordinator reply."""
    doc = extract_json_object(raw)
    if doc is None:
        raise MalformedDocument("no JSON object found in the reply")
    if "action" not in doc:
        raise MissingField("action")
    action_raw = doc["action"]
    try:
        action = ActionKind(str(action_raw).strip().lower())
    except ValueError:
        raise UnknownAction(f"unknown action {action_raw!r}") from None
    reasoning = doc.get("reasoning")
    if not isinstance(reasoning, str) or not reasoning.strip():
        raise MissingField("reasoning")
    params = doc.get("params") or None
    if action == ActionKind.DELEGATE:
        if not isinstance(params, dict):
            raise MissingField("params")
        for key in ("agent_type", "task_description"):
            if not isinstance(params.get(key), str) or not params[key].strip():
                raise MissingField(f"params.{key}")
        params = {"agent_type": params["agent_type"], "task_description": params["task_description"]}
    else:
        params = None
    instruction = doc.get("instruction") or ""
    locale = doc.get("locale") or ""
    return CoordinatorDecision(action, reasoning, params, str(instruction), str(locale))


def _coordinator_vars(task: TaskSpec, stack_text: str, action: str, **extra) -> dict[str, Any]:
    variables = {
        "CURRENT_TIME": task.created_at.isoformat(),
        "current_node": "coordinator",
        "current_action": action,
        "user_query": task.query,
        "memory_stack": stack_text,
        "locale": task.locale,
        "available_actions": ", ".join(a.value.upper() for a in ActionKind),
        "available_sub_agents": "searcher, reporter, replanner",
        "sub_agents_description": agents.AGENT_DESCRIPTIONS,
    }
    variables.update(extra)
    return variables


def decide(
    stack: MemoryStack,
    task: TaskSpec,
    gateway,
    cfg: RuntimeConfig,
    step: int = 0,
    finish_allowed: bool = True,
) -> CoordinatorDecision:
    """Ask the coordinator for its next action, re-prompting on bad output."""
    stack_text, verbose = stack.render(cfg.token_budget)
    notice = "the memory stack exceeded its budget and older entries were elided; consider SUMMARIZE" if verbose else ""
    prompt = render_template(
        load_prompt("coordinator.md"),
        _coordinator_vars(task, stack_text, "decision", memory_notice=notice, current_progress=f"step {step}"),
    )
    messages: list[tuple[str, str]] = [("system", prompt), ("user", task.query)]
    last: ParseFailure | None = None
    for _ in range(cfg.max_reparse + 1):
        reply = gateway.chat(messages, purpose="decision").text
        try:
            decision = parse_decision(reply)
            if decision.action == ActionKind.FINISH and not finish_allowed:
                raise ParseFailure("FINISH is not allowed before any sub-agent has been delegated to")
        except ParseFailure as exc:
            last = exc
            messages = messages + [
                ("assistant", reply),
                ("user", f"Your reply was rejected ({type(exc).__name__}: {exc}). Reply with a single valid JSON decision."),
            ]
            continue
        if not decision.locale:
            decision = CoordinatorDecision(decision.action, decision.reasoning, decision.params,
                                           decision.instruction, task.locale)
        return decision
    raise last


def should_terminate(step: int, max_steps: int, last: CoordinatorDecision | None) -> Termination | None:
    if last is not None and last.action == ActionKind.FINISH:
        return Termination.FINISHED
    if step >= max_steps:
        return Termination.STEP_CAP_REACHED
    return None


_ANSWER = re.compile(r"(?:final answer|my answer|the answer)\s*(?:is|:)\s*\**\s*(.+?)\s*\**\s*\.?\s*$",
                     re.IGNORECASE | re.MULTILINE)


def extract_final_answer(text: str) -> str:
    """Pull the short answer out of an ``... my answer is X.`` style conclusion."""
    matches = _ANSWER.findall(text)
    if matches:
        return matches[-1].strip().rstrip(".").strip()
    return text.strip()


# ---------------------------------------------------------------------------
# dispatch


@dataclass
class _RunState:
    task: TaskSpec
    stack: MemoryStack
    gateway: _RunGateway
    step: int = 0
    delegations: int = 0
    last_report: str | None = None
    last_output: str | None = None


@dataclass
class StepOutcome:
    digest: str
    agent_result: AgentResult | None = None
    agent_name: str | None = None
    final_answer: str | None = None


def _protected_prefix(stack: MemoryStack) -> int:
    n = 0
    for entry in stack:
        if entry.kind in (EntryKind.TASK_SPEC, EntryKind.EXPERIENCE_INJECTION):
            n += 1
        else:
            break
    return n


def summarize_start(stack: MemoryStack) -> int:
    """1-based start of the suffix a SUMMARIZE condenses.

    Everything above the task/experience prefix and above the newest
    Condensed entry; returns ``len(stack) + 1`` when nothing qualifies.
    """
    start = _protected_prefix(stack)
    for pos, entry in enumerate(stack, start=1):
        if entry.kind == EntryKind.CONDENSED:
            start = max(start, pos)
    return start + 1


def _mode_call(state: _RunState, action: str, **extra) -> str:
    stack_text, _ = state.stack.render()
    prompt = render_template(load_prompt("coordinator.md"), _coordinator_vars(state.task, stack_text, action, **extra))
    return state.gateway.chat([("system", prompt), ("user", state.task.query)], purpose=action).text.strip()


def _dispatch_plan(decision: CoordinatorDecision, state: _RunState) -> StepOutcome:
    analysis = _mode_call(state, "plan", decision_reasoning=decision.reasoning, instruction=decision.instruction)
    if not analysis:
        return StepOutcome("plan: empty analysis, nothing recorded")
    entry = state.stack.push(EntryKind.COORDINATOR_MESSAGE, f"PLAN: {analysis}", state.step, "coordinator")
    return StepOutcome(f"plan: pushed CoordinatorMessage #{entry.id}")


def _dispatch_summarize(decision: CoordinatorDecision, state: _RunState) -> StepOutcome:
    stack = state.stack
    k = summarize_start(stack)
    if k > len(stack):
        return StepOutcome("summarize: nothing above the protected prefix")
    suffix = "\n".join(stack.format_entry(pos, stack[pos - 1]) for pos in range(k, len(stack) + 1))
    summary = _mode_call(
        state,
        "summarize",
        decision_reasoning=decision.reasoning,
        instruction=decision.instruction,
        summarization_focus=decision.instruction or decision.reasoning,
        need_summary_context=suffix,
    )
    popped = len(stack) - k + 1
    try:
        entry = stack.condense(k, summary, state.step, "coordinator")
    except StackError as exc:
        return StepOutcome(f"summarize failed: {exc}")
    return StepOutcome(f"summarize: condensed {popped} entries from position {k} into #{entry.id}")


def _dispatch_reflect(decision: CoordinatorDecision, state: _RunState) -> StepOutcome:
    stack = state.stack
    top = stack.top
    target = stack.format_entry(len(stack), top) if top else "(empty)"
    reply = _mode_call(state, "reflect", decision_reasoning=decision.reasoning,
                       instruction=decision.instruction, reflection_target=target)
    doc = extract_json_object(reply)
    if doc is None:
        return StepOutcome("reflect ignored: no JSON object in reflection")
    pop_count = doc.get("pop_count", 0)
    analysis = str(doc.get("analysis") or "").strip()
    reasoning = str(doc.get("reasoning") or "").strip()
    if isinstance(pop_count, bool) or not isinstance(pop_count, int) or pop_count < 0:
        return StepOutcome(f"reflect ignored: invalid pop_count {pop_count!r}")
    if pop_count == 0:
        return StepOutcome(f"reflect: kept stack; analysis: {analysis}")
    note = reasoning or analysis or "previous entries were unproductive"
    try:
        stack.prune(pop_count, f"Pruned {pop_count} entries. {note}", state.step, "coordinator")
    except StackError as exc:
        return StepOutcome(f"reflect rejected: {exc}")
    return StepOutcome(f"reflect: pruned {pop_count} entries; analysis: {analysis}")


def _dispatch_delegate(decision: CoordinatorDecision, state: _RunState, ctx: RuntimeContext) -> StepOutcome:
    stack = state.stack
    agent_type = decision.params["agent_type"]
    description = decision.params["task_description"]
    # with revision disabled, failures accumulate as raw outputs instead of failure records
    failure_kind = EntryKind.SUBAGENT_OUTPUT if ctx.config.disable_revise else EntryKind.FAILURE_RECORD
    agent_name = agents.resolve_agent(agent_type)
    if agent_name is None:
        stack.push(failure_kind, f"Delegation failed: unknown agent_type {agent_type!r}",
                   state.step, "coordinator")
        return StepOutcome(f"delegate failed: unknown agent_type {agent_type!r}")

    context, _ = stack.render(ctx.config.delegate_context_budget)
    locale = decision.locale or state.task.locale
    if agent_name == agents.REPLANNER:
        # no dedicated planner agent; the search agent decomposes and searches
        description = f"Break the question into search steps and carry them out: {description}"
        agent_name = agents.SEARCH_AGENT
    subtask = SubTask(agent_type, description, context, locale)
    stack.push(EntryKind.SUBAGENT_INPUT, f"to {agent_name}: {description}", state.step, "coordinator")

    if agent_name == agents.SEARCH_AGENT:
        result = agents.run_search_agent(subtask, ctx.tools, state.gateway, ctx.config.search_max_iters)
    else:
        result = agents.run_report_agent(subtask, state.gateway)
    state.delegations += 1

    if result.status == AgentStatus.FAILED:
        stack.push(failure_kind, f"{agent_name} failed: {result.content}", state.step, agent_name)
    else:
        content = result.content
        if result.status == AgentStatus.TOOL_BUDGET_EXHAUSTED:
            content = f"[incomplete: tool budget exhausted] {content}"
        stack.push(EntryKind.SUBAGENT_OUTPUT, content, state.step, agent_name)
        state.last_output = result.content
        if agent_name == agents.REPORT_AGENT and result.status == AgentStatus.OK:
            state.last_report = result.content
    return StepOutcome(
        f"delegate: {agent_name} {result.status.value} after {result.steps_taken} steps",
        agent_result=result,
        agent_name=agent_name,
    )


def _dispatch_finish(state: _RunState) -> StepOutcome:
    source = state.last_report or state.last_output
    if source is None:
        for entry in reversed(state.stack.entries):
            if entry.kind == EntryKind.SUBAGENT_OUTPUT:
                source = entry.content
                break
    answer = extract_final_answer(source) if source else ""
    return StepOutcome(f"finish: final answer {answer!r}", final_answer=answer)


def dispatch(decision: CoordinatorDecision, ctx: RuntimeContext, state: _RunState) -> StepOutcome:
    action = decision.action
    if action in (ActionKind.REFLECT, ActionKind.SUMMARIZE) and ctx.config.disable_revise:
        return StepOutcome(f"{action.value}: memory revision disabled, no-op")
    if action == ActionKind.PLAN:
        return _dispatch_plan(decision, state)
    if action == ActionKind.SUMMARIZE:
        return _dispatch_summarize(decision, state)
    if action == ActionKind.REFLECT:
        return _dispatch_reflect(decision, state)
    if action == ActionKind.DELEGATE:
        return _dispatch_delegate(decision, state, ctx)
    return _dispatch_finish(state)


# ---------------------------------------------------------------------------


def _memory_event(before: Sequence[int], stack: MemoryStack, step: int | None, phase: str) -> dict[str, Any]:
    before_set = set(before)
    after = stack.ids()
    after_set = set(after)
    return {
        "step": step,
        "phase": phase,
        "pushed": [{"id": e.id, "kind": e.kind.value, "source": e.source} for e in stack if e.id not in before_set],
        "removed": [i for i in before if i not in after_set],
        "length": len(stack),
    }


def _experience_summarizer(gateway: _RunGateway) -> Callable[[str], str]:
    def summarize(block: str) -> str:
        prompt = render_template(load_prompt("experience_summary.md"), {"experience_block": block})
        return gateway.chat([("system", prompt), ("user", "Summarize.")], purpose="experience").text
    return summarize


def run_task(task: TaskSpec, ctx: RuntimeContext) -> RunResult:
    """Run one task to completion, the step cap, or an unrecoverable error."""
    cfg = ctx.config
    stack = MemoryStack(cfg.token_budget)
    gateway = _RunGateway(ctx.gateway, cfg)
    state = _RunState(task, stack, gateway)
    stack.push(EntryKind.TASK_SPEC, task.render(), 0, "coordinator")

    use_experience = ctx.store is not None and not cfg.disable_experience
    if use_experience:
        before = stack.ids()
        retrieved = ctx.store.retrieve(ExperienceQuery(task.query, task.user_id, cfg.experience_top_k))
        try:
            inject(stack, retrieved, _experience_summarizer(gateway), step=0)
        except GatewayError as exc:
            logger.warning("experience summarization failed, injecting unsummarized block: %s", exc)
            inject(stack, retrieved, None, step=0)
        if ctx.trace:
            ctx.trace.memory(_memory_event(before, stack, None, "setup"))

    steps: list[StepRecord] = []
    last: CoordinatorDecision | None = None
    final_answer = ""
    error: str | None = None
    termination: Termination

    while True:
        verdict = should_terminate(state.step, task.max_steps, last)
        if verdict is not None:
            termination = verdict
            break
        started = ctx.clock()
        tokens_before = gateway.tokens_used
        len_before = len(stack)
        ids_before = stack.ids()
        try:
            decision = decide(stack, task, gateway, cfg, state.step, finish_allowed=state.delegations > 0)
            outcome = dispatch(decision, ctx, state)
        except (GatewayError, ParseFailure) as exc:
            termination = Termination.UNRECOVERABLE_ERROR
            error = f"{type(exc).__name__}: {exc}"
            logger.error("run aborted at step %d: %s", state.step, error)
            break
        wall_ms = 0 if ctx.deterministic else int(round((ctx.clock() - started) * 1000))
        record = StepRecord(state.step, decision, outcome.digest, len_before, len(stack),
                            gateway.tokens_used - tokens_before, wall_ms)
        steps.append(record)
        if ctx.trace:
            ctx.trace.step(record)
            ctx.trace.memory(_memory_event(ids_before, stack, state.step, "step"))
            if outcome.agent_result is not None:
                res = outcome.agent_result
                ctx.trace.agent({
                    "step": state.step,
                    "agent": outcome.agent_name,
                    "status": res.status.value,
                    "steps_taken": res.steps_taken,
                    "citations": list(res.citations),
                    "transcript": list(res.transcript),
                })
        if outcome.final_answer is not None:
            final_answer = outcome.final_answer
        last = decision
        state.step += 1

    if termination == Termination.FINISHED and use_experience and cfg.curate:
        _curate_best_effort(task, stack, ctx, gateway)

    return RunResult(final_answer, termination, steps, stack, error)


def _curate_best_effort(task: TaskSpec, stack: MemoryStack, ctx: RuntimeContext, gateway: _RunGateway) -> None:
    now = task.created_at if ctx.deterministic else datetime.now(timezone.utc)
    try:
        existing = ctx.store.get_or_empty(task.user_id)
        ctx.store.put(curate(stack, existing, now, gateway))
    except Exception as exc:  # noqa: BLE001 - curation must never fail the task
        logger.warning("experience curation skipped for %s: %s", task.user_id, exc)
