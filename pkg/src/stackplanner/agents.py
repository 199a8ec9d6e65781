"""Sub-agents with private contexts.

A sub-agent receives a :class:`SubTask` and hands back an :class:`AgentResult`;
its working transcript never reaches the coordinator's memory stack.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .experience import ExperienceQuery, ExperienceStore, format_experience
from .gateway import Gateway, GatewayError
from .templates import load_prompt, render_template
from .tools import ToolCall, ToolRegistry, execute_tool

DEFAULT_MAX_ITERS = 6
NO_EXPERIENCE = "no relevant prior experience"
INSUFFICIENT_CONTEXT = "insufficient context"


class AgentStatus(str, enum.Enum):
    OK = "Ok"
    TOOL_BUDGET_EXHAUSTED = "ToolBudgetExhausted"
    FAILED = "Failed"


@dataclass(frozen=True)
class SubTask:
    agent_type: str
    description: str
    context: str = ""
    locale: str = "en-US"

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError("subtask description must be non-empty")


@dataclass(frozen=True)
class ReactStep:
    thought: str
    tool_call: ToolCall | None = None
    observation: str | None = None
    answer: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "thought": self.thought,
            "tool": None if self.tool_call is None else {"tool": self.tool_call.tool, "args": dict(self.tool_call.args)},
            "observation": self.observation,
            "answer": self.answer,
        }


@dataclass(frozen=True)
class AgentResult:
    status: AgentStatus
    content: str
    citations: tuple[str, ...] = ()
    steps_taken: int = 0
    # private working record, kept for debug traces only
    transcript: tuple[dict[str, Any], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.status == AgentStatus.OK and not self.content.strip():
            raise ValueError("an Ok result needs content")


_TAG = re.compile(r"<(thought|tool|answer)>(.*?)</\1>", re.DOTALL | re.IGNORECASE)


def parse_react_reply(reply: str) -> ReactStep | None:
    """Parse one tagged agent reply. Returns None if it has no tool or answer."""
    found: dict[str, str] = {}
    for tag, body in _TAG.findall(reply):
        found.setdefault(tag.lower(), body.strip())
    thought = found.get("thought", "")
    if "tool" in found:
        name, _, query = found["tool"].partition("|")
        return ReactStep(thought, ToolCall(name.strip(), {"query": query.strip()}))
    if "answer" in found and found["answer"]:
        return ReactStep(thought, answer=found["answer"])
    return None


def run_search_agent(
    subtask: SubTask,
    tools: ToolRegistry,
    gateway: Gateway,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> AgentResult:
    """ReAct loop: thought, tool call, observation, until an answer or the cap."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    system = render_template(
        load_prompt("search_agent.md"),
        {"task_description": subtask.description, "context": subtask.context, "locale": subtask.locale},
    )
    messages: list[tuple[str, str]] = [("system", system), ("user", subtask.description)]
    steps: list[ReactStep] = []
    citations: list[str] = []
    observations: list[str] = []
    tool_calls = 0

    for i in range(1, max_iters + 1):
        try:
            reply = gateway.chat(messages, purpose="search").text
        except GatewayError as exc:
            return AgentResult(AgentStatus.FAILED, f"search agent failed: {exc}", tuple(citations), i,
                               tuple(s.to_dict() for s in steps))
        messages.append(("assistant", reply))
        step = parse_react_reply(reply)
        if step is None:
            feedback = "format error: reply with <thought> and one <tool> or <answer> block"
            steps.append(ReactStep(reply.strip(), observation=feedback))
        elif step.answer is not None:
            if tool_calls == 0:
                feedback = "tool error: search with a tool before answering"
                steps.append(ReactStep(step.thought, observation=feedback))
            else:
                steps.append(step)
                return AgentResult(AgentStatus.OK, step.answer, tuple(citations), i,
                                   tuple(s.to_dict() for s in steps))
        else:
            tool_calls += 1
            feedback, hits = execute_tool(step.tool_call, tools)
            for hit in hits:
                ref = hit.url or hit.title
                if ref and ref not in citations:
                    citations.append(ref)
            observations.append(feedback)
            steps.append(ReactStep(step.thought, step.tool_call, feedback))
        messages.append(("user", feedback))

    partial = "\n".join(observations) or "no observations collected"
    return AgentResult(
        AgentStatus.TOOL_BUDGET_EXHAUSTED,
        f"search budget of {max_iters} steps exhausted; partial findings:\n{partial}",
        tuple(citations),
        max_iters,
        tuple(s.to_dict() for s in steps),
    )


_STRUCTURED_KEYWORDS = ("report", "outline")
_SECTION = re.compile(r"^\s*(?:#+|\d+[.)]|[-*])\s*(.+?)\s*$")


def wants_structured_report(description: str) -> bool:
    text = description.lower()
    return any(word in text for word in _STRUCTURED_KEYWORDS)


def parse_outline(text: str) -> list[str]:
    titles = []
    for line in text.splitlines():
        m = _SECTION.match(line)
        if m and m.group(1):
            titles.append(m.group(1))
    return titles


def run_report_agent(subtask: SubTask, gateway: Gateway) -> AgentResult:
    """Answer mode (one call) or structured mode (outline, then one call per section)."""
    variables = {"task_description": subtask.description, "context": subtask.context, "locale": subtask.locale}
    transcript: list[dict[str, Any]] = []
    try:
        if wants_structured_report(subtask.description):
            outline = gateway.chat([("system", render_template(load_prompt("report_outline.md"), variables)),
                                    ("user", subtask.description)], purpose="report").text
            transcript.append({"outline": outline})
            titles = parse_outline(outline) or ["Report"]
            sections = []
            for title in titles:
                prompt = render_template(load_prompt("report_section.md"), {**variables, "section_title": title})
                body = gateway.chat([("system", prompt), ("user", title)], purpose="report").text.strip()
                transcript.append({"section": title, "body": body})
                sections.append(f"## {title}\n{body}")
            return AgentResult(AgentStatus.OK, "\n\n".join(sections), (), 1 + len(titles), tuple(transcript))

        if not subtask.context.strip():
            return AgentResult(AgentStatus.OK, f"{INSUFFICIENT_CONTEXT}: no evidence was delegated for "
                                               f"{subtask.description!r}", (), 0)
        prompt = render_template(load_prompt("report_answer.md"), variables)
        answer = gateway.chat([("system", prompt), ("user", subtask.description)], purpose="report").text.strip()
        transcript.append({"answer": answer})
    except GatewayError as exc:
        return AgentResult(AgentStatus.FAILED, f"report agent failed: {exc}", (), len(transcript), tuple(transcript))
    if not answer:
        return AgentResult(AgentStatus.FAILED, "report agent returned an empty answer", (), 1, tuple(transcript))
    return AgentResult(AgentStatus.OK, answer, (), 1, tuple(transcript))


def run_experience_search_agent(
    task_text: str,
    user_id: str,
    store: ExperienceStore | None,
    top_k: int = 5,
) -> AgentResult:
    """Look up prior experience for this user and task."""
    if store is None:
        return AgentResult(AgentStatus.OK, NO_EXPERIENCE)
    retrieved = store.retrieve(ExperienceQuery(task_text, user_id, top_k))
    if not retrieved:
        return AgentResult(AgentStatus.OK, NO_EXPERIENCE)
    return AgentResult(AgentStatus.OK, format_experience(retrieved), steps_taken=1)


# agent_type aliases accepted from coordinator decisions
SEARCH_AGENT = "search_agent"
REPORT_AGENT = "report_agent"
REPLANNER = "replanner"

AGENT_ALIASES: Mapping[str, str] = {
    "search": SEARCH_AGENT,
    "searcher": SEARCH_AGENT,
    "search_agent": SEARCH_AGENT,
    "researcher": SEARCH_AGENT,
    "research_agent": SEARCH_AGENT,
    "report": REPORT_AGENT,
    "reporter": REPORT_AGENT,
    "report_agent": REPORT_AGENT,
    "writer": REPORT_AGENT,
    "replanner": REPLANNER,
}

AGENT_DESCRIPTIONS = (
    "searcher: gathers evidence with wiki and web search (ReAct loop); "
    "reporter: answers the query or writes a structured report from delegated context; "
    "replanner: decomposes the query into search steps (only at the start)."
)


def resolve_agent(agent_type: str) -> str | None:
    key = re.sub(r"[\s-]+", "_", agent_type.strip().lower())
    return AGENT_ALIASES.get(key)
