import json
from datetime import datetime, timezone

import pytest

from stackplanner.gateway import Gateway, ScriptedBackend
from stackplanner.runtime import (
    ActionKind,
    CoordinatorDecision,
    MissingField,
    ParseFailure,
    RuntimeConfig,
    RuntimeContext,
    TaskSpec,
    Termination,
    TraceWriter,
    UnknownAction,
    _RunGateway,
    _RunState,
    decide,
    dispatch,
    extract_final_answer,
    parse_decision,
    run_task,
    should_terminate,
    summarize_start,
)
from stackplanner.task_memory import EntryKind, MemoryStack
from stackplanner.tools import fixture_registry

T0 = datetime(2025, 1, 1, tzinfo=timezone.utc)

PLAN_DOC = {
    "action": "plan",
    "reasoning": "The user's query involves both technical and market analysis. Current memory stack is empty, "
                 "so I need to plan the first step.",
    "params": None,
    "instruction": "Reason about the next steps based on the current state",
    "locale": "en-US",
}
DELEGATE_DOC = {
    "action": "delegate",
    "reasoning": "I need to gather the latest market data on AI investments. The Researcher Agent is best suited "
                 "for this task.",
    "params": {
        "agent_type": "researcher",
        "task_description": "Search for global AI investment trends in 2025, focusing on ethical considerations",
    },
    "instruction": "Determine which sub-Agent to assign and define the task",
    "locale": "en-US",
}
SUMMARIZE_DOC = {
    "action": "summarize",
    "reasoning": "The research results are extensive. Summarizing key points will help in deciding the next steps.",
    "params": None,
    "instruction": "Condense the current information into a concise summary",
    "locale": "en-US",
}


def d(action, agent=None, desc="do it"):
    doc = {"action": action, "reasoning": f"{action} now", "params": None}
    if agent:
        doc["params"] = {"agent_type": agent, "task_description": desc}
    return json.dumps(doc)


def context(medical_dir, queues, **cfg):
    return RuntimeContext(
        gateway=Gateway(ScriptedBackend(queues)),
        tools=fixture_registry(medical_dir),
        config=RuntimeConfig(**cfg),
        deterministic=True,
    )


def task(query="What is the normal CSF pressure?", **kw):
    return TaskSpec(query, user_id="u1", created_at=T0, **kw)


# -- parsing


def test_parse_appendix_documents():
    plan = parse_decision(json.dumps(PLAN_DOC))
    assert plan.action == ActionKind.PLAN and plan.locale == "en-US" and plan.params is None
    delegate = parse_decision(json.dumps(DELEGATE_DOC))
    assert delegate.action == ActionKind.DELEGATE
    assert delegate.params["agent_type"] == "researcher"
    summarize = parse_decision(json.dumps(SUMMARIZE_DOC))
    assert summarize.action == ActionKind.SUMMARIZE and summarize.params is None
    finish = parse_decision(
        '{"action":"finish","reasoning":"done","params":null,"instruction":"Task completed","locale":"en-US"}'
    )
    assert finish.action == ActionKind.FINISH and finish.instruction == "Task completed"


def test_parse_failures():
    with pytest.raises(UnknownAction):
        parse_decision('{"action":"dance"}')
    with pytest.raises(ParseFailure):
        parse_decision("I think we should search next.")
    with pytest.raises(MissingField):
        parse_decision('{"action":"delegate","reasoning":"r","params":{"agent_type":"searcher"}}')
    with pytest.raises(MissingField):
        parse_decision('{"action":"plan"}')


def test_parse_tolerates_fences_and_case():
    raw = "Here you go:\n```json\n" + json.dumps(dict(PLAN_DOC, action="PLAN")) + "\n```"
    assert parse_decision(raw).action == ActionKind.PLAN


def test_decision_invariants():
    with pytest.raises(MissingField):
        CoordinatorDecision(ActionKind.DELEGATE, "r")
    with pytest.raises(ValueError):
        CoordinatorDecision(ActionKind.PLAN, "r", {"agent_type": "x", "task_description": "y"})


# -- decide


def _decide(replies, finish_allowed=True, max_reparse=2):
    gw = _RunGateway(Gateway(ScriptedBackend({"decision": replies})), RuntimeConfig(max_reparse=max_reparse))
    stack = MemoryStack()
    stack.push(EntryKind.TASK_SPEC, "task")
    return decide(stack, task(), gw, RuntimeConfig(max_reparse=max_reparse), finish_allowed=finish_allowed)


def test_decide_returns_appendix_plan():
    assert _decide([json.dumps(PLAN_DOC)]).locale == "en-US"


def test_decide_reprompts_then_fails():
    assert _decide(["prose", json.dumps(DELEGATE_DOC)]).action == ActionKind.DELEGATE
    with pytest.raises(ParseFailure):
        _decide(["prose", "more prose", "still prose"])


def test_decide_fills_locale_from_task():
    assert _decide([d("plan")]).locale == "en-US"


def test_finish_before_delegation_rejected():
    assert _decide([d("finish"), d("plan")], finish_allowed=False).action == ActionKind.PLAN


def test_should_terminate():
    finish = CoordinatorDecision(ActionKind.FINISH, "r")
    plan = CoordinatorDecision(ActionKind.PLAN, "r")
    delegate = CoordinatorDecision(ActionKind.DELEGATE, "r", {"agent_type": "a", "task_description": "b"})
    assert should_terminate(3, 25, finish) == Termination.FINISHED
    assert should_terminate(25, 25, plan) == Termination.STEP_CAP_REACHED
    assert should_terminate(3, 25, delegate) is None


def test_extract_final_answer():
    assert extract_final_answer("blah. Therefore, my answer is A.") == "A"
    assert extract_final_answer("Final answer: **Venice**") == "Venice"
    assert extract_final_answer("Bucharest") == "Bucharest"


# -- dispatch


def state_with(n, reflect_reply=None):
    stack = MemoryStack()
    stack.push(EntryKind.TASK_SPEC, "task")
    for i in range(n - 1):
        stack.push(EntryKind.SUBAGENT_OUTPUT, f"output {i}", source="searcher")
    queues = {"reflect": [reflect_reply] if reflect_reply else []}
    gw = _RunGateway(Gateway(ScriptedBackend(queues)), RuntimeConfig())
    return _RunState(task(), stack, gw)


def ctx_for(medical_dir, **cfg):
    return RuntimeContext(Gateway(ScriptedBackend([])), fixture_registry(medical_dir), config=RuntimeConfig(**cfg))


def test_reflect_prunes(medical_dir):
    state = state_with(5, '{"analysis": "off track", "pop_count": 2, "reasoning": "wrong source"}')
    dispatch(CoordinatorDecision(ActionKind.REFLECT, "r"), ctx_for(medical_dir), state)
    assert len(state.stack) == 4
    assert state.stack[3].kind == EntryKind.FAILURE_RECORD
    assert "wrong source" in state.stack[3].content


def test_reflect_pop_zero(medical_dir):
    state = state_with(5, '{"analysis": "all fine", "pop_count": 0, "reasoning": "keep"}')
    before = [e.id for e in state.stack]
    outcome = dispatch(CoordinatorDecision(ActionKind.REFLECT, "r"), ctx_for(medical_dir), state)
    assert [e.id for e in state.stack] == before
    assert "all fine" in outcome.digest


def test_reflect_bad_pop_count_ignored(medical_dir):
    for reply in ('{"pop_count": -1}', '{"pop_count": "two"}', '{"pop_count": 9}', "prose"):
        state = state_with(3, reply)
        dispatch(CoordinatorDecision(ActionKind.REFLECT, "r"), ctx_for(medical_dir), state)
        assert len(state.stack) == 3


def test_revise_disabled_is_noop(medical_dir):
    state = state_with(5)
    for action in (ActionKind.REFLECT, ActionKind.SUMMARIZE):
        outcome = dispatch(CoordinatorDecision(action, "r"), ctx_for(medical_dir, disable_revise=True), state)
        assert "disabled" in outcome.digest
    assert len(state.stack) == 5


def test_delegate_unknown_agent(medical_dir):
    state = state_with(1)
    decision = CoordinatorDecision(ActionKind.DELEGATE, "r", {"agent_type": "dancer", "task_description": "x"})
    dispatch(decision, ctx_for(medical_dir), state)
    assert state.stack.kinds()[-1] == EntryKind.FAILURE_RECORD
    dispatch(decision, ctx_for(medical_dir, disable_revise=True), state)
    assert state.stack.kinds()[-1] == EntryKind.SUBAGENT_OUTPUT


def test_delegate_search_pushes_hit_text(medical_dir):
    stack = MemoryStack()
    stack.push(EntryKind.TASK_SPEC, "task")
    search = ["<thought>t</thought><tool>web|CSF pressure standard lumbar puncture</tool>",
              "<thought>t</thought><answer>ranges from 80 to 180 mmH2O</answer>"]
    state = _RunState(task(), stack, _RunGateway(Gateway(ScriptedBackend({"search": search})), RuntimeConfig()))
    decision = CoordinatorDecision(ActionKind.DELEGATE, "r",
                                   {"agent_type": "searcher", "task_description": "find CSF pressure standard"})
    dispatch(decision, ctx_for(medical_dir), state)
    assert stack.kinds()[1:] == [EntryKind.SUBAGENT_INPUT, EntryKind.SUBAGENT_OUTPUT]
    assert "80 to 180 mmH2O" in stack[2].content
    assert stack[2].source == "search_agent"


def test_summarize_start_skips_protected_prefix():
    stack = MemoryStack()
    stack.push(EntryKind.TASK_SPEC, "t")
    stack.push(EntryKind.EXPERIENCE_INJECTION, "e")
    assert summarize_start(stack) == 3
    stack.push(EntryKind.SUBAGENT_OUTPUT, "o")
    stack.push(EntryKind.SUBAGENT_OUTPUT, "o2")
    stack.condense(3, "sum")
    stack.push(EntryKind.SUBAGENT_OUTPUT, "o3")
    assert summarize_start(stack) == 4


# -- full runs


def test_four_step_scripted_run(medical_dir):
    queues = {
        "decision": [d("delegate", "searcher", "find CSF pressure"), d("summarize"),
                     d("delegate", "reporter", "answer"), d("finish")],
        "search": ["<thought>t</thought><tool>web|CSF pressure lumbar puncture</tool>",
                   "<thought>t</thought><answer>80 to 180 mmH2O</answer>"],
        "summarize": ["Normal range is 80 to 180 mmH2O."],
        "report": ["The range is 80 to 180 mmH2O. Therefore, my answer is A."],
    }
    result = run_task(task(), context(medical_dir, queues))
    assert result.termination == Termination.FINISHED
    assert [s.decision.action for s in result.steps] == [
        ActionKind.DELEGATE, ActionKind.SUMMARIZE, ActionKind.DELEGATE, ActionKind.FINISH
    ]
    assert result.final_answer == "A"
    assert result.final_stack_snapshot.kinds() == [
        EntryKind.TASK_SPEC, EntryKind.CONDENSED, EntryKind.SUBAGENT_INPUT, EntryKind.SUBAGENT_OUTPUT
    ]


def test_step_cap(medical_dir):
    result = run_task(task(max_steps=1), context(medical_dir, {"decision": [d("plan")], "plan": ["think"]}))
    assert result.termination == Termination.STEP_CAP_REACHED
    assert result.final_answer == ""
    assert len(result.steps) == 1


def test_unrecoverable_on_parse_failures(medical_dir):
    result = run_task(task(), context(medical_dir, {"decision": ["a", "b", "c"]}))
    assert result.termination == Termination.UNRECOVERABLE_ERROR
    assert result.error.startswith("MalformedDocument")


def test_unrecoverable_on_exhausted_script(medical_dir):
    result = run_task(task(), context(medical_dir, {"decision": []}))
    assert result.termination == Termination.UNRECOVERABLE_ERROR


def medical_run(medical_dir, trace=None):
    script = json.loads((medical_dir / "script.json").read_text())
    query = (medical_dir / "query.txt").read_text().strip()
    ctx = context(medical_dir, script)
    ctx.trace = trace
    return run_task(task(query), ctx), script


def test_medical_qa_sequence(medical_dir):
    result, script = medical_run(medical_dir)
    assert result.termination == Termination.FINISHED
    assert [s.decision.action.value for s in result.steps] == [
        "plan", "delegate", "reflect", "delegate", "summarize", "delegate", "finish"
    ]
    assert result.final_answer == "A"
    assert any(s.decision.action == ActionKind.DELEGATE for s in result.steps)
    # steps are ordered and memory lengths chain
    assert [s.step for s in result.steps] == list(range(len(result.steps)))
    for prev, cur in zip(result.steps, result.steps[1:]):
        assert cur.memory_len_before == prev.memory_len_after
    assert result.steps[-1].memory_len_after == len(result.final_stack_snapshot)


def test_memory_decoupling(medical_dir):
    result, script = medical_run(medical_dir)
    thoughts = []
    for reply in script["search"]:
        thoughts += [part.split("</thought>")[0] for part in reply.split("<thought>")[1:]]
    for entry in result.final_stack_snapshot:
        assert entry.kind != EntryKind.SUBAGENT_OUTPUT or entry.source in ("search_agent", "report_agent")
        for thought in thoughts:
            assert thought not in entry.content


def test_trace_is_byte_identical(medical_dir, tmp_path):
    paths = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.jsonl"
        writer = TraceWriter(path)
        medical_run(medical_dir, writer)
        writer.close()
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    lines = [json.loads(line) for line in paths[0].read_text().splitlines()]
    assert all(line["wall_time_ms"] == 0 for line in lines)


def test_experience_injected_and_curated(medical_dir):
    from stackplanner.experience import ExperienceRecord, ExperienceStore

    store = ExperienceStore()
    store.put(ExperienceRecord("u1", semantic_memory=("normal CSF pressure is measured by lumbar puncture",)))
    script = json.loads((medical_dir / "script.json").read_text())
    curated = {"user_profiles": [], "semantic_memory": ["CSF range 80 to 180 mmH2O"], "procedural_memory": []}
    script["curate"] = [json.dumps(curated)]
    ctx = context(medical_dir, script)
    ctx.store = store
    result = run_task(task((medical_dir / "query.txt").read_text()), ctx)
    assert result.final_stack_snapshot.kinds()[:2] == [EntryKind.TASK_SPEC, EntryKind.EXPERIENCE_INJECTION]
    assert store.get("u1").semantic_memory[-1] == "CSF range 80 to 180 mmH2O"
    assert store.get("u1").updated_at == T0
