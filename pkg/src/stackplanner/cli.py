"""Command-line entry point: ``stackplanner <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import evaluation
from .config import ConfigError, Settings, load_settings
from .experience import ExperienceRecord, ExperienceStore, curate, load, record_from_store_doc
from .gateway import Gateway, GatewayError, RemoteBackend, ReplayBackend, ScriptedBackend, load_script
from .grpo import GrpoConfig, RewardScope, SyntheticCoordinationEnv, ToyPolicy, train_toy
from .runtime import RunResult, RuntimeConfig, RuntimeContext, TaskSpec, Termination, TraceWriter, run_task, sidecar
from .task_memory import MemoryStack
from .tools import ToolError, parse_tools_option

logger = logging.getLogger("stackplanner")

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_GATEWAY = 3
EXIT_DATASET = 4

# task timestamp used by deterministic runs unless --created-at is given
DETERMINISTIC_TIME = datetime(2025, 1, 1, tzinfo=timezone.utc)
SCRIPTED_BACKENDS = ("scripted", "replay")


# ---------------------------------------------------------------------------
# wiring


def make_gateway(settings: Settings, record_path: str | os.PathLike | None = None, script: Any = None) -> Gateway:
    gw = settings.section("gateway")
    backend_name = gw["backend"]
    if backend_name == "scripted":
        if script is None:
            if not gw["script"]:
                raise ConfigError("--backend scripted needs --script")
            script = load_script(gw["script"])
        backend = ScriptedBackend(script)
    elif backend_name == "replay":
        if not gw["fixture"]:
            raise ConfigError("--backend replay needs --fixture")
        if not Path(gw["fixture"]).exists():
            raise GatewayError(f"replay fixture not found: {gw['fixture']}")
        backend = ReplayBackend.from_file(gw["fixture"])
    elif backend_name == "remote":
        if not gw["base_url"]:
            raise ConfigError("remote backend needs gateway.base_url or STACKPLANNER_LLM_BASE_URL")
        backend = RemoteBackend(gw["base_url"], api_key=gw["api_key"], model=gw["model"],
                                timeout=gw["timeout"], max_attempts=gw["max_attempts"])
    else:
        raise ConfigError(f"unknown backend {backend_name!r}; use scripted, replay or remote")
    return Gateway(backend, record_path=record_path, model=gw["model"])


def make_tools(settings: Settings):
    tools = settings.section("tools")
    try:
        return parse_tools_option(tools["source"], tools["wiki_url"], tools["timeout"])
    except (ToolError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def make_runtime_config(settings: Settings, disable_revise: bool = False, disable_experience: bool = False) -> RuntimeConfig:
    rt, mem, gw = settings.section("runtime"), settings.section("memory"), settings.section("gateway")
    return RuntimeConfig(
        max_steps=rt["max_steps"],
        max_reparse=rt["max_reparse"],
        token_budget=mem["token_budget"],
        delegate_context_budget=rt["delegate_context_budget"],
        search_max_iters=rt["search_max_iters"],
        experience_top_k=mem["experience_top_k"],
        curate=rt["curate"],
        disable_revise=disable_revise,
        disable_experience=disable_experience,
        model=gw["model"],
        temperature=gw["temperature"],
    )


def _relative_source(source: str, base: Path) -> str:
    """Store fixture tool paths relative to the trace so golden runs can move."""
    if not source.startswith("fixture:"):
        return source
    target = Path(source[len("fixture:"):]).resolve()
    return "fixture:" + os.path.relpath(target, base.resolve())


def _absolute_source(source: str, base: Path) -> str:
    if not source.startswith("fixture:"):
        return source
    target = Path(source[len("fixture:"):])
    return "fixture:" + str(target if target.is_absolute() else base / target)


def _settings_from_args(args: argparse.Namespace, mapping: dict[tuple[str, str], str]) -> Settings:
    flags = {key: getattr(args, attr, None) for key, attr in mapping.items()}
    return load_settings(args.config, flags)


_COMMON_FLAGS = {
    ("gateway", "backend"): "backend",
    ("gateway", "script"): "script",
    ("gateway", "fixture"): "fixture",
    ("gateway", "model"): "model",
    ("tools", "source"): "tools",
    ("memory", "store"): "store",
    ("runtime", "max_steps"): "max_steps",
}


# ---------------------------------------------------------------------------
# run / replay


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_meta(trace: TraceWriter, task: TaskSpec, tools_source: str, runtime_cfg: RuntimeConfig,
                deterministic: bool, store: ExperienceStore | None, experience: ExperienceRecord | None,
                fixture: Path | None, result: RunResult) -> None:
    base = trace.path.parent
    trace.meta({
        "task": task.to_dict(),
        "tools": _relative_source(tools_source, base),
        "runtime": dataclasses.asdict(runtime_cfg),
        "deterministic": deterministic,
        "experience_store": store is not None,
        "experience": experience.to_dict() if experience is not None else None,
        "fixture": os.path.relpath(fixture.resolve(), base.resolve()) if fixture else None,
        "fixture_sha256": file_digest(fixture) if fixture else None,
        "final_answer": result.final_answer,
        "termination": result.termination.value,
    })


def cmd_run(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args, _COMMON_FLAGS)
    no_revise, no_experience = evaluation.parse_ablations(args.ablation)
    runtime_cfg = make_runtime_config(settings, no_revise, no_experience)
    deterministic = bool(args.deterministic or settings.get("runtime", "deterministic")
                         or settings.get("gateway", "backend") in SCRIPTED_BACKENDS)
    if args.created_at:
        created = datetime.fromisoformat(args.created_at)
    else:
        created = DETERMINISTIC_TIME if deterministic else datetime.now(timezone.utc)
    task = TaskSpec(args.query, args.user, args.locale, runtime_cfg.max_steps, created)

    record_path = args.record
    if record_path is None and args.trace:
        record_path = sidecar(args.trace, "fixture.jsonl")
    tools = make_tools(settings)
    store_dir = settings.get("memory", "store")
    store = ExperienceStore.open(store_dir) if store_dir else None
    snapshot = store.get(args.user) if store is not None else None
    gateway = make_gateway(settings, record_path)
    trace = TraceWriter(args.trace) if args.trace else None
    try:
        ctx = RuntimeContext(gateway, tools, store, runtime_cfg, trace, deterministic)
        result = run_task(task, ctx)
        if trace is not None:
            gateway.close()
            _write_meta(trace, task, settings.get("tools", "source"), runtime_cfg, deterministic, store, snapshot,
                        Path(record_path) if record_path else None, result)
    finally:
        gateway.close()
        if trace is not None:
            trace.close()

    print(f"termination: {result.termination.value}")
    print(f"answer: {result.final_answer}")
    print(f"steps: {len(result.steps)}")
    print(f"tokens: {gateway.tokens_used}")
    if result.error:
        print(f"error: {result.error}")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "final_answer": result.final_answer,
            "termination": result.termination.value,
            "steps": [s.to_trace() for s in result.steps],
            "final_stack": result.final_stack_snapshot.to_dict(),
            "error": result.error,
        }, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return EXIT_GATEWAY if result.termination == Termination.UNRECOVERABLE_ERROR else EXIT_OK


def _first_difference(expected: list[str], actual: list[str]) -> tuple[int, str, str] | None:
    for i in range(max(len(expected), len(actual))):
        a = expected[i] if i < len(expected) else "<end of file>"
        b = actual[i] if i < len(actual) else "<end of file>"
        if a != b:
            return i + 1, a, b
    return None


def cmd_replay(args: argparse.Namespace) -> int:
    trace_path = Path(args.trace)
    meta_path = sidecar(trace_path, "meta.json")
    if not trace_path.exists() or not meta_path.exists():
        print(f"replay needs {trace_path} and {meta_path}", file=sys.stderr)
        return EXIT_CONFIG
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    recorded = meta.get("fixture")
    if args.fixture:
        fixture = Path(args.fixture)
    elif recorded:
        fixture = trace_path.parent / recorded
    else:
        fixture = sidecar(trace_path, "fixture.jsonl")
    if not fixture.is_file():
        print(f"gateway fixture not found: {fixture}", file=sys.stderr)
        return EXIT_GATEWAY

    task = TaskSpec.from_dict(meta["task"])
    runtime_cfg = RuntimeConfig(**meta["runtime"])
    try:
        tools = parse_tools_option(_absolute_source(meta["tools"], trace_path.parent))
    except (ToolError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    store = ExperienceStore() if meta.get("experience_store") else None
    if store is not None and meta.get("experience"):
        store.put(record_from_store_doc(meta["experience"]))
    gateway = Gateway(ReplayBackend.from_file(fixture, strict=True))

    with tempfile.TemporaryDirectory() as tmp:
        regenerated = Path(tmp) / trace_path.name
        trace = TraceWriter(regenerated)
        try:
            result = run_task(task, RuntimeContext(gateway, tools, store, runtime_cfg, trace, meta["deterministic"]))
        finally:
            trace.close()
        expected = trace_path.read_text(encoding="utf-8").splitlines()
        actual = regenerated.read_text(encoding="utf-8").splitlines()

    diff = _first_difference(expected, actual)
    if diff is None and result.final_answer != meta.get("final_answer", result.final_answer):
        diff = (0, f"final answer {meta['final_answer']!r}", f"final answer {result.final_answer!r}")
    if diff is not None:
        line, a, b = diff
        print(f"replay differs at line {line}:")
        print(f"- {a}")
        print(f"+ {b}")
        if result.error:
            print(f"run error: {result.error}")
        return EXIT_MISMATCH
    # edits that leave every parsed decision unchanged cannot show up in the
    # regenerated trace, so the fixture itself is checked against the recording
    expected_digest = meta.get("fixture_sha256")
    if expected_digest and file_digest(fixture) != expected_digest:
        print(f"replay trace identical, but the fixture differs from the recorded one: {fixture}")
        return EXIT_MISMATCH
    print(f"replay identical: {len(expected)} trace lines, answer {result.final_answer!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _script_for(script_path: str | None, example_id: str):
    """Per-example script from ``<dir>/<id>.json``, else the shared script."""
    if script_path is None:
        return None
    path = Path(script_path)
    if path.is_dir():
        own = evaluation.trace_path_for(path, example_id).with_suffix(".json")
        if own.exists():
            return load_script(own)
    return load_script(path)


def cmd_eval(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args, _COMMON_FLAGS)
    try:
        dataset = evaluation.load_dataset(args.dataset, args.format)
    except evaluation.DatasetParseError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    no_revise, no_experience = evaluation.parse_ablations(args.ablation)
    runtime_cfg = make_runtime_config(settings)
    deterministic = bool(settings.get("runtime", "deterministic") or settings.get("gateway", "backend") in SCRIPTED_BACKENDS)
    tools = make_tools(settings)
    store_dir = settings.get("memory", "store")
    script_path = settings.get("gateway", "script")
    scripted = settings.get("gateway", "backend") == "scripted"
    if scripted and not script_path:
        raise ConfigError("--backend scripted needs --script")
    if not scripted:
        make_gateway(settings).close()  # surface configuration problems before the first example

    def run_with_fresh_store(cfg: evaluation.EvalConfig) -> evaluation.EvalReport:
        # experience is updated in memory only, so every setting starts from the same store
        store = load(store_dir) if store_dir else None

        def factory(example: evaluation.QaExample) -> RuntimeContext:
            script = _script_for(script_path, example.id) if scripted else None
            return RuntimeContext(make_gateway(settings, script=script), tools, store, runtime_cfg,
                                  deterministic=deterministic)

        return evaluation.run_eval(dataset, factory, cfg)

    base = evaluation.EvalConfig(no_revise, no_experience, args.limit, args.seed, args.jobs, args.trace_dir)
    if args.sweep:
        reports = {}
        for label, nr, ne in evaluation.SWEEP:
            trace_dir = None if args.trace_dir is None else str(Path(args.trace_dir) / label.replace(",", "+"))
            reports[label] = run_with_fresh_store(dataclasses.replace(
                base, disable_task_memory_revise=nr, disable_experience_memory=ne, trace_dir=trace_dir))
        for label, report in reports.items():
            agg = report.aggregates
            print(f"{label:<24} F1 {agg['mean_f1']:.4f}  EM {agg['mean_em']:.4f}  finished {agg['finished_rate']:.2f}")
        if args.out:
            Path(args.out).write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2) + "\n",
                                      encoding="utf-8")
        if args.plot:
            from .plotting import plot_ablation

            plot_ablation({k: r.aggregates for k, r in reports.items()}, args.plot)
        return EXIT_OK

    report = run_with_fresh_store(base)
    agg = report.aggregates
    print(f"examples: {len(report.rows)} ({base.label})")
    print(f"mean_f1: {agg['mean_f1']:.4f}")
    print(f"mean_em: {agg['mean_em']:.4f}")
    print(f"finished_rate: {agg['finished_rate']:.4f}")
    for ident, err in report.failures.items():
        print(f"failed {ident}: {err}")
    if args.out:
        report.write(args.out)
    if args.plot:
        from .plotting import plot_f1_histogram

        plot_f1_histogram([r.f1 for r in report.rows], args.plot, base.label)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experience


def cmd_experience_show(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args, {("memory", "store"): "store"})
    store_dir = settings.get("memory", "store")
    if not store_dir:
        raise ConfigError("experience show needs --store")
    record = load(store_dir).get(args.user)
    if record is None:
        print(f"no experience stored for {args.user!r}")
        return EXIT_OK
    text = json.dumps(record.to_dict(), indent=2, ensure_ascii=False)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_experience_curate(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args, _COMMON_FLAGS)
    store_dir = settings.get("memory", "store")
    if not store_dir:
        raise ConfigError("experience curate needs --store")
    doc = json.loads(Path(args.stack).read_text(encoding="utf-8"))
    # accept a bare stack snapshot or a `run --out` result document
    stack = MemoryStack.from_dict(doc.get("final_stack", doc))
    store = ExperienceStore.open(store_dir)
    now = datetime.fromisoformat(args.now) if args.now else datetime.now(timezone.utc)
    gateway = make_gateway(settings)
    try:
        record = curate(stack, store.get_or_empty(args.user), now, gateway, strict=args.strict)
    finally:
        gateway.close()
    store.put(record)
    print(json.dumps(record.to_dict(), indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_experience_clear(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args, {("memory", "store"): "store"})
    store_dir = settings.get("memory", "store")
    if not store_dir:
        raise ConfigError("experience clear needs --store")
    store = ExperienceStore.open(store_dir)
    if args.user:
        removed = store.remove(args.user)
        print(f"removed experience for {args.user!r}" if removed else f"no experience stored for {args.user!r}")
    else:
        count = len(store)
        store.clear()
        print(f"removed experience for {count} user(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grpo


def cmd_grpo_demo(args: argparse.Namespace) -> int:
    settings = _settings_from_args(args, {
        ("grpo", "seed"): "seed",
        ("grpo", "iterations"): "iterations",
        ("grpo", "group_size"): "group_size",
        ("grpo", "epsilon"): "epsilon",
        ("grpo", "beta"): "beta",
        ("grpo", "scope"): "scope",
        ("grpo", "step_size"): "step_size",
    })
    g = settings.section("grpo")
    try:
        cfg = GrpoConfig(epsilon=g["epsilon"], beta=g["beta"], group_size=g["group_size"],
                         reward_stat_scope=RewardScope(g["scope"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if g["iterations"] < 0:
        raise ConfigError("iterations must be >= 0")
    env = SyntheticCoordinationEnv()
    result = train_toy(env, cfg, g["seed"], g["iterations"], step_size=g["step_size"])
    baseline = env.expected_reward(ToyPolicy.uniform(env).logits)
    print(f"uniform baseline: {baseline:.4f}")
    print(f"final mean reward: {result.tail_mean():.4f} (last 10 iterations)")
    print(f"expected reward of final policy: {result.final_expected_reward:.4f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "mean_reward"])
            for i, value in enumerate(result.curve):
                writer.writerow([i, repr(value)])
    if args.plot:
        from .plotting import plot_learning_curve

        plot_learning_curve(result.curve, args.plot, baseline)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("scripted", "replay", "remote"), help="model backend (default: remote)")
    p.add_argument("--script", help="scripted responses: JSON list, purpose-keyed JSON map, JSONL, or a directory")
    p.add_argument("--fixture", help="recorded gateway fixture for --backend replay")
    p.add_argument("--model", help="model name sent to the backend")


def _add_runtime_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tools", help="search tools: 'remote' or 'fixture:<path>'")
    p.add_argument("--store", help="experience store directory")
    p.add_argument("--max-steps", type=int, help="coordinator step cap (default 25)")
    p.add_argument("--ablation", default="", help="comma list of no-revise, no-experience")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML or JSON config file")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads for eval")

    parser = argparse.ArgumentParser(prog="stackplanner", description="Stack-memory multi-agent planner.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("run", parents=[common], help="answer one query")
    p.add_argument("--query", required=True)
    p.add_argument("--user", default="anonymous")
    p.add_argument("--locale", default="en-US")
    _add_backend_flags(p)
    _add_runtime_flags(p)
    p.add_argument("--trace", help="write the step trace (JSONL) plus sidecars here")
    p.add_argument("--record", help="gateway fixture to record (default: <trace>.fixture.jsonl)")
    p.add_argument("--deterministic", action="store_true", help="zero wall times and a fixed task timestamp")
    p.add_argument("--created-at", help="ISO timestamp for the task")
    p.add_argument("--out", help="write the run result as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="score a QA dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", default="generic", choices=[f.value for f in evaluation.DatasetFormat])
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_backend_flags(p)
    _add_runtime_flags(p)
    p.add_argument("--sweep", action="store_true", help="run full, no-revise, no-experience and both")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--trace-dir", help="one trace per example")
    p.add_argument("--plot", help="F1 histogram (or ablation bars with --sweep) as an image")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experience", parents=[common], help="inspect or edit the experience store")
    esub = p.add_subparsers(dest="experience_command", metavar="action")
    esub.required = True
    e = esub.add_parser("show", parents=[common], help="print a user's record")
    e.add_argument("--store")
    e.add_argument("--user", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_experience_show)
    e = esub.add_parser("curate", parents=[common], help="curate experience from a saved stack")
    e.add_argument("--store")
    e.add_argument("--user", required=True)
    e.add_argument("--stack", required=True, help="stack snapshot JSON or a `run --out` document")
    e.add_argument("--now", help="ISO timestamp recorded as updated_at")
    e.add_argument("--strict", action="store_true", help="fail instead of keeping the old record")
    _add_backend_flags(e)
    e.set_defaults(func=cmd_experience_curate)
    e = esub.add_parser("clear", parents=[common], help="delete stored experience")
    e.add_argument("--store")
    e.add_argument("--user", help="only this user (default: everyone)")
    e.set_defaults(func=cmd_experience_clear)

    p = sub.add_parser("replay", parents=[common], help="re-run a trace against its recorded fixture")
    p.add_argument("trace")
    p.add_argument("--fixture", help="override the fixture path (default: <trace>.fixture.jsonl)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("grpo-demo", parents=[common], help="train the toy coordination policy")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--scope", choices=("token", "trajectory"))
    p.add_argument("--step-size", type=float)
    p.add_argument("--out", help="learning curve CSV (iteration,mean_reward)")
    p.add_argument("--plot", help="learning curve image")
    p.set_defaults(func=cmd_grpo_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("verbose", False), ("jobs", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except evaluation.DatasetParseError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except GatewayError as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
