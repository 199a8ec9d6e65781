"""Multi-hop QA datasets, scoring, and the benchmark/ablation harness."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import enum
import json
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

from .metrics import exact_match, normalize_answer, token_f1
from .runtime import RuntimeContext, TaskSpec, Termination, TraceWriter, run_task

logger = logging.getLogger(__name__)

__all__ = [
    "DatasetFormat",
    "DatasetParseError",
    "EvalConfig",
    "EvalReport",
    "EvalRow",
    "QaExample",
    "ABLATIONS",
    "exact_match",
    "load_dataset",
    "normalize_answer",
    "parse_ablations",
    "run_ablation_sweep",
    "run_eval",
    "token_f1",
]


class DatasetParseError(ValueError):
    def __init__(self, path: str | os.PathLike, line: int, reason: str):
        super().__init__(f"{path}: line {line}: {reason}")
        self.path = str(path)
        self.line = line


class DatasetFormat(str, enum.Enum):
    TWOWIKI = "twowiki"
    MUSIQUE = "musique"
    GAIA = "gaia"
    FRAMES = "frames"
    GENERIC = "generic"


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.gold_answers:
            raise ValueError(f"example {self.id!r} has no gold answers")
        if not self.question.strip():
            raise ValueError(f"example {self.id!r} has an empty question")


# ---------------------------------------------------------------------------
# loading


def _answers(*candidates: Any) -> list[str]:
    out: list[str] = []
    for value in candidates:
        if value is None:
            continue
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            text = str(item).strip()
            if text and text not in out:
                out.append(text)
    return out


def _generic(row: Mapping[str, Any]) -> QaExample | None:
    return QaExample(str(row["id"]), row["question"], _answers(row["answers"]),
                     {k: v for k, v in row.items() if k not in ("id", "question", "answers")})


def _twowiki(row: Mapping[str, Any]) -> QaExample | None:
    meta = {"type": row.get("type")}
    if "evidences" in row:
        meta["evidences"] = row["evidences"]
    return QaExample(str(row.get("_id", row.get("id"))), row["question"],
                     _answers(row["answer"], row.get("answer_aliases")), meta)


def _musique(row: Mapping[str, Any]) -> QaExample | None:
    meta = {"answerable": row.get("answerable", True)}
    return QaExample(str(row["id"]), row["question"], _answers(row["answer"], row.get("answer_aliases")), meta)


def _gaia(row: Mapping[str, Any]) -> QaExample | None:
    if row.get("file_name"):
        return None  # attachments need modalities we do not support
    level = row.get("Level", row.get("level"))
    return QaExample(str(row.get("task_id", row.get("id"))), row.get("Question", row.get("question")),
                     _answers(row.get("Final answer", row.get("answer"))), {"level": level})


def _frames(row: Mapping[str, Any]) -> QaExample | None:
    ident = row.get("id", row.get("Unnamed: 0", row.get("")))
    meta = {"reasoning_types": row.get("reasoning_types", "")}
    if row.get("wiki_links"):
        meta["wiki_links"] = row["wiki_links"]
    return QaExample(str(ident), row.get("Prompt", row.get("question")), _answers(row.get("Answer", row.get("answer"))),
                     meta)


_ADAPTERS: dict[DatasetFormat, Callable[[Mapping[str, Any]], QaExample | None]] = {
    DatasetFormat.GENERIC: _generic,
    DatasetFormat.TWOWIKI: _twowiki,
    DatasetFormat.MUSIQUE: _musique,
    DatasetFormat.GAIA: _gaia,
    DatasetFormat.FRAMES: _frames,
}


def _json_rows(path: Path) -> Iterator[tuple[int, Any]]:
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(path, exc.lineno, f"invalid JSON ({exc.msg})") from exc
        # arrays have no per-row lines; number rows from 1
        yield from enumerate(rows, start=1)
        return
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(path, lineno, f"invalid JSON ({exc.msg})") from exc


def _csv_rows(path: Path) -> Iterator[tuple[int, Any]]:
    with open(path, encoding="utf-8", newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        delimiter = "\t" if sample.count("\t") > sample.count(",") else ","
        reader = csv.DictReader(fh, delimiter=delimiter)
        for row in reader:
            yield reader.line_num, row


def load_dataset(path: str | os.PathLike, format: str | DatasetFormat = DatasetFormat.GENERIC) -> list[QaExample]:
    """Read a dataset file into :class:`QaExample` rows.

    JSON arrays and JSONL are accepted for every format; FRAMES also reads
    its CSV/TSV release. GAIA rows with an attached file are skipped.
    """
    fmt = DatasetFormat(format)
    path = Path(path)
    if not path.exists():
        raise DatasetParseError(path, 0, "file not found")
    adapter = _ADAPTERS[fmt]
    tabular = fmt == DatasetFormat.FRAMES and path.suffix.lower() in (".csv", ".tsv")
    rows = _csv_rows(path) if tabular else _json_rows(path)
    examples: list[QaExample] = []
    seen: set[str] = set()
    for lineno, row in rows:
        if not isinstance(row, Mapping):
            raise DatasetParseError(path, lineno, "expected an object")
        try:
            example = adapter(row)
        except KeyError as exc:
            raise DatasetParseError(path, lineno, f"missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError, AttributeError) as exc:
            raise DatasetParseError(path, lineno, str(exc)) from exc
        if example is None:
            continue
        if example.id in seen:
            raise DatasetParseError(path, lineno, f"duplicate id {example.id!r}")
        seen.add(example.id)
        examples.append(example)
    return examples


# ---------------------------------------------------------------------------
# running


ABLATIONS = ("no-revise", "no-experience")


@dataclass(frozen=True)
class EvalConfig:
    disable_task_memory_revise: bool = False
    disable_experience_memory: bool = False
    limit: int | None = None
    seed: int = 0
    jobs: int = 1
    trace_dir: str | None = None

    def __post_init__(self):
        if self.limit is not None and self.limit < 0:
            raise ValueError("limit must be >= 0")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @property
    def label(self) -> str:
        flags = [name for name, on in zip(ABLATIONS, (self.disable_task_memory_revise,
                                                        self.disable_experience_memory)) if on]
        return ",".join(flags) or "full"


def parse_ablations(value: str | None) -> tuple[bool, bool]:
    """``"no-revise,no-experience"`` -> (disable_revise, disable_experience)."""
    names = {part.strip() for part in (value or "").split(",") if part.strip()}
    unknown = names - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation(s): {', '.join(sorted(unknown))}; choose from {', '.join(ABLATIONS)}")
    return "no-revise" in names, "no-experience" in names


@dataclass(frozen=True)
class EvalRow:
    id: str
    prediction: str
    f1: float
    em: int
    steps: int
    termination: str

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


ERROR_TERMINATION = "Error"


@dataclass
class EvalReport:
    rows: list[EvalRow]
    failures: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.id)

    @property
    def aggregates(self) -> dict[str, float]:
        n = len(self.rows)
        if n == 0:
            return {"mean_f1": 0.0, "mean_em": 0.0, "finished_rate": 0.0}
        return {
            "mean_f1": sum(r.f1 for r in self.rows) / n,
            "mean_em": sum(r.em for r in self.rows) / n,
            "finished_rate": sum(r.termination == Termination.FINISHED.value for r in self.rows) / n,
        }

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"rows": [r.to_dict() for r in self.rows], "aggregates": self.aggregates}
        if self.failures:
            doc["failures"] = dict(sorted(self.failures.items()))
        return doc

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EvalReport":
        return cls([EvalRow(**row) for row in doc["rows"]], dict(doc.get("failures", {})))


# fixed task timestamp for deterministic runs, so prompts are reproducible
_EVAL_EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)

ContextSource = RuntimeContext | Callable[[QaExample], RuntimeContext]

_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]")


def trace_path_for(trace_dir: str | os.PathLike, example_id: str) -> Path:
    return Path(trace_dir) / f"{_UNSAFE.sub('_', example_id)}.jsonl"


def _evaluate_one(example: QaExample, source: ContextSource, cfg: EvalConfig) -> tuple[EvalRow, str | None]:
    trace = None
    try:
        ctx = source(example) if callable(source) else source
        runtime_cfg = dataclasses.replace(
            ctx.config,
            disable_revise=ctx.config.disable_revise or cfg.disable_task_memory_revise,
            disable_experience=ctx.config.disable_experience or cfg.disable_experience_memory,
        )
        if cfg.trace_dir:
            trace = TraceWriter(trace_path_for(cfg.trace_dir, example.id))
        ctx = dataclasses.replace(ctx, config=runtime_cfg, trace=trace)
        user = str(example.metadata.get("user_id", "eval"))
        task = TaskSpec(example.question, user_id=user, max_steps=runtime_cfg.max_steps)
        if ctx.deterministic:
            task = dataclasses.replace(task, created_at=_EVAL_EPOCH)
        result = run_task(task, ctx)
    except Exception as exc:  # noqa: BLE001 - one bad example must not abort the run
        logger.warning("example %s failed: %s", example.id, exc)
        return EvalRow(example.id, "", 0.0, 0, 0, ERROR_TERMINATION), f"{type(exc).__name__}: {exc}"
    finally:
        if trace is not None:
            trace.close()
    pred = result.final_answer
    row = EvalRow(example.id, pred, token_f1(pred, example.gold_answers), exact_match(pred, example.gold_answers),
                  len(result.steps), result.termination.value)
    return row, result.error


def run_eval(dataset: Sequence[QaExample], ctx: ContextSource, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Run every example (up to ``cfg.limit``) and score the final answers.

    ``ctx`` is either one shared context or a factory building an isolated
    context per example; ``cfg.jobs > 1`` requires the factory form.
    """
    examples = list(dataset if cfg.limit is None else dataset[: cfg.limit])
    if cfg.trace_dir:
        Path(cfg.trace_dir).mkdir(parents=True, exist_ok=True)
    if cfg.jobs > 1 and not callable(ctx):
        raise ValueError("concurrent evaluation needs a per-example context factory")
    if cfg.jobs == 1:
        outcomes = [_evaluate_one(ex, ctx, cfg) for ex in examples]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(lambda ex: _evaluate_one(ex, ctx, cfg), examples))
    rows = [row for row, _ in outcomes]
    failures = {row.id: err for row, err in outcomes if err and row.termination != Termination.FINISHED.value}
    report = EvalReport(rows, failures)
    agg = report.aggregates
    logger.info("evaluated %d examples: F1 %.4f, EM %.4f", len(rows), agg["mean_f1"], agg["mean_em"])
    return report


SWEEP = (
    ("full", False, False),
    ("no-revise", True, False),
    ("no-experience", False, True),
    ("no-revise,no-experience", True, True),
)


def run_ablation_sweep(
    dataset: Sequence[QaExample],
    ctx: ContextSource,
    base: EvalConfig = EvalConfig(),
    settings: Iterable[tuple[str, bool, bool]] = SWEEP,
) -> dict[str, EvalReport]:
    """Run the full system and each memory ablation on the same examples."""
    reports = {}
    for label, no_revise, no_experience in settings:
        trace_dir = None if base.trace_dir is None else str(Path(base.trace_dir) / label.replace(",", "+"))
        cfg = dataclasses.replace(base, disable_task_memory_revise=no_revise,
                                  disable_experience_memory=no_experience, trace_dir=trace_dir)
        reports[label] = run_eval(dataset, ctx, cfg)
    return reports
