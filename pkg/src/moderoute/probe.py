"""Probe questions k times per mode and compute Thinking Density.

Thinking Density of a (question, mode) pair is

    accuracy / avg_tokens ** alpha

where accuracy is the fraction of the k runs graded correct and avg_tokens
the mean completion length of those runs.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .backend import Backend, Completion
from .errors import InputError, ParseError, RequestError, TransportError, VersionMismatchError
from .grading import TaskType, grade, validate_gold
from .modes import MODES, TemplateSet, ThinkingMode, assemble_prompt, load_template_set

__all__ = [
    "Question",
    "RunResult",
    "ProbeRecord",
    "DensityParams",
    "NEG_INF",
    "PROBE_LOG_VERSION",
    "read_questions",
    "parse_question",
    "probe_question",
    "probe_questions",
    "thinking_density",
    "log_density",
    "read_probe_log",
    "write_probe_log",
    "iter_jsonl",
    "text_digest",
    "check_version",
]

PROBE_LOG_VERSION = 1

#: log-density of a zero-accuracy record
NEG_INF = float("-inf")


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Question:
    id: str
    dataset: str
    text: str
    task: TaskType
    gold: Any
    choices: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise InputError("question id must be non-empty")
        if not self.text or not self.text.strip():
            raise InputError(f"question {self.id!r} has empty text")
        validate_gold(self.gold, self.task)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "id": self.id,
            "dataset": self.dataset,
            "question": self.text,
            "task": self.task.kind.value,
            "answer": self.gold,
        }
        if self.choices is not None:
            out["choices"] = list(self.choices)
        return out


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(line_number, object)`` for each non-blank line."""
    path = Path(path)
    try:
        handle = path.open(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError("file not found", path=str(path)) from None
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno, path=str(path)) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line=lineno, path=str(path))
            yield lineno, obj


def check_version(obj: dict[str, Any], expected: int, what: str) -> None:
    version = obj.get("format_version")
    if version != expected:
        raise VersionMismatchError(f"{what} format_version {version!r} is not supported (expected {expected})")


def version_error_at(exc: VersionMismatchError, path: str | Path, lineno: int) -> VersionMismatchError:
    return VersionMismatchError(f"{path}:line {lineno}: {exc}")


def parse_question(obj: dict[str, Any]) -> Question:
    from .errors import ConfigError

    missing = [key for key in ("id", "question", "task", "answer") if key not in obj]
    if missing:
        raise InputError(f"missing field(s) {missing}")
    choices = obj.get("choices")
    if choices is not None and not isinstance(choices, list):
        raise InputError("choices must be a list")
    try:
        task = TaskType.parse(obj["task"], choices)
        return Question(
            id=str(obj["id"]),
            dataset=str(obj.get("dataset", "default")),
            text=obj["question"],
            task=task,
            gold=obj["answer"],
            choices=tuple(str(c) for c in choices) if choices is not None else None,
        )
    except ConfigError as exc:
        raise InputError(str(exc)) from None


def read_questions(path: str | Path) -> list[Question]:
    """Load a question file, failing on the first bad line with its number."""
    questions: list[Question] = []
    seen: set[str] = set()
    for lineno, obj in iter_jsonl(path):
        try:
            question = parse_question(obj)
        except InputError as exc:
            raise ParseError(str(exc), line=lineno, path=str(path)) from None
        if question.id in seen:
            raise ParseError(f"duplicate question id {question.id!r}", line=lineno, path=str(path))
        seen.add(question.id)
        questions.append(question)
    return questions


@dataclass(frozen=True)
class RunResult:
    correct: bool
    output_tokens: int
    truncated: bool = False
    text_digest: str = ""
    text: str | None = None
    failed: bool = False

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "text_digest": self.text_digest,
            "correct": self.correct,
            "output_tokens": self.output_tokens,
            "truncated": self.truncated,
        }
        if self.failed:
            out["failed"] = True
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> RunResult:
        tokens = obj["output_tokens"]
        if not isinstance(tokens, int) or isinstance(tokens, bool) or tokens < 1:
            raise ValueError(f"output_tokens must be a positive integer, got {tokens!r}")
        return cls(
            correct=bool(obj["correct"]),
            output_tokens=tokens,
            truncated=bool(obj.get("truncated", False)),
            text_digest=str(obj.get("text_digest", "")),
            text=obj.get("text"),
            failed=bool(obj.get("failed", False)),
        )


def _failed_run() -> RunResult:
    return RunResult(correct=False, output_tokens=1, failed=True)


@dataclass(frozen=True)
class ProbeRecord:
    """Outcome of k runs of one question in one mode."""

    question_id: str
    mode: ThinkingMode
    runs: tuple[RunResult, ...]
    dataset: str = "default"
    question_text: str = ""
    _correct: int = field(init=False, repr=False, compare=False)
    _tokens: int = field(init=False, repr=False, compare=False)
    _failed: bool = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        runs = tuple(self.runs)
        if not runs:
            raise InputError("a probe record needs at least one run")
        correct = tokens = 0
        failed = False
        for run in runs:
            correct += run.correct
            tokens += run.output_tokens
            failed = failed or run.failed
        object.__setattr__(self, "runs", runs)
        object.__setattr__(self, "_correct", int(correct))
        object.__setattr__(self, "_tokens", tokens)
        object.__setattr__(self, "_failed", failed)

    @property
    def k(self) -> int:
        return len(self.runs)

    @property
    def complete(self) -> bool:
        return not self._failed

    @property
    def correct_count(self) -> int:
        return self._correct

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self._correct, len(self.runs))

    @property
    def avg_tokens(self) -> float:
        return self._tokens / len(self.runs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": PROBE_LOG_VERSION,
            "question_id": self.question_id,
            "dataset": self.dataset,
            "question": self.question_text,
            "mode": self.mode.value,
            "k": self.k,
            "complete": self.complete,
            "correct_count": self.correct_count,
            "accuracy": float(self.accuracy),
            "avg_tokens": self.avg_tokens,
            "runs": [run.to_dict() for run in self.runs],
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> ProbeRecord:
        check_version(obj, PROBE_LOG_VERSION, "probe log")
        runs = tuple(RunResult.from_dict(run) for run in obj["runs"])
        record = cls(
            question_id=str(obj["question_id"]),
            mode=ThinkingMode.parse(obj["mode"]),
            runs=runs,
            dataset=str(obj.get("dataset", "default")),
            question_text=str(obj.get("question", "")),
        )
        if "k" in obj and obj["k"] != record.k:
            raise ValueError(f"k={obj['k']} but {record.k} runs stored")
        if "correct_count" in obj and obj["correct_count"] != record.correct_count:
            raise ValueError("stored correct_count disagrees with runs")
        return record


@dataclass(frozen=True)
class DensityParams:
    alpha: float = 1.0
    k: int = 10
    accuracy_scale: str = "fraction"

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise InputError(f"alpha must be >= 0, got {self.alpha!r}")
        if self.k < 1:
            raise InputError(f"k must be >= 1, got {self.k!r}")
        if self.accuracy_scale not in ("fraction", "percent"):
            raise InputError(f"accuracy_scale must be 'fraction' or 'percent', got {self.accuracy_scale!r}")

    @property
    def scale(self) -> int:
        return 100 if self.accuracy_scale == "percent" else 1

    def to_dict(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "k": self.k, "accuracy_scale": self.accuracy_scale}


def _check_usable(record: ProbeRecord) -> None:
    if not record.complete:
        raise InputError(f"record ({record.question_id}, {record.mode.value}) has failed runs")


def thinking_density(record: ProbeRecord, params: DensityParams | None = None) -> float:
    """Accuracy divided by ``avg_tokens ** alpha``; exactly 0.0 at zero accuracy."""
    params = params or DensityParams()
    _check_usable(record)
    if record.correct_count == 0:
        return 0.0
    accuracy = record.accuracy * params.scale
    return float(accuracy) / record.avg_tokens**params.alpha


def log_density(record: ProbeRecord, params: DensityParams | None = None) -> float:
    """``log(accuracy) - alpha * log(avg_tokens)``, or :data:`NEG_INF` at zero accuracy."""
    params = params or DensityParams()
    _check_usable(record)
    if record.correct_count == 0:
        return NEG_INF
    log_acc = math.log(record.correct_count) - math.log(record.k) + math.log(params.scale)
    return log_acc - params.alpha * math.log(record.avg_tokens)


def _to_run(question: Question, completion: Completion, keep_text: bool) -> RunResult:
    if completion.recorded_correct is not None:
        correct = completion.recorded_correct
    else:
        correct = grade(completion.text, question.gold, question.task).correct
    return RunResult(
        correct=correct,
        output_tokens=max(1, completion.output_tokens),
        truncated=completion.truncated,
        text_digest=text_digest(completion.text),
        text=completion.text if keep_text else None,
    )


async def run_k(
    question: Question,
    mode: ThinkingMode,
    k: int,
    backend: Backend,
    templates: TemplateSet,
    semaphore: asyncio.Semaphore | None = None,
    *,
    keep_text: bool = False,
    bundle=None,
) -> tuple[RunResult, ...]:
    """k graded runs of one prompt; results ordered by run index."""
    bundle = bundle or assemble_prompt(mode, question.text, templates)

    async def one(index: int) -> RunResult:
        async def call() -> Completion:
            return await backend.complete(bundle, question_id=question.id, run_index=index)

        try:
            if semaphore is None:
                completion = await call()
            else:
                async with semaphore:
                    completion = await call()
        except (TransportError, RequestError):
            return _failed_run()
        return _to_run(question, completion, keep_text)

    return tuple(await asyncio.gather(*(one(i) for i in range(k))))


async def probe_question(
    question: Question,
    modes: Sequence[ThinkingMode] = MODES,
    k: int = 10,
    backend: Backend | None = None,
    templates: TemplateSet | None = None,
    *,
    parallelism: int = 8,
    keep_text: bool = False,
    semaphore: asyncio.Semaphore | None = None,
) -> list[ProbeRecord]:
    """One :class:`ProbeRecord` per mode, each from k independent runs."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if backend is None:
        raise InputError("a backend is required")
    templates = templates or load_template_set()
    semaphore = semaphore or asyncio.Semaphore(parallelism)
    ordered = sorted({ThinkingMode.parse(m) for m in modes})
    all_runs = await asyncio.gather(
        *(run_k(question, mode, k, backend, templates, semaphore, keep_text=keep_text) for mode in ordered)
    )
    return [
        ProbeRecord(
            question_id=question.id,
            mode=mode,
            runs=runs,
            dataset=question.dataset,
            question_text=question.text,
        )
        for mode, runs in zip(ordered, all_runs)
    ]


async def probe_questions(
    questions: Iterable[Question],
    modes: Sequence[ThinkingMode] = MODES,
    k: int = 10,
    backend: Backend | None = None,
    templates: TemplateSet | None = None,
    *,
    parallelism: int = 8,
    keep_text: bool = False,
    skip: set[tuple[str, ThinkingMode]] | None = None,
) -> list[ProbeRecord]:
    """Probe many questions under one shared parallelism cap.

    Pairs listed in ``skip`` are not requested at all.
    """
    semaphore = asyncio.Semaphore(parallelism)
    skip = skip or set()

    async def one(question: Question) -> list[ProbeRecord]:
        todo = [m for m in sorted({ThinkingMode.parse(m) for m in modes}) if (question.id, m) not in skip]
        if not todo:
            return []
        return await probe_question(
            question, todo, k, backend, templates, keep_text=keep_text, semaphore=semaphore
        )

    results = await asyncio.gather(*(one(q) for q in questions))
    return [record for group in results for record in group]


def write_probe_log(path: str | Path, records: Iterable[ProbeRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def read_probe_log(path: str | Path) -> list[ProbeRecord]:
    records = []
    for lineno, obj in iter_jsonl(path):
        try:
            records.append(ProbeRecord.from_dict(obj))
        except VersionMismatchError as exc:
            raise version_error_at(exc, path, lineno) from None
        except (KeyError, TypeError, ValueError, InputError) as exc:
            detail = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            raise ParseError(f"bad probe record: {detail}", line=lineno, path=str(path)) from None
    return records
