"""Route questions, run them in the chosen mode, grade, and record."""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

from .backend import Backend
from .errors import InputError, ParseError, RoutingError, VersionMismatchError
from .modes import PromptBundle, TemplateSet, ThinkingMode, assemble_prompt, load_template_set
from .probe import (
    DensityParams,
    ProbeRecord,
    Question,
    RunResult,
    version_error_at,
    check_version,
    iter_jsonl,
    run_k,
    thinking_density,
)
from .router import ModeClassifier
from .tmc import argmax_mode, group_records

__all__ = [
    "MindRouterPolicy",
    "FixedPolicy",
    "OraclePolicy",
    "CoTPolicy",
    "Policy",
    "RoutedAnswer",
    "EvalRun",
    "COT_SUFFIX",
    "EVAL_VERSION",
    "route",
    "answer",
    "run_eval",
    "bundle_for",
    "write_eval_run",
    "read_eval_run",
]

EVAL_VERSION = 1
COT_SUFFIX = "Let's think step by step."


@dataclass(frozen=True)
class MindRouterPolicy:
    model: ModeClassifier
    name: str = "mind-router"


@dataclass(frozen=True)
class FixedPolicy:
    mode: ThinkingMode

    @property
    def name(self) -> str:
        return f"{ThinkingMode.parse(self.mode).value}-only"


@dataclass(frozen=True)
class CoTPolicy:
    name: str = "cot"


class OraclePolicy:
    """Per-question density argmax over a probe log."""

    name = "oracle"

    def __init__(self, records: Iterable[ProbeRecord], params: DensityParams | None = None):
        self.params = params or DensityParams()
        self._assignments: dict[str, ThinkingMode] = {}
        for qid, group in group_records(records).items():
            scores = {mode: thinking_density(record, self.params) for mode, record in group.items() if record.complete}
            if scores:
                self._assignments[qid] = argmax_mode(scores)

    def __contains__(self, question_id: str) -> bool:
        return question_id in self._assignments

    def mode_for(self, question_id: str) -> ThinkingMode:
        try:
            return self._assignments[question_id]
        except KeyError:
            raise RoutingError(f"oracle log has no usable records for question {question_id!r}") from None


Policy = Union[MindRouterPolicy, FixedPolicy, OraclePolicy, CoTPolicy]


def _route(policy: Policy, question: Question) -> tuple[ThinkingMode, tuple[float, ...] | None]:
    if isinstance(policy, FixedPolicy):
        return ThinkingMode.parse(policy.mode), None
    if isinstance(policy, CoTPolicy):
        return ThinkingMode.NORMAL, None
    if isinstance(policy, OraclePolicy):
        return policy.mode_for(question.id), None
    if isinstance(policy, MindRouterPolicy):
        mode, probs = policy.model.predict_mode(question.text)
        return mode, tuple(probs)
    raise RoutingError(f"unknown policy {policy!r}")


def route(policy: Policy, question: Question) -> ThinkingMode:
    """Pick the mode for ``question``; never calls a backend."""
    return _route(policy, question)[0]


def bundle_for(policy: Policy, mode: ThinkingMode, question: Question, templates: TemplateSet) -> PromptBundle:
    bundle = assemble_prompt(mode, question.text, templates)
    if isinstance(policy, CoTPolicy):
        return PromptBundle(
            system_message=bundle.system_message,
            user_message=f"{question.text}\n{COT_SUFFIX}",
            mode=bundle.mode,
            generation=bundle.generation,
        )
    return bundle


@dataclass(frozen=True)
class RoutedAnswer:
    question_id: str
    dataset: str
    policy: str
    chosen_mode: ThinkingMode
    runs: tuple[RunResult, ...]
    router_probabilities: tuple[float, ...] | None = None

    @property
    def complete(self) -> bool:
        return not any(run.failed for run in self.runs)

    @property
    def correct_count(self) -> int:
        return sum(run.correct for run in self.runs)

    @property
    def total_tokens(self) -> int:
        return sum(run.output_tokens for run in self.runs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": EVAL_VERSION,
            "question_id": self.question_id,
            "dataset": self.dataset,
            "policy": self.policy,
            "chosen_mode": self.chosen_mode.value,
            "complete": self.complete,
            "router_probabilities": list(self.router_probabilities) if self.router_probabilities else None,
            "runs": [run.to_dict() for run in self.runs],
        }

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> RoutedAnswer:
        check_version(obj, EVAL_VERSION, "eval run")
        probs = obj.get("router_probabilities")
        return cls(
            question_id=str(obj["question_id"]),
            dataset=str(obj.get("dataset", "default")),
            policy=str(obj["policy"]),
            chosen_mode=ThinkingMode.parse(obj["chosen_mode"]),
            runs=tuple(RunResult.from_dict(r) for r in obj["runs"]),
            router_probabilities=tuple(float(p) for p in probs) if probs else None,
        )


async def answer(
    question: Question,
    policy: Policy,
    k: int,
    backend: Backend,
    templates: TemplateSet | None = None,
    *,
    semaphore: asyncio.Semaphore | None = None,
    keep_text: bool = False,
) -> RoutedAnswer:
    """Route once, then run k graded completions in that mode."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    templates = templates or load_template_set()
    mode, probs = _route(policy, question)
    bundle = bundle_for(policy, mode, question, templates)
    runs = await run_k(question, mode, k, backend, templates, semaphore, keep_text=keep_text, bundle=bundle)
    return RoutedAnswer(
        question_id=question.id,
        dataset=question.dataset,
        policy=policy.name,
        chosen_mode=mode,
        runs=runs,
        router_probabilities=probs,
    )


@dataclass
class EvalRun:
    answers: list[RoutedAnswer]
    manifest: dict[str, Any] = field(default_factory=dict)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


async def run_eval(
    questions: Sequence[Question],
    policy: Policy,
    k: int = 3,
    backend: Backend | None = None,
    templates: TemplateSet | None = None,
    *,
    parallelism: int = 8,
    alpha: float = 1.0,
    seed: int | None = None,
    keep_text: bool = False,
    extra_manifest: Mapping[str, Any] | None = None,
) -> EvalRun:
    """Answer every question under one policy; output sorted by question id."""
    if backend is None:
        raise InputError("a backend is required")
    if isinstance(policy, OraclePolicy):
        missing = [q.id for q in questions if q.id not in policy]
        if missing:
            raise RoutingError(f"oracle log does not cover question(s) {missing[:10]}")
    templates = templates or load_template_set()
    started = _now()
    semaphore = asyncio.Semaphore(parallelism)
    answers = await asyncio.gather(
        *(answer(q, policy, k, backend, templates, semaphore=semaphore, keep_text=keep_text) for q in questions)
    )
    manifest = {
        "format_version": EVAL_VERSION,
        "policy": policy.name,
        "k": k,
        "alpha": alpha,
        "seed": seed,
        "model_id": getattr(backend, "model_id", None),
        "templates": templates.source,
        "question_count": len(questions),
        "incomplete_count": sum(not a.complete for a in answers),
        "started_at": started,
        "finished_at": _now(),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    return EvalRun(sorted(answers, key=lambda a: a.question_id), manifest)


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_eval_run(path: str | Path, run: EvalRun) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for item in run.answers:
            handle.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")
    manifest_path(path).write_text(json.dumps(run.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_eval_run(path: str | Path) -> EvalRun:
    answers = []
    for lineno, obj in iter_jsonl(path):
        try:
            answers.append(RoutedAnswer.from_dict(obj))
        except VersionMismatchError as exc:
            raise version_error_at(exc, path, lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            detail = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            raise ParseError(f"bad eval row: {detail}", line=lineno, path=str(path)) from None
    sidecar = manifest_path(path)
    manifest = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return EvalRun(answers, manifest)
