"""Build the mode-labeled routing dataset from a probe log.

Questions pass through a fixed cascade before labeling: incomplete probes,
then questions no mode answers reliably, then questions whose mean response
lengths are not ordered fast <= normal <= slow, then over-long questions.
Survivors are labeled with their density-maximizing mode.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import InputError, ParseError, VersionMismatchError
from .modes import MODES, ThinkingMode
from .probe import (
    DensityParams,
    ProbeRecord,
    version_error_at,
    check_version,
    iter_jsonl,
    thinking_density,
)

__all__ = [
    "TMCExample",
    "BuildConfig",
    "BuildReport",
    "Group",
    "group_records",
    "filter_competence",
    "filter_monotonic_tokens",
    "filter_length",
    "label",
    "argmax_mode",
    "build",
    "write_dataset",
    "read_dataset",
    "TMC_VERSION",
]

TMC_VERSION = 1

Group = Mapping[ThinkingMode, ProbeRecord]


@dataclass(frozen=True)
class TMCExample:
    question_id: str
    question_text: str
    label: ThinkingMode
    densities: Mapping[ThinkingMode, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": TMC_VERSION,
            "question_id": self.question_id,
            "question": self.question_text,
            "label": self.label.value,
            "densities": {mode.value: self.densities[mode] for mode in MODES if mode in self.densities},
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> TMCExample:
        check_version(obj, TMC_VERSION, "routing dataset")
        return cls(
            question_id=str(obj["question_id"]),
            question_text=str(obj["question"]),
            label=ThinkingMode.parse(obj["label"]),
            densities={ThinkingMode.parse(k): float(v) for k, v in (obj.get("densities") or {}).items()},
        )


@dataclass(frozen=True)
class BuildConfig:
    threshold: Fraction = Fraction(4, 5)
    max_length: int | None = 4096
    params: DensityParams = field(default_factory=DensityParams)

    def to_dict(self) -> dict[str, Any]:
        return {
            "threshold": str(self.threshold),
            "max_length": self.max_length,
            "max_length_unit": "characters",
            **self.params.to_dict(),
        }


@dataclass
class BuildReport:
    input_count: int = 0
    dropped_incomplete: int = 0
    dropped_competence: int = 0
    dropped_monotonicity: int = 0
    dropped_length: int = 0
    labeled_count: int = 0
    label_histogram: dict[str, int] = field(default_factory=lambda: {m.value: 0 for m in MODES})
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def conserved(self) -> bool:
        drops = self.dropped_incomplete + self.dropped_competence + self.dropped_monotonicity + self.dropped_length
        return self.input_count == drops + self.labeled_count

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": TMC_VERSION,
            "input_count": self.input_count,
            "dropped_incomplete": self.dropped_incomplete,
            "dropped_competence": self.dropped_competence,
            "dropped_monotonicity": self.dropped_monotonicity,
            "dropped_length": self.dropped_length,
            "labeled_count": self.labeled_count,
            "label_histogram": dict(self.label_histogram),
            "config": self.config,
        }


def group_records(records: Iterable[ProbeRecord]) -> dict[str, dict[ThinkingMode, ProbeRecord]]:
    """Index records by question id, then mode. Duplicates are an error."""
    groups: dict[str, dict[ThinkingMode, ProbeRecord]] = {}
    for record in records:
        group = groups.setdefault(record.question_id, {})
        if record.mode in group:
            raise InputError(f"duplicate record for ({record.question_id}, {record.mode.value})")
        group[record.mode] = record
    return groups


def _require_all_modes(qid: str, group: Group) -> None:
    missing = [m.value for m in MODES if m not in group]
    if missing:
        raise InputError(f"question {qid!r} lacks records for mode(s) {missing}")


def _require_complete(qid: str, group: Group) -> None:
    _require_all_modes(qid, group)
    if not all(group[m].complete for m in MODES):
        raise InputError(f"question {qid!r} has incomplete records")


def filter_competence(
    groups: Mapping[str, Group], threshold: Fraction | float = Fraction(4, 5)
) -> dict[str, Group]:
    """Drop questions where every mode's accuracy is below ``threshold``."""
    # float 0.8 is slightly above 4/5; go through its decimal repr
    threshold = Fraction(str(threshold)) if isinstance(threshold, float) else Fraction(threshold)
    kept = {}
    for qid, group in groups.items():
        _require_complete(qid, group)
        if max(group[m].accuracy for m in MODES) >= threshold:
            kept[qid] = group
    return kept


def filter_monotonic_tokens(groups: Mapping[str, Group]) -> dict[str, Group]:
    """Keep questions with avg tokens fast <= normal <= slow."""
    kept = {}
    for qid, group in groups.items():
        _require_complete(qid, group)
        fast, normal, slow = (group[m].avg_tokens for m in MODES)
        if fast <= normal <= slow:
            kept[qid] = group
    return kept


def _question_text(group: Group) -> str:
    for mode in MODES:
        if mode in group and group[mode].question_text:
            return group[mode].question_text
    return ""


def filter_length(groups: Mapping[str, Group], max_length: int | None = 4096) -> dict[str, Group]:
    """Drop questions longer than ``max_length`` characters; ``None`` disables."""
    if max_length is None:
        return dict(groups)
    return {qid: g for qid, g in groups.items() if len(_question_text(g)) <= max_length}


def argmax_mode(scores: Mapping[ThinkingMode, float]) -> ThinkingMode:
    """Highest score wins; ties go to the cheaper mode."""
    best = None
    for mode in MODES:
        if mode not in scores:
            continue
        if best is None or scores[mode] > scores[best]:
            best = mode
    if best is None:
        raise InputError("no scores to choose from")
    return best


def label(group: Group, params: DensityParams | None = None, question_id: str | None = None) -> TMCExample:
    params = params or DensityParams()
    _require_all_modes(question_id or "?", group)
    densities = {mode: thinking_density(group[mode], params) for mode in MODES}
    first = group[MODES[0]]
    return TMCExample(
        question_id=question_id or first.question_id,
        question_text=_question_text(group),
        label=argmax_mode(densities),
        densities=densities,
    )


def build(
    records: Iterable[ProbeRecord], config: BuildConfig | None = None
) -> tuple[list[TMCExample], BuildReport]:
    """Run the full cascade; the dataset comes back sorted by question id."""
    config = config or BuildConfig()
    groups = group_records(records)
    for qid, group in groups.items():
        _require_all_modes(qid, group)

    report = BuildReport(input_count=len(groups), config=config.to_dict())
    complete = {q: g for q, g in groups.items() if all(g[m].complete for m in MODES)}
    report.dropped_incomplete = len(groups) - len(complete)
    competent = filter_competence(complete, config.threshold)
    report.dropped_competence = len(complete) - len(competent)
    ordered = filter_monotonic_tokens(competent)
    report.dropped_monotonicity = len(competent) - len(ordered)
    short = filter_length(ordered, config.max_length)
    report.dropped_length = len(ordered) - len(short)

    dataset = [label(short[qid], config.params, qid) for qid in sorted(short)]
    report.labeled_count = len(dataset)
    counts = Counter(example.label for example in dataset)
    report.label_histogram = {mode.value: counts.get(mode, 0) for mode in MODES}
    return dataset, report


def write_dataset(path: str | Path, dataset: Iterable[TMCExample]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for example in dataset:
            handle.write(json.dumps(example.to_dict(), ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> list[TMCExample]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(TMCExample.from_dict(obj))
        except VersionMismatchError as exc:
            raise version_error_at(exc, path, lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            detail = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            raise ParseError(f"bad dataset row: {detail}", line=lineno, path=str(path)) from None
    return out
