"""Answer extraction and correctness judging.

Extraction follows a "last occurrence wins" rule: long reasoning traces
mention many intermediate numbers and letters before the final answer.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence, Union

from .errors import ConfigError

__all__ = [
    "TaskKind",
    "TaskType",
    "GradeResult",
    "Answer",
    "extract_answer",
    "grade",
    "parse_number",
    "NUMERIC_TOLERANCE",
]

NUMERIC_TOLERANCE = 1e-6

Answer = Union[str, Fraction, float]


class TaskKind(str, enum.Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    NUMERIC = "numeric"
    BOOLEAN = "boolean"
    EXACT = "exact"


_KIND_ALIASES = {
    "mc": TaskKind.MULTIPLE_CHOICE,
    "multiple_choice": TaskKind.MULTIPLE_CHOICE,
    "multiplechoice": TaskKind.MULTIPLE_CHOICE,
    "numeric": TaskKind.NUMERIC,
    "numeric_math": TaskKind.NUMERIC,
    "math": TaskKind.NUMERIC,
    "boolean": TaskKind.BOOLEAN,
    "boolean_yes_no": TaskKind.BOOLEAN,
    "yes_no": TaskKind.BOOLEAN,
    "bool": TaskKind.BOOLEAN,
    "exact": TaskKind.EXACT,
    "exact_string": TaskKind.EXACT,
    "string": TaskKind.EXACT,
}


@dataclass(frozen=True)
class TaskType:
    kind: TaskKind
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind is TaskKind.MULTIPLE_CHOICE:
            if len(self.labels) < 2:
                raise ConfigError("multiple choice needs at least two option labels")
            if len(set(self.labels)) != len(self.labels):
                raise ConfigError(f"option labels must be distinct: {self.labels}")
            for label in self.labels:
                if len(label) != 1 or not ("A" <= label <= "Z"):
                    raise ConfigError(f"option label must be a single capital letter, got {label!r}")
        elif self.labels:
            raise ConfigError(f"{self.kind.value} tasks take no option labels")

    @classmethod
    def multiple_choice(cls, n_options: int = 4) -> TaskType:
        if not 2 <= n_options <= 26:
            raise ConfigError(f"unsupported option count {n_options}")
        return cls(TaskKind.MULTIPLE_CHOICE, tuple("ABCDEFGHIJKLMNOPQRSTUVWXYZ"[:n_options]))

    @classmethod
    def numeric(cls) -> TaskType:
        return cls(TaskKind.NUMERIC)

    @classmethod
    def boolean(cls) -> TaskType:
        return cls(TaskKind.BOOLEAN)

    @classmethod
    def exact(cls) -> TaskType:
        return cls(TaskKind.EXACT)

    @classmethod
    def parse(cls, name: str, choices: Sequence[Any] | None = None) -> TaskType:
        try:
            kind = _KIND_ALIASES[str(name).strip().lower()]
        except KeyError:
            raise ConfigError(f"unknown task type {name!r}") from None
        if kind is TaskKind.MULTIPLE_CHOICE:
            return cls.multiple_choice(len(choices) if choices else 4)
        return cls(kind)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.labels:
            out["labels"] = list(self.labels)
        return out


class GradeReason(str, enum.Enum):
    MATCHED = "matched"
    MISMATCHED = "mismatched"
    NO_ANSWER_FOUND = "no_answer_found"


@dataclass(frozen=True)
class GradeResult:
    extracted: Answer | None
    correct: bool
    reason: GradeReason


# -- numbers -----------------------------------------------------------------

# grouped thousands must be tried before plain digit runs
_NUMBER_RE = re.compile(
    r"""
    (?<![\w.])
    (?P<sign>[-+−])?
    \s?
    [$€£¥]?
    (?P<num>
        \d{1,3}(?:,\d{3})+(?:\.\d+)?
      | \d+\s*/\s*\d+
      | \d+(?:\.\d+)?(?:[eE][-+]?\d+)?
      | \.\d+
    )
    (?![\w/])
    """,
    re.VERBOSE,
)


def parse_number(raw: Any) -> Fraction | float | None:
    """Parse one numeric value.

    Integers, decimals and ``a/b`` fractions parse exactly to ``Fraction``;
    scientific notation and Python floats come back as ``float``.
    """
    if isinstance(raw, bool):
        return None
    if isinstance(raw, int):
        return Fraction(raw)
    if isinstance(raw, Fraction):
        return raw
    if isinstance(raw, float):
        return raw
    if not isinstance(raw, str):
        return None
    text = raw.strip().replace("−", "-")
    text = re.sub(r"^([-+]?)\s*[$€£¥]", r"\1", text)
    text = text.rstrip(".").replace(",", "").replace(" ", "")
    if not text:
        return None
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            if int(den) == 0:
                return None
            return Fraction(int(num), int(den))
        if "e" in text.lower():
            return float(text)
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        return None


def _extract_number(text: str) -> Fraction | float | None:
    matches = list(_NUMBER_RE.finditer(text))
    if not matches:
        return None
    last = matches[-1]
    sign = "-" if last.group("sign") in ("-", "−") else ""
    return parse_number(sign + last.group("num"))


# -- letters / yes-no / strings ------------------------------------------------

_ANSWER_IS_RE = re.compile(
    r"answer\s*(?:is|:)?\s*(?:option\s*)?[\(\[]?\s*([A-Za-z])\s*[\)\]]?(?![A-Za-z])",
    re.IGNORECASE,
)
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_ANSWER_MARKER_RE = re.compile(r"answer\s*:", re.IGNORECASE)


def _extract_choice(text: str, labels: Sequence[str]) -> str | None:
    allowed = set(labels)
    explicit = [m.group(1).upper() for m in _ANSWER_IS_RE.finditer(text)]
    explicit = [letter for letter in explicit if letter in allowed]
    if explicit:
        return explicit[-1]
    standalone = re.compile(r"(?<![A-Za-z])([%s])(?![A-Za-z])" % "".join(sorted(allowed)))
    found = standalone.findall(text)
    return found[-1] if found else None


def _normalize_string(text: str) -> str:
    return " ".join(text.split())


def extract_answer(text: str | None, task: TaskType) -> Answer | None:
    """Pull the final answer out of free-form model output.

    Never raises; returns ``None`` when nothing answer-shaped is found.
    """
    if not text:
        return None
    kind = task.kind
    if kind is TaskKind.MULTIPLE_CHOICE:
        return _extract_choice(text, task.labels)
    if kind is TaskKind.NUMERIC:
        return _extract_number(text)
    if kind is TaskKind.BOOLEAN:
        found = _YES_NO_RE.findall(text)
        return found[-1].lower() if found else None
    markers = list(_ANSWER_MARKER_RE.finditer(text))
    tail = text[markers[-1].end():] if markers else text
    tail = _normalize_string(tail)
    return tail or None


def _normalize_gold(gold: Any, task: TaskType) -> Answer:
    kind = task.kind
    if kind is TaskKind.NUMERIC:
        value = parse_number(gold)
        if value is None:
            raise ConfigError(f"gold answer {gold!r} is not numeric")
        return value
    if kind is TaskKind.MULTIPLE_CHOICE:
        letter = str(gold).strip().strip("()").upper()
        if letter not in task.labels:
            raise ConfigError(f"gold answer {gold!r} is not one of {task.labels}")
        return letter
    if kind is TaskKind.BOOLEAN:
        if isinstance(gold, bool):
            return "yes" if gold else "no"
        value = str(gold).strip().lower()
        if value in ("true", "false"):
            return "yes" if value == "true" else "no"
        if value not in ("yes", "no"):
            raise ConfigError(f"gold answer {gold!r} is not yes/no")
        return value
    if not isinstance(gold, str) or not gold.strip():
        raise ConfigError(f"gold answer {gold!r} must be a non-empty string")
    return _normalize_string(gold)


def validate_gold(gold: Any, task: TaskType) -> Answer:
    """Normalized gold answer; raises :class:`ConfigError` on mismatch."""
    return _normalize_gold(gold, task)


def _numbers_equal(a: Fraction | float, b: Fraction | float) -> bool:
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return a == b
    return abs(float(a) - float(b)) <= NUMERIC_TOLERANCE


def grade(text: str | None, gold: Any, task: TaskType) -> GradeResult:
    """Judge one completion against the gold answer."""
    expected = _normalize_gold(gold, task)
    extracted = extract_answer(text, task)
    if extracted is None:
        return GradeResult(None, False, GradeReason.NO_ANSWER_FOUND)
    if task.kind is TaskKind.NUMERIC:
        ok = _numbers_equal(extracted, expected)  # type: ignore[arg-type]
    elif task.kind is TaskKind.EXACT:
        ok = extracted == expected
    else:
        ok = str(extracted).lower() == str(expected).lower()
    return GradeResult(extracted, ok, GradeReason.MATCHED if ok else GradeReason.MISMATCHED)
