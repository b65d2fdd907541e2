"""Thinking modes, their system prompts and generation limits."""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError, InputError

__all__ = [
    "ThinkingMode",
    "TemplateSet",
    "GenerationConfig",
    "PromptBundle",
    "MODES",
    "DEFAULT_LIMITS",
    "assemble_prompt",
    "generation_limits",
    "load_template_set",
    "parse_modes",
]


@functools.total_ordering
class ThinkingMode(enum.Enum):
    """The three modes, ordered by expected cost."""

    FAST = "fast"
    NORMAL = "normal"
    SLOW = "slow"

    @property
    def rank(self) -> int:
        return _RANK[self]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, ThinkingMode):
            return NotImplemented
        return self.rank < other.rank

    # members are singletons compared by identity; the default hashes the name string
    def __hash__(self) -> int:
        return id(self)

    @classmethod
    def parse(cls, value: str | ThinkingMode) -> ThinkingMode:
        if isinstance(value, ThinkingMode):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InputError(f"unknown thinking mode {value!r}") from None


_RANK = {ThinkingMode.FAST: 0, ThinkingMode.NORMAL: 1, ThinkingMode.SLOW: 2}

#: Canonical order; also the tie-break order (cheaper first).
MODES: tuple[ThinkingMode, ...] = (ThinkingMode.FAST, ThinkingMode.NORMAL, ThinkingMode.SLOW)


def parse_modes(spec: str | None) -> tuple[ThinkingMode, ...]:
    """Parse a comma separated mode list such as ``"fast,slow"``."""
    if not spec:
        return MODES
    modes = {ThinkingMode.parse(part) for part in spec.split(",") if part.strip()}
    return tuple(sorted(modes))


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 0.6
    top_p: float = 0.9
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if isinstance(self.temperature, bool) or not self.temperature >= 0:
            raise InputError(f"temperature must be >= 0, got {self.temperature!r}")
        if not 0 < self.top_p <= 1:
            raise InputError(f"top_p must be in (0, 1], got {self.top_p!r}")
        if (
            isinstance(self.max_output_tokens, bool)
            or not isinstance(self.max_output_tokens, int)
            or self.max_output_tokens < 1
        ):
            raise InputError(f"max_output_tokens must be a positive integer, got {self.max_output_tokens!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_output_tokens": self.max_output_tokens,
        }


DEFAULT_LIMITS: Mapping[ThinkingMode, GenerationConfig] = {
    ThinkingMode.FAST: GenerationConfig(max_output_tokens=128),
    ThinkingMode.NORMAL: GenerationConfig(max_output_tokens=2048),
    ThinkingMode.SLOW: GenerationConfig(max_output_tokens=4096),
}


def generation_limits(
    mode: ThinkingMode, overrides: Mapping[str, Any] | None = None
) -> GenerationConfig:
    """Default sampling settings for ``mode`` with ``overrides`` applied.

    Unknown override keys and out-of-range values raise :class:`InputError`.
    """
    base = DEFAULT_LIMITS[ThinkingMode.parse(mode)]
    if not overrides:
        return base
    unknown = set(overrides) - {"temperature", "top_p", "max_output_tokens"}
    if unknown:
        raise InputError(f"unknown generation override(s): {sorted(unknown)}")
    clean = {key: value for key, value in overrides.items() if value is not None}
    return replace(base, **clean)


@dataclass(frozen=True)
class TemplateSet:
    fast_system: str
    normal_system: str
    slow_system: str
    source: str = "builtin"

    def __post_init__(self) -> None:
        for mode in MODES:
            text = self.for_mode(mode)
            if not isinstance(text, str) or not text.strip():
                raise ConfigError(f"template for {mode.value!r} mode is empty")

    def for_mode(self, mode: ThinkingMode) -> str:
        return getattr(self, f"{ThinkingMode.parse(mode).value}_system")


@dataclass(frozen=True)
class PromptBundle:
    """Exactly what gets sent to a backend for one run."""

    system_message: str
    user_message: str
    mode: ThinkingMode
    generation: GenerationConfig

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_message},
            {"role": "user", "content": self.user_message},
        ]


def _read_builtin(name: str) -> str:
    return resources.files(__package__).joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


@functools.lru_cache(maxsize=1)
def _builtin_templates() -> TemplateSet:
    return TemplateSet(
        fast_system=_read_builtin("fast"),
        normal_system=_read_builtin("normal"),
        slow_system=_read_builtin("slow"),
    )


def load_template_set(path: str | Path | None = None) -> TemplateSet:
    """Return the built-in templates, or the ones in a YAML file.

    The file must be a mapping with string values under ``fast``, ``normal``
    and ``slow``. Values are used verbatim.
    """
    if path is None:
        return _builtin_templates()
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"template file not found: {path}") from None
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"template file {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"template file {path} must contain a mapping")
    texts = {}
    for mode in MODES:
        if mode.value not in data:
            raise ConfigError(f"template file {path} is missing key {mode.value!r}")
        if not isinstance(data[mode.value], str):
            raise ConfigError(f"template {mode.value!r} in {path} must be a string")
        texts[f"{mode.value}_system"] = data[mode.value]
    return TemplateSet(**texts, source=str(path))


def assemble_prompt(
    mode: ThinkingMode,
    question_text: str,
    templates: TemplateSet | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> PromptBundle:
    """Pair the mode's system prompt with the untouched question text."""
    if not isinstance(question_text, str) or not question_text.strip():
        raise InputError("question text must be non-empty")
    mode = ThinkingMode.parse(mode)
    templates = templates or load_template_set()
    return PromptBundle(
        system_message=templates.for_mode(mode),
        user_message=question_text,
        mode=mode,
        generation=generation_limits(mode, overrides),
    )
