"""Route each question to a fast, normal or slow prompting mode."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    InputError,
    LoadError,
    ModeRouteError,
    ParseError,
    ReplayMissError,
    RequestError,
    RoutingError,
    ScriptedMissError,
    TransportError,
    VersionMismatchError,
)
from .modes import (
    MODES,
    GenerationConfig,
    PromptBundle,
    TemplateSet,
    ThinkingMode,
    assemble_prompt,
    generation_limits,
    load_template_set,
)
from .grading import GradeResult, TaskType, extract_answer, grade
from .probe import DensityParams, ProbeRecord, Question, log_density, probe_question, thinking_density
from .router import FeaturizerConfig, HashedCharFeaturizer, MindRouter, TrainConfig

__all__ = [
    "__version__",
    "ConfigError",
    "InputError",
    "LoadError",
    "ModeRouteError",
    "ParseError",
    "ReplayMissError",
    "RequestError",
    "RoutingError",
    "ScriptedMissError",
    "TransportError",
    "VersionMismatchError",
    "MODES",
    "GenerationConfig",
    "PromptBundle",
    "TemplateSet",
    "ThinkingMode",
    "assemble_prompt",
    "generation_limits",
    "load_template_set",
    "GradeResult",
    "TaskType",
    "extract_answer",
    "grade",
    "DensityParams",
    "ProbeRecord",
    "Question",
    "log_density",
    "probe_question",
    "thinking_density",
    "FeaturizerConfig",
    "HashedCharFeaturizer",
    "MindRouter",
    "TrainConfig",
]
