"""``moderoute`` command line.

Subcommands: probe, build-tmc, train, eval, report, pareto, serve.
Settings resolve in the order built-in defaults < ``--config`` YAML file <
``MODEROUTE_*`` environment variables < command-line flags. API keys are
only ever read from the environment variable named by ``api_key_env``.

Exit codes: 0 ok, 2 config, 3 parse, 4 transport, 5 contract violation.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .analysis import oracle_assignments, pareto_check, report, report_from_aggregates
from .backend import BackendConfig, ChatCompletionsBackend, MockBackend, ReplayBackend
from .dispatch import CoTPolicy, FixedPolicy, MindRouterPolicy, OraclePolicy, read_eval_run, run_eval, write_eval_run
from .errors import ConfigError, InputError, ModeRouteError, ParseError
from .modes import ThinkingMode, load_template_set, parse_modes
from .probe import (
    DensityParams,
    iter_jsonl,
    probe_questions,
    read_probe_log,
    read_questions,
    write_probe_log,
)
from .router import FeaturizerConfig, MindRouter, TrainConfig
from .tmc import BuildConfig, build, read_dataset, write_dataset

log = logging.getLogger("moderoute")

MANIFEST_VERSION = 1


@dataclass
class RunConfig:
    """Fully resolved settings; embedded in every output manifest."""

    alpha: float = 1.0
    k: int | None = None
    modes: str = "fast,normal,slow"
    backend_url: str = "http://localhost:8000/v1/chat/completions"
    model: str = "default"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_ms: float = 120_000
    max_retries: int = 3
    retry_base_delay_ms: float = 500
    parallelism: int = 8
    seed: int = 0
    templates: str | None = None
    keep_text: bool = False

    def backend_config(self) -> BackendConfig:
        return BackendConfig(
            endpoint_url=self.backend_url,
            model_id=self.model,
            api_key_env=self.api_key_env,
            timeout_ms=self.timeout_ms,
            max_retries=self.max_retries,
            retry_base_delay_ms=self.retry_base_delay_ms,
            max_in_flight=self.parallelism,
        )


_ENV_KEYS = {
    "MODEROUTE_BACKEND_URL": "backend_url",
    "MODEROUTE_MODEL": "model",
    "MODEROUTE_PARALLELISM": "parallelism",
}


def resolve_run_config(args: argparse.Namespace, env: dict[str, str] | None = None) -> RunConfig:
    env = dict(os.environ if env is None else env)
    names = {f.name: f for f in fields(RunConfig)}
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            data = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {args.config} is not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        if "api_key" in data:
            raise ConfigError("API keys are read from the environment only; set api_key_env instead")
        unknown = set(data) - set(names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        values.update(data)
    for var, key in _ENV_KEYS.items():
        if var in env:
            values[key] = env[var]
    for key in names:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        cfg = RunConfig(**values)
        cfg.alpha = float(cfg.alpha)
        cfg.parallelism = int(cfg.parallelism)
        cfg.seed = int(cfg.seed)
        if cfg.k is not None:
            cfg.k = int(cfg.k)
        parse_modes(cfg.modes)
        DensityParams(alpha=cfg.alpha)
        cfg.backend_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid setting: {exc}") from None
    if cfg.parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    return cfg


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(out: str | Path, command: str, cfg: RunConfig, argv: Sequence[str], **extra: Any) -> None:
    body = {
        "format_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "command": command,
        "argv": list(argv),
        "run_config": asdict(cfg),
        "written_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "output_digest": file_digest(out),
        **extra,
    }
    manifest_path(out).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, Any]:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        return {}
    return json.loads(sidecar.read_text(encoding="utf-8"))


def load_mock_script(path: str | Path) -> MockBackend:
    """Mock backend from JSONL lines ``{id, mode, text, tokens}``.

    Several lines for one (id, mode) key become successive runs.
    """
    script: dict[tuple[str, ThinkingMode], list[tuple[str, int]]] = {}
    for lineno, obj in iter_jsonl(path):
        try:
            key = (str(obj["id"]), ThinkingMode.parse(obj["mode"]))
            script.setdefault(key, []).append((str(obj["text"]), int(obj["tokens"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad mock script line: {exc}", line=lineno, path=str(path)) from None
    if not script:
        raise ParseError("mock script is empty", path=str(path))
    return MockBackend(script)


def make_backend(args: argparse.Namespace, cfg: RunConfig):
    if getattr(args, "mock_script", None):
        return load_mock_script(args.mock_script)
    if getattr(args, "replay_log", None):
        return ReplayBackend(read_probe_log(args.replay_log), model_id=f"replay:{Path(args.replay_log).name}")
    return ChatCompletionsBackend(cfg.backend_config())


async def _with_backend(backend, coro_fn):
    if isinstance(backend, ChatCompletionsBackend):
        async with backend:
            return await coro_fn()
    return await coro_fn()


# -- commands -------------------------------------------------------------------


def cmd_probe(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    questions = read_questions(args.questions)
    modes = parse_modes(cfg.modes)
    k = cfg.k or 10
    templates = load_template_set(cfg.templates)
    out = Path(args.out)
    kept = []
    if out.exists():
        kept = [r for r in read_probe_log(out) if r.complete and r.k == k]
    done = {(r.question_id, r.mode) for r in kept}
    backend = make_backend(args, cfg)

    async def go():
        return await probe_questions(
            questions, modes, k, backend, templates,
            parallelism=cfg.parallelism, keep_text=cfg.keep_text, skip=done,
        )

    new = asyncio.run(_with_backend(backend, go))
    records = sorted(kept + new, key=lambda r: (r.question_id, r.mode.rank))
    write_probe_log(out, records)
    incomplete = sum(not r.complete for r in records)
    write_manifest(
        out, "probe", cfg, argv,
        k=k, modes=[m.value for m in modes], model_id=backend.model_id,
        questions_digest=file_digest(args.questions),
        record_count=len(records), new_record_count=len(new), resumed_record_count=len(kept),
        incomplete_record_count=incomplete,
    )
    print(f"wrote {len(records)} records ({len(new)} new, {incomplete} incomplete) to {out}")
    if incomplete:
        log.warning("%d records have failed runs; rerun to retry them", incomplete)
    return 0


def cmd_build_tmc(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    config = BuildConfig(
        threshold=_fraction(args.threshold),
        max_length=None if args.max_length <= 0 else args.max_length,
        params=DensityParams(alpha=cfg.alpha, k=cfg.k or 10),
    )
    records = read_probe_log(args.log)
    try:
        dataset, build_report = build(records, config)
    except InputError as exc:
        raise InputError(f"{args.log}: {exc}") from None
    write_dataset(args.out, dataset)
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".report.json")
    report_path.write_text(json.dumps(build_report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(
        args.out, "build-tmc", cfg, argv,
        source_log=str(args.log), source_log_digest=file_digest(args.log), build_report=str(report_path),
    )
    print(f"labeled {build_report.labeled_count} of {build_report.input_count} questions -> {args.out}")
    return 0


def _fraction(text: str) -> Fraction:
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad threshold {text!r}") from None
    if not 0 <= value <= 1:
        raise ConfigError("threshold must be within [0, 1]")
    return value


def cmd_train(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    dataset = read_dataset(args.tmc)
    if not dataset:
        raise InputError(f"{args.tmc} holds no examples")
    source = read_manifest(args.tmc).get("source_log_digest") or file_digest(args.tmc)
    tcfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
        l2_lambda=args.l2_lambda, seed=cfg.seed, shuffle=not args.no_shuffle,
    )
    fcfg = FeaturizerConfig(ngram_min=args.ngram_min, ngram_max=args.ngram_max, hash_dimension=2**args.hash_bits)
    model = MindRouter.from_configs(tcfg, fcfg).fit(
        [ex.question_text for ex in dataset], [ex.label for ex in dataset], source_digest=source
    )
    digest = model.save(args.out)
    write_manifest(args.out, "train", cfg, argv, tmc=str(args.tmc), tmc_digest=file_digest(args.tmc),
                   model_digest=digest, training_meta=model.training_meta_)
    print(f"trained on {len(dataset)} examples, final loss {model.training_meta_['final_loss']:.4f} -> {args.out}")
    return 0


def _policy(args: argparse.Namespace, cfg: RunConfig):
    name = args.policy
    if name in ("fast", "normal", "slow"):
        return FixedPolicy(ThinkingMode(name)), {}
    if name == "cot":
        return CoTPolicy(), {}
    if name == "oracle":
        if not args.oracle_log:
            raise ConfigError("--policy oracle needs --oracle-log")
        return OraclePolicy(read_probe_log(args.oracle_log), DensityParams(alpha=cfg.alpha)), {
            "oracle_log_digest": file_digest(args.oracle_log)
        }
    if name == "router":
        if not args.router_model:
            raise ConfigError("--policy router needs --router-model")
        model = MindRouter.load(args.router_model)
        extra = {"router_model_digest": model.model_digest(),
                 "router_source_log_digest": model.training_meta_.get("source_log_digest")}
        reference = args.replay_log or args.oracle_log
        if reference:
            extra["transfer_run"] = file_digest(reference) != extra["router_source_log_digest"]
        return MindRouterPolicy(model), extra
    raise ConfigError(f"unknown policy {name!r}")


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    questions = read_questions(args.questions)
    policy, extra = _policy(args, cfg)
    k = cfg.k or 3
    backend = make_backend(args, cfg)
    templates = load_template_set(cfg.templates)

    async def go():
        return await run_eval(
            questions, policy, k, backend, templates,
            parallelism=cfg.parallelism, alpha=cfg.alpha, seed=cfg.seed,
            keep_text=cfg.keep_text, extra_manifest=extra,
        )

    run = asyncio.run(_with_backend(backend, go))
    run.manifest["run_config"] = asdict(cfg)
    run.manifest["argv"] = list(argv)
    run.manifest["questions_digest"] = file_digest(args.questions)
    write_eval_run(args.out, run)
    bad = run.manifest["incomplete_count"]
    print(f"answered {len(run.answers)} questions with policy {policy.name} ({bad} incomplete) -> {args.out}")
    return 0


def _read_aggregates(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        return list(data["rows"] if isinstance(data, dict) else data)
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def cmd_report(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    if args.aggregates:
        result = report_from_aggregates(_read_aggregates(args.aggregates), cfg.alpha)
    else:
        if not args.runs:
            raise ConfigError("give eval run files or --aggregates")
        answers = [a for path in args.runs for a in read_eval_run(path).answers]
        result = report(answers, cfg.alpha)
    text = {"json": result.to_json, "csv": result.to_csv, "markdown": result.to_markdown}[args.format]()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        inputs = [args.aggregates] if args.aggregates else list(args.runs)
        write_manifest(args.out, "report", cfg, argv, inputs={p: file_digest(p) for p in inputs})
    else:
        sys.stdout.write(text)
    return 0


def cmd_pareto(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    records = read_probe_log(args.log)
    params = DensityParams(alpha=cfg.alpha, k=cfg.k or 10)
    verdict = pareto_check(records, params)
    body = verdict.to_dict()
    if args.assignments:
        body["oracle_assignments"] = {q: m.value for q, m in oracle_assignments(records, params).items()}
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(args.out, "pareto", cfg, argv, source_log_digest=file_digest(args.log))
    else:
        sys.stdout.write(text)
    if any(gap < 0 for gap in verdict.combined_gap.values()):
        return 5
    return 0


def cmd_serve(args: argparse.Namespace, cfg: RunConfig, argv: Sequence[str]) -> int:
    import uvicorn

    from .service import create_app, load_service_config

    config = load_service_config(args.service_config)
    overrides: dict[str, Any] = {}
    if args.router_model:
        overrides["router_model_path"] = args.router_model
    if args.listen:
        overrides["listen_address"] = args.listen
    if cfg.templates:
        overrides["templates_path"] = cfg.templates
    if overrides:
        config = replace(config, **overrides)
    if not config.router_model_path:
        raise ConfigError("serve needs a router model (--router-model or router_model_path)")
    uvicorn.run(create_app(config), host=config.host, port=config.port)
    return 0


# -- parser -------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared settings")
    g.add_argument("--config", help="YAML file with shared settings")
    g.add_argument("--alpha", type=float, help="token-cost exponent in thinking density (default 1)")
    g.add_argument("--k", type=int, help="runs per question (default: 10 for probe, 3 for eval)")
    g.add_argument("--modes", help="comma separated modes to probe (default fast,normal,slow)")
    g.add_argument("--backend-url", dest="backend_url", help="chat-completions endpoint URL")
    g.add_argument("--model", help="model id sent upstream")
    g.add_argument("--parallelism", type=int, help="max concurrent backend requests (default 8)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--templates", help="YAML file overriding the fast/normal/slow system prompts")
    g.add_argument("--keep-text", dest="keep_text", action="store_true", default=None,
                   help="store full completion text in logs, not only its digest")
    g.add_argument("-v", "--verbose", action="store_true")
    return common


def _offline(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mock-script", help="JSONL of scripted completions {id, mode, text, tokens}")
    src.add_argument("--replay-log", help="probe log whose recorded runs are replayed")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="moderoute", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", parents=[common], help="run every question k times in each mode")
    p.add_argument("questions", help="question JSONL file")
    p.add_argument("-o", "--out", required=True, help="probe log to write (resumed if present)")
    _offline(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("build-tmc", parents=[common], help="filter and label a probe log")
    p.add_argument("log", help="probe log")
    p.add_argument("-o", "--out", required=True, help="routing dataset JSONL to write")
    p.add_argument("--report", help="build report path (default: <out>.report.json)")
    p.add_argument("--threshold", default="4/5", help="competence threshold (default 4/5)")
    p.add_argument("--max-length", type=int, default=4096, help="max question characters; <=0 disables")
    p.set_defaults(func=cmd_build_tmc)

    p = sub.add_parser("train", parents=[common], help="train the router on a routing dataset")
    p.add_argument("tmc", help="routing dataset JSONL")
    p.add_argument("-o", "--out", required=True, help="model file to write")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--l2-lambda", type=float, default=TrainConfig.l2_lambda)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--ngram-min", type=int, default=FeaturizerConfig.ngram_min)
    p.add_argument("--ngram-max", type=int, default=FeaturizerConfig.ngram_max)
    p.add_argument("--hash-bits", type=int, default=18, help="log2 of the hash dimension")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="answer questions under a routing policy")
    p.add_argument("questions", help="question JSONL file")
    p.add_argument("--policy", required=True, choices=["router", "fast", "normal", "slow", "oracle", "cot"])
    p.add_argument("--router-model", help="model file for --policy router")
    p.add_argument("--oracle-log", help="probe log for --policy oracle")
    p.add_argument("-o", "--out", required=True, help="eval run JSONL to write")
    _offline(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="accuracy / tokens / density table")
    p.add_argument("runs", nargs="*", help="eval run files")
    p.add_argument("--aggregates", help="CSV/JSON of dataset,policy,acc_percent,mean_tokens rows")
    p.add_argument("--format", choices=["json", "csv", "markdown"], default="markdown")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pareto", parents=[common], help="oracle router vs fixed modes on a probe log")
    p.add_argument("log", help="probe log")
    p.add_argument("--assignments", action="store_true", help="include the per-question oracle modes")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP gateway")
    p.add_argument("--service-config", help="YAML service config")
    p.add_argument("--router-model")
    p.add_argument("--listen", help="host:port (default 127.0.0.1:8080)")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_run_config(args)
        return args.func(args, cfg, argv)
    except ModeRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
