"""Reports and Pareto checks over eval runs and probe logs."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .dispatch import RoutedAnswer
from .errors import InputError
from .modes import MODES, ThinkingMode
from .probe import DensityParams, ProbeRecord, log_density, thinking_density
from .router import MindRouter
from .tmc import TMCExample, argmax_mode, group_records

__all__ = [
    "ReportRow",
    "EvalReport",
    "ModeObjectives",
    "ParetoVerdict",
    "AVERAGE",
    "td_report",
    "report",
    "report_from_aggregates",
    "oracle_assignments",
    "pareto_check",
    "router_oracle_agreement",
]

AVERAGE = "Average"


def td_report(acc_percent: float, mean_tokens: float, alpha: float = 1.0) -> float:
    """Table-style thinking density: percent accuracy over ``mean_tokens ** alpha``."""
    if mean_tokens <= 0:
        raise InputError("mean token count must be positive")
    if acc_percent == 0:
        return 0.0
    return acc_percent / mean_tokens**alpha


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    policy: str
    acc_percent: float
    mean_tokens: float
    td_report: float
    n_questions: int = 0
    n_runs: int = 0
    correct_runs: int = 0


@dataclass
class EvalReport:
    """Rows per (dataset, policy) plus one macro-averaged row per policy.

    The average row takes the plain mean of the per-dataset accuracy, token
    and density columns, so its density is *not* its own accuracy over its
    own tokens.
    """

    rows: list[ReportRow]
    alpha: float = 1.0

    def averages(self) -> list[ReportRow]:
        by_policy: dict[str, list[ReportRow]] = defaultdict(list)
        for row in self.rows:
            by_policy[row.policy].append(row)
        out = []
        for policy, rows in by_policy.items():
            n = len(rows)
            out.append(
                ReportRow(
                    dataset=AVERAGE,
                    policy=policy,
                    acc_percent=sum(r.acc_percent for r in rows) / n,
                    mean_tokens=sum(r.mean_tokens for r in rows) / n,
                    td_report=sum(r.td_report for r in rows) / n,
                    n_questions=sum(r.n_questions for r in rows),
                    n_runs=sum(r.n_runs for r in rows),
                    correct_runs=sum(r.correct_runs for r in rows),
                )
            )
        return out

    def all_rows(self) -> list[ReportRow]:
        return self.rows + self.averages()

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "rows": [asdict(r) for r in self.rows],
            "averages": [asdict(r) for r in self.averages()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        names = list(ReportRow.__dataclass_fields__)
        writer = csv.DictWriter(buffer, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in self.all_rows():
            writer.writerow(asdict(row))
        return buffer.getvalue()

    def to_markdown(self) -> str:
        datasets = sorted({r.dataset for r in self.rows})
        policies = list(dict.fromkeys(r.policy for r in self.rows))
        cells = {(r.policy, r.dataset): r for r in self.all_rows()}
        header = ["Method"]
        for name in datasets + [AVERAGE]:
            header += [f"{name} ACC(#Token)", f"{name} TD"]
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for policy in policies:
            line = [policy]
            for name in datasets + [AVERAGE]:
                row = cells.get((policy, name))
                if row is None:
                    line += ["-", "-"]
                else:
                    line += [f"{row.acc_percent:.2f}({row.mean_tokens:.2f})", f"{row.td_report:.2f}"]
            lines.append("| " + " | ".join(line) + " |")
        return "\n".join(lines) + "\n"


def report(answers: Iterable[RoutedAnswer], alpha: float = 1.0) -> EvalReport:
    """Accuracy %, mean completion tokens and density per (dataset, policy)."""
    groups: dict[tuple[str, str], list[RoutedAnswer]] = defaultdict(list)
    for item in answers:
        if not item.complete:
            raise InputError(f"answer for {item.question_id!r} ({item.policy}) has failed runs")
        groups[(item.dataset, item.policy)].append(item)
    if not groups:
        raise InputError("nothing to report: no answers")
    rows = []
    for (dataset, policy), items in sorted(groups.items()):
        n_runs = sum(len(a.runs) for a in items)
        correct = sum(a.correct_count for a in items)
        acc = 100.0 * correct / n_runs
        tokens = sum(a.total_tokens for a in items) / n_runs
        rows.append(ReportRow(dataset, policy, acc, tokens, td_report(acc, tokens, alpha), len(items), n_runs, correct))
    return EvalReport(rows, alpha)


def report_from_aggregates(aggregates: Iterable[Mapping[str, Any]], alpha: float = 1.0) -> EvalReport:
    """Report from precomputed ``(dataset, policy, acc_percent, mean_tokens)`` rows."""
    rows = []
    for agg in aggregates:
        acc = float(agg["acc_percent"])
        tokens = float(agg["mean_tokens"])
        rows.append(ReportRow(str(agg["dataset"]), str(agg["policy"]), acc, tokens, td_report(acc, tokens, alpha)))
    if not rows:
        raise InputError("nothing to report: no aggregate rows")
    return EvalReport(rows, alpha)


def _complete_groups(records: Iterable[ProbeRecord]) -> dict[str, dict[ThinkingMode, ProbeRecord]]:
    groups = group_records(records)
    broken = sorted(
        qid for qid, g in groups.items() if any(m not in g or not g[m].complete for m in MODES)
    )
    if broken:
        raise InputError(f"missing or incomplete mode records for question(s): {broken}")
    return groups


def oracle_assignments(records: Iterable[ProbeRecord], params: DensityParams | None = None) -> dict[str, ThinkingMode]:
    """Density-argmax mode per question (cheaper mode on ties)."""
    params = params or DensityParams()
    return {
        qid: argmax_mode({m: thinking_density(g[m], params) for m in MODES})
        for qid, g in sorted(_complete_groups(records).items())
    }


@dataclass(frozen=True)
class ModeObjectives:
    mean_log_acc: float
    mean_neg_log_tok: float
    mean_log_density: float


@dataclass
class ParetoVerdict:
    """Oracle router against each fixed mode over questions all modes answer at least once.

    ``combined_gap[m]`` is the mean of ``logE(oracle) - logE(m)``, non-negative
    by construction. ``dominates[m]`` applies the two-objective dominance
    test, which the pointwise argmax does not guarantee.
    """

    alpha: float
    admissible_count: int
    excluded_zero_accuracy_count: int
    modes: dict[str, ModeObjectives] = field(default_factory=dict)
    oracle: ModeObjectives | None = None
    combined_gap: dict[str, float] = field(default_factory=dict)
    acc_at_least: dict[str, bool] = field(default_factory=dict)
    eff_at_least: dict[str, bool] = field(default_factory=dict)
    dominates: dict[str, bool] = field(default_factory=dict)
    oracle_mode_counts: dict[str, int] = field(default_factory=dict)

    @property
    def vacuous(self) -> bool:
        return self.admissible_count == 0

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["vacuous"] = self.vacuous
        return out


def pareto_check(records: Iterable[ProbeRecord], params: DensityParams | None = None) -> ParetoVerdict:
    params = params or DensityParams()
    groups = _complete_groups(records)
    admissible = {q: g for q, g in groups.items() if all(g[m].correct_count > 0 for m in MODES)}
    verdict = ParetoVerdict(
        alpha=params.alpha,
        admissible_count=len(admissible),
        excluded_zero_accuracy_count=len(groups) - len(admissible),
    )
    if not admissible:
        return verdict

    n = len(admissible)
    log_acc = {m: [] for m in MODES}
    neg_log_tok = {m: [] for m in MODES}
    log_e = {m: [] for m in MODES}
    oracle_acc, oracle_eff, oracle_log_e = [], [], []
    counts = {m.value: 0 for m in MODES}
    for qid in sorted(admissible):
        group = admissible[qid]
        scores = {m: log_density(group[m], params) for m in MODES}
        for m in MODES:
            record = group[m]
            log_acc[m].append(math.log(record.correct_count * params.scale / record.k))
            neg_log_tok[m].append(-math.log(record.avg_tokens))
            log_e[m].append(scores[m])
        best = argmax_mode(scores)
        counts[best.value] += 1
        oracle_acc.append(log_acc[best][-1])
        oracle_eff.append(neg_log_tok[best][-1])
        oracle_log_e.append(scores[best])

    verdict.oracle = ModeObjectives(sum(oracle_acc) / n, sum(oracle_eff) / n, sum(oracle_log_e) / n)
    verdict.oracle_mode_counts = counts
    for m in MODES:
        obj = ModeObjectives(sum(log_acc[m]) / n, sum(neg_log_tok[m]) / n, sum(log_e[m]) / n)
        verdict.modes[m.value] = obj
        # mean of pointwise differences; each term is >= 0 exactly
        verdict.combined_gap[m.value] = sum(o - x for o, x in zip(oracle_log_e, log_e[m])) / n
        acc_ge = verdict.oracle.mean_log_acc >= obj.mean_log_acc
        eff_ge = verdict.oracle.mean_neg_log_tok >= obj.mean_neg_log_tok
        strict = verdict.oracle.mean_log_acc > obj.mean_log_acc or verdict.oracle.mean_neg_log_tok > obj.mean_neg_log_tok
        verdict.acc_at_least[m.value] = acc_ge
        verdict.eff_at_least[m.value] = eff_ge
        verdict.dominates[m.value] = acc_ge and eff_ge and strict
    return verdict


def router_oracle_agreement(model: MindRouter, dataset: Sequence[TMCExample]) -> float:
    """Fraction of examples whose routed mode equals the stored label."""
    if not dataset:
        raise InputError("agreement over an empty dataset is undefined")
    predicted = model.predict([ex.question_text for ex in dataset])
    hits = sum(p == ex.label.value for p, ex in zip(predicted, dataset))
    return hits / len(dataset)
