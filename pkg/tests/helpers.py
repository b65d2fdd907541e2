"""Shared builders and brute-force oracles for the test suite.

The oracles here are written against plain dicts and lists so they share
no code path with the package implementation they check.
"""

from __future__ import annotations

import math
import random

from moderoute.modes import ThinkingMode
from moderoute.probe import ProbeRecord, RunResult

FAST, NORMAL, SLOW = ThinkingMode.FAST, ThinkingMode.NORMAL, ThinkingMode.SLOW
MODE_NAMES = ("fast", "normal", "slow")


def make_record(qid, mode, correct, tokens, text="question text", dataset="d", failed=()):
    """ProbeRecord from per-run correctness flags and token counts."""
    if isinstance(tokens, int):
        tokens = [tokens] * len(correct)
    runs = tuple(
        RunResult(correct=bool(c), output_tokens=t, failed=i in failed)
        for i, (c, t) in enumerate(zip(correct, tokens))
    )
    return ProbeRecord(question_id=qid, mode=ThinkingMode.parse(mode), runs=runs, dataset=dataset, question_text=text)


def random_probe_log(n_questions, seed, k=10, incomplete_rate=0.05, max_text=140):
    """Random log plus the same data as plain dicts for the oracles."""
    rng = random.Random(seed)
    records, raw = [], []
    for i in range(n_questions):
        qid = f"q{i:04d}"
        text = "x" * rng.randint(5, max_text)
        # bias token profiles so the monotonicity filter is exercised both ways
        base = sorted(rng.randint(1, 400) for _ in range(3)) if rng.random() < 0.6 else [rng.randint(1, 400) for _ in range(3)]
        entry = {"id": qid, "text": text, "modes": {}}
        for mode_index, name in enumerate(MODE_NAMES):
            p = rng.choice([0.0, 0.3, 0.7, 0.9, 1.0, rng.random()])
            correct = [rng.random() < p for _ in range(k)]
            tokens = [max(1, base[mode_index] + rng.randint(-3, 3)) for _ in range(k)]
            failed = {0} if rng.random() < incomplete_rate else set()
            records.append(make_record(qid, name, correct, tokens, text=text, failed=failed))
            entry["modes"][name] = {"correct": correct, "tokens": tokens, "failed": bool(failed)}
        raw.append(entry)
    rng.shuffle(records)
    return records, raw


def oracle_pipeline(raw, threshold_num=4, threshold_den=5, max_length=4096, alpha=1.0):
    """Independent filter cascade + labeling over the plain-dict log."""
    counts = {"incomplete": 0, "competence": 0, "monotonicity": 0, "length": 0}
    labels = {}
    for entry in raw:
        modes = entry["modes"]
        if any(modes[m]["failed"] for m in MODE_NAMES):
            counts["incomplete"] += 1
            continue
        # integer cross-multiplication: correct/k >= num/den
        if all(sum(modes[m]["correct"]) * threshold_den < threshold_num * len(modes[m]["correct"]) for m in MODE_NAMES):
            counts["competence"] += 1
            continue
        avg = [sum(modes[m]["tokens"]) / len(modes[m]["tokens"]) for m in MODE_NAMES]
        if not (avg[0] <= avg[1] and avg[1] <= avg[2]):
            counts["monotonicity"] += 1
            continue
        if max_length is not None and len(entry["text"]) > max_length:
            counts["length"] += 1
            continue
        best_name, best_value = None, None
        for m, t in zip(MODE_NAMES, avg):
            acc = sum(modes[m]["correct"]) / len(modes[m]["correct"])
            value = acc / (t**alpha)
            if best_value is None or value > best_value:
                best_name, best_value = m, value
        labels[entry["id"]] = best_name
    return labels, counts


FILLER = (
    "the a of to and in is it that for on was with as by at from this be are or have "
    "some many very quite every each other more most such only own same so than too"
).split() + [f"w{i}" for i in range(150)]
KEYWORDS = {"fast": "capital", "normal": "integral", "slow": "theorem"}


def keyword_dataset(n, seed):
    """Texts with one class keyword buried in random filler, classes balanced."""
    rng = random.Random(seed)
    texts, labels = [], []
    for i in range(n):
        label = MODE_NAMES[i % 3]
        words = [rng.choice(FILLER) for _ in range(rng.randint(6, 14))]
        words.insert(rng.randint(0, len(words)), KEYWORDS[label])
        texts.append(" ".join(words))
        labels.append(label)
    return texts, labels


def log_objectives(acc, tok, alpha):
    return math.log(acc) - alpha * math.log(tok)


# -- scripted two-kind scenario ---------------------------------------------------

EASY_TOPICS = ["capital of France", "color of the sky", "number of legs on a cat", "opposite of hot", "first letter of the alphabet", "day after Monday"]
HARD_TOPICS = ["theorem on primes", "theorem on graphs", "theorem on limits", "theorem on groups", "theorem on series", "theorem on sets"]


def scenario(n_each=6):
    """Questions plus a mock script where easy items need only Fast and hard items need Slow.

    Returns (questions as dicts, script dict keyed (qid, mode) -> (text, tokens)).
    """
    questions, script = [], {}
    for i in range(n_each):
        for kind, topics in (("easy", EASY_TOPICS), ("hard", HARD_TOPICS)):
            qid = f"{kind}{i}"
            gold = 10 + i if kind == "easy" else 100 + i
            questions.append({"id": qid, "dataset": kind, "question": f"Question about the {topics[i % len(topics)]}?", "task": "numeric", "answer": gold})
            wrong = gold + 1
            if kind == "easy":
                script[(qid, "fast")] = (f"{gold}", 2)
                script[(qid, "normal")] = (f"Thinking briefly, {gold}", 20)
                script[(qid, "slow")] = (f"Step 1 ... final answer {gold}", 200)
            else:
                script[(qid, "fast")] = (f"{wrong}", 2)
                script[(qid, "normal")] = (f"Probably {wrong}", 30)
                script[(qid, "slow")] = (f"Decompose, verify ... final answer {gold}", 300)
    return questions, script


def write_jsonl(path, rows):
    import json

    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")


def write_scenario(directory, n_each=6):
    questions, script = scenario(n_each)
    qpath, spath = directory / "questions.jsonl", directory / "mock.jsonl"
    write_jsonl(qpath, questions)
    write_jsonl(spath, [{"id": q, "mode": m, "text": t, "tokens": n} for (q, m), (t, n) in script.items()])
    return qpath, spath
