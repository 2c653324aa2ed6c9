"""Binary-verdict evaluation: generate, judge correct/incorrect, aggregate."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .data import NUMBER_WORDS, QAExample
from .errors import ConfigError, EvaluationError, JudgeProtocolError

_WORD_TO_DIGIT = {w: str(i) for i, w in enumerate(NUMBER_WORDS)}
_PUNCT = re.compile(r"[^\w\s]|_")

JUDGE_TEMPLATE = (
    "You are grading answers to visual questions.\n"
    "Question: {question}\n"
    "Reference answer: {reference}\n"
    "Model answer: {prediction}\n"
    "Reply with exactly one word: CORRECT if the model answer agrees with the reference, "
    "otherwise INCORRECT."
)
JUDGE_TEMPLATE_HASH = hashlib.sha256(JUDGE_TEMPLATE.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class JudgeVerdict:
    verdict: str  # "correct" | "incorrect"
    judge_kind: str = "exact"
    rationale: str | None = None

    def __post_init__(self):
        if self.verdict not in ("correct", "incorrect"):
            raise ValueError(f"verdict must be correct/incorrect, got {self.verdict!r}")

    @property
    def correct(self) -> bool:
        return self.verdict == "correct"


def normalize(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace, spell numbers as digits."""
    words = _PUNCT.sub(" ", text.lower()).split()
    return " ".join(_WORD_TO_DIGIT.get(w, w) for w in words)


def judge_exact(prediction: str, reference_short: str) -> JudgeVerdict:
    pred, ref = normalize(prediction), normalize(reference_short)
    hit = bool(ref) and f" {ref} " in f" {pred} "
    return JudgeVerdict("correct" if hit else "incorrect", "exact")


def parse_judge_reply(reply: str) -> str:
    word = reply.strip()
    if word.upper() == "CORRECT":
        return "correct"
    if word.upper() == "INCORRECT":
        return "incorrect"
    raise JudgeProtocolError(f"judge reply is not CORRECT/INCORRECT: {reply!r}")


def judge_external(question: str, prediction: str, reference: str, client) -> JudgeVerdict:
    prompt = JUDGE_TEMPLATE.format(question=question, reference=reference, prediction=prediction)
    reply = client.complete(prompt)
    return JudgeVerdict(parse_judge_reply(reply), "external", rationale=reply.strip())


Judge = Callable[[QAExample, str], JudgeVerdict]


def exact_judge(example: QAExample, prediction: str) -> JudgeVerdict:
    return judge_exact(prediction, example.reference_short)


def external_judge(client) -> Judge:
    def judge(example: QAExample, prediction: str) -> JudgeVerdict:
        return judge_external(example.instruction, prediction, example.reference_short, client)

    judge.kind = "external"  # type: ignore[attr-defined]
    return judge


# -- reports -------------------------------------------------------------------
def format_row(name: str, values: Sequence[float]) -> str:
    return " | ".join([name] + [f"{v:.1f}" for v in values])


def parse_row(line: str) -> tuple[str, list[float]]:
    """Parse ``name | 49.3 | 43.4`` (or the tab-separated form)."""
    cells = [c.strip() for c in (line.split("|") if "|" in line else line.split("\t"))]
    if len(cells) < 2:
        raise ValueError(f"not a table row: {line!r}")
    return cells[0], [float(c) for c in cells[1:]]


def accuracy(correct: int, n: int) -> float:
    return 100.0 * correct / n


@dataclass
class AccuracyReport:
    columns: list[str]
    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    verdicts: list[dict] = field(default_factory=list)

    def add_verdicts(self, column: str, records: list[dict]) -> None:
        if column not in self.columns:
            self.columns.append(column)
        self.verdicts.extend(records)
        self.rows, self.counts = recount(self.verdicts)

    def render_table(self, title: str = "task") -> str:
        lines = [" | ".join([title] + self.columns)]
        for task in sorted(self.rows, key=lambda t: (t == "overall", t)):
            lines.append(format_row(task, [self.rows[task].get(c, float("nan")) for c in self.columns]))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path: str | Path, verdicts_path: str | Path | None = None) -> None:
        d = self.to_dict()
        verdicts = d.pop("verdicts")
        Path(json_path).write_text(json.dumps(d, indent=2, sort_keys=True), encoding="utf-8")
        if verdicts_path is not None:
            with open(verdicts_path, "w", encoding="utf-8") as fh:
                for v in verdicts:
                    fh.write(json.dumps(v, sort_keys=True) + "\n")


def recount(verdicts: Sequence[dict]) -> tuple[dict[str, dict[str, float]], dict[str, dict[str, int]]]:
    """Per (task, column) and overall accuracy from stored verdict records; order independent."""
    tallies: dict[tuple[str, str], list[int]] = {}
    for v in verdicts:
        for task in (v["task_tag"], "overall"):
            t = tallies.setdefault((task, v["column"]), [0, 0])
            t[0] += v["verdict"] == "correct"
            t[1] += 1
    rows: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for (task, col), (c, n) in sorted(tallies.items()):
        rows.setdefault(task, {})[col] = accuracy(c, n)
        counts.setdefault(task, {})[col] = n
    return rows, counts


def evaluate(model, examples: Sequence[QAExample], judge: Judge = exact_judge, column: str = "model",
             report: AccuracyReport | None = None) -> AccuracyReport:
    """Greedy-answer every example, judge it, and tabulate accuracy per task and overall."""
    if not examples:
        raise EvaluationError("cannot evaluate on an empty split")
    predictions = model.answer_batch(list(examples))
    records = []
    for ex, pred in zip(examples, predictions):
        v = judge(ex, pred)
        records.append({"column": column, "id": ex.id, "task_tag": ex.task_tag, "instruction": ex.instruction,
                        "prediction": pred, "reference": ex.reference_short, "verdict": v.verdict,
                        "judge_kind": v.judge_kind})
    report = report or AccuracyReport(columns=[], metadata={
        "judge_kind": getattr(judge, "kind", "exact"), "judge_template_hash": JUDGE_TEMPLATE_HASH})
    report.add_verdicts(column, records)
    return report


class EchoOracle:
    """Answers every question with its reference; for harness checks."""

    def answer_batch(self, examples):
        return [ex.reference_short for ex in examples]


class SilentModel:
    def answer_batch(self, examples):
        return ["" for _ in examples]


# -- ablation ------------------------------------------------------------------
def trial_labels(seeds: Sequence[int]) -> list[str]:
    """``[1, 1, 2]`` -> ``["1", "1#2", "2"]`` so repeated seeds get their own columns."""
    seen: dict[int, int] = {}
    out = []
    for s in seeds:
        seen[s] = seen.get(s, 0) + 1
        out.append(str(s) if seen[s] == 1 else f"{s}#{seen[s]}")
    return out


@dataclass
class AblationResult:
    report: AccuracyReport
    variants: list[str]
    seeds: list[int]

    @property
    def trials(self) -> list[str]:
        return trial_labels(self.seeds)

    @staticmethod
    def column(variant: str, trial: str | int) -> str:
        return f"{variant}@{trial}"

    def acc(self, variant: str, trial: str | int, task: str = "overall") -> float:
        return self.report.rows.get(task, {}).get(self.column(variant, trial), float("nan"))

    def comparison(self, other: str, task: str) -> dict[str, int]:
        out = {"wins": 0, "ties": 0, "losses": 0}
        for t in self.trials:
            a, b = self.acc("dual_path", t, task), self.acc(other, t, task)
            out["wins" if a > b else "ties" if a == b else "losses"] += 1
        return out

    def mean(self, variant: str, task: str = "overall") -> float:
        return sum(self.acc(variant, t, task) for t in self.trials) / len(self.trials)

    def summary_lines(self, tasks: Sequence[str] = ("glyph_read", "overall")) -> list[str]:
        lines = []
        for other in self.variants:
            if other == "dual_path":
                continue
            for task in tasks:
                c = self.comparison(other, task)
                lines.append(f"dual_path vs {other} [{task}]: wins={c['wins']} ties={c['ties']} "
                             f"losses={c['losses']} not_worse={c['wins'] + c['ties']}/{len(self.seeds)}")
        for v in self.variants:
            lines.append(f"mean overall {v}: {self.mean(v):.1f}")
        return lines

    def render(self) -> str:
        return self.report.render_table() + "\n" + "\n".join(self.summary_lines())


def ablation_report(variants: Sequence[str], seeds: Sequence[int], train_fn, test_set: Sequence[QAExample],
                    judge: Judge = exact_judge) -> AblationResult:
    """``train_fn(variant, seed)`` returns a trained model; every variant shares configs and data."""
    variants = list(variants)
    if "dual_path" not in variants:
        raise ConfigError("ablation needs the dual_path variant")
    if len(set(variants)) < 2:
        raise ConfigError("ablation needs at least one comparator variant besides dual_path")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    report = AccuracyReport(columns=[], metadata={"variants": variants, "seeds": list(seeds),
                                                  "judge_template_hash": JUDGE_TEMPLATE_HASH})
    for seed, trial in zip(seeds, trial_labels(seeds)):
        for variant in variants:
            model = train_fn(variant, seed)
            evaluate(model, test_set, judge, column=AblationResult.column(variant, trial), report=report)
    return AblationResult(report, variants, list(seeds))
