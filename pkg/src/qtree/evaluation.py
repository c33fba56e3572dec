"""QA metrics and dataset handling.

Answers are normalized the usual extractive-QA way: lowercase, drop
punctuation, drop the articles a/an/the, collapse whitespace.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .retrieval import ParseError

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


class AlignmentError(ValueError):
    pass


class MissingField(ValueError):
    def __init__(self, name: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}missing field {name!r}")
        self.name = name
        self.line = line


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]
    gold_doc_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"example {self.id!r} has no gold answers")


@dataclass
class EvalRecord:
    id: str
    predicted: str
    retrieved_ids: list[str] = field(default_factory=list)
    retrieval_calls: int = 0
    wall_time: float = 0.0
    tree: dict[str, Any] | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class MetricsReport:
    n: int
    em: float
    f1: float
    recall: float | None
    full_coverage_rate: float | None
    rn: float
    re: float | None
    efr: float | None
    mean_time: float
    efr_applicable: int = 0
    failures: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("golds must be nonempty")
    if not pred.strip():
        return 0
    norm = normalize_answer(pred)
    return int(any(norm == normalize_answer(g) for g in golds))


def _token_f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(pred: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("golds must be nonempty")
    pred_tokens = normalize_answer(pred).split()
    return max(_token_f1(pred_tokens, normalize_answer(g).split()) for g in golds)


def _align(records: Sequence[EvalRecord], examples: Sequence[QAExample]) -> list[tuple[EvalRecord, QAExample]]:
    by_id = {ex.id: ex for ex in examples}
    if len(by_id) != len(examples):
        raise AlignmentError("duplicate example ids")
    rec_ids = [r.id for r in records]
    if len(set(rec_ids)) != len(rec_ids) or set(rec_ids) != set(by_id):
        raise AlignmentError("record ids do not match example ids")
    return [(r, by_id[r.id]) for r in records]


def covered(record: EvalRecord, example: QAExample) -> bool:
    return set(example.gold_doc_ids) <= set(record.retrieved_ids)


def efr(records: Sequence[EvalRecord], examples: Sequence[QAExample]) -> float | None:
    """Share of examples whose gold evidence was fully retrieved but answered wrongly.

    Examples without gold document ids are excluded; ``None`` when none remain.
    """
    pairs = [(r, ex) for r, ex in _align(records, examples) if ex.gold_doc_ids]
    if not pairs:
        return None
    hits = sum(1 for r, ex in pairs if covered(r, ex) and not exact_match(r.predicted, ex.gold_answers))
    return hits / len(pairs)


def retrieval_efficiency(pairs: Iterable[tuple[float, float]]) -> float:
    """Mean of per-dataset ``recall / rn`` ratios."""
    ratios = [recall / rn for recall, rn in pairs]
    if not ratios:
        raise ValueError("no (recall, rn) pairs")
    return sum(ratios) / len(ratios)


def aggregate(records: Sequence[EvalRecord], examples: Sequence[QAExample]) -> MetricsReport:
    pairs = _align(records, examples)
    n = len(pairs)
    if n == 0:
        return MetricsReport(0, 0.0, 0.0, None, None, 0.0, None, None, 0.0)
    em = sum(exact_match(r.predicted, ex.gold_answers) for r, ex in pairs) / n
    f1_mean = sum(f1(r.predicted, ex.gold_answers) for r, ex in pairs) / n
    rn = sum(r.retrieval_calls for r, _ in pairs) / n
    mean_time = sum(r.wall_time for r, _ in pairs) / n
    gold = [(r, ex) for r, ex in pairs if ex.gold_doc_ids]
    recall = coverage = efr_value = re_value = None
    if gold:
        per_q = [
            len(set(ex.gold_doc_ids) & set(r.retrieved_ids)) / len(set(ex.gold_doc_ids))
            for r, ex in gold
        ]
        recall = 100.0 * sum(per_q) / len(gold)
        coverage = 100.0 * sum(covered(r, ex) for r, ex in gold) / len(gold)
        efr_value = 100.0 * efr([r for r, _ in gold], [ex for _, ex in gold])
        if rn > 0:
            re_value = retrieval_efficiency([(recall, rn)])
    return MetricsReport(
        n=n,
        em=100.0 * em,
        f1=100.0 * f1_mean,
        recall=recall,
        full_coverage_rate=coverage,
        rn=rn,
        re=re_value,
        efr=efr_value,
        mean_time=mean_time,
        efr_applicable=len(gold),
        failures=sum(1 for r, _ in pairs if r.error),
    )


def aggregate_datasets(reports: Sequence[MetricsReport]) -> float | None:
    """Cross-dataset retrieval efficiency: mean of each dataset's recall/rn."""
    usable = [(r.recall, r.rn) for r in reports if r.recall is not None and r.rn > 0]
    return retrieval_efficiency(usable) if usable else None


def load_dataset(path: str | Path) -> list[QAExample]:
    examples: list[QAExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            for name in ("id", "question", "gold_answers"):
                if name not in obj:
                    raise MissingField(name, lineno)
            golds = obj["gold_answers"]
            if isinstance(golds, str):
                golds = [golds]
            if not golds:
                raise MissingField("gold_answers", lineno)
            examples.append(
                QAExample(
                    id=str(obj["id"]),
                    question=obj["question"],
                    gold_answers=tuple(golds),
                    gold_doc_ids=tuple(str(d) for d in obj.get("gold_doc_ids", [])),
                )
            )
    return examples


CSV_FIELDS = ("n", "em", "f1", "recall", "full_coverage_rate", "rn", "re", "efr", "mean_time")


def report_csv_row(report: MetricsReport) -> dict[str, Any]:
    data = report.to_dict()
    return {k: ("" if data[k] is None else data[k]) for k in CSV_FIELDS}
