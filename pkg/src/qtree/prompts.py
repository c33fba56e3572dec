"""Prompt templates used by the engine.

Each template is a ``str.format`` string. A custom set is a directory with
one ``<name>.txt`` file per template; missing files fall back to the
shipped defaults.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, fields
from pathlib import Path

CANNOT_ANSWER = "CANNOT_ANSWER"
NO_EVIDENCE = "NO_EVIDENCE"

REQUIRED = {
    "answer": ("query", "context", "parent_query"),
    "decompose": ("query", "context", "parent_query"),
    "entities": ("query", "context", "parent_query"),
    "summarize": ("query", "context"),
    "aggregate": ("query", "children"),
}

ANSWER = """[task: answer]
Use the passages to answer the question. If they are not enough, reply with exactly CANNOT_ANSWER.
Parent goal: {parent_query}
Passages:
{context}
Question: {query}
End with a line of the form "Answer: <short answer>".
"""

DECOMPOSE = """[task: decompose]
Decide whether the question can be split into at most {max_branching} simpler sub-questions.
Reply with JSON: {{"decomposable": true, "sub_queries": ["...", "..."]}} or {{"decomposable": false}}.
Parent goal: {parent_query}
Passages:
{context}
Question: {query}
"""

ENTITIES = """[task: entities]
Extract at most {max_branching} key entities or entity-centred phrases from the question to use as search anchors.
Reply with JSON: {{"entities": ["...", "..."]}}.
Parent goal: {parent_query}
Passages:
{context}
Question: {query}
"""

SUMMARIZE = """[task: summarize]
Summarize what the passages say that helps answer the question.
Passages:
{context}
Question: {query}
"""

AGGREGATE = """[task: aggregate]
Combine the sub-question results into an answer to the question. A result of NO_EVIDENCE means nothing was found.
Sub-questions:
{children}
Question: {query}
End with a line of the form "Answer: <short answer>".
"""

REPROMPT_SUFFIX = "\n[retry] The previous reply could not be parsed. Reply with the JSON object only.\n"


def placeholders(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


@dataclass(frozen=True)
class PromptSet:
    answer: str = ANSWER
    decompose: str = DECOMPOSE
    entities: str = ENTITIES
    summarize: str = SUMMARIZE
    aggregate: str = AGGREGATE

    def __post_init__(self):
        for name, required in REQUIRED.items():
            template = getattr(self, name)
            missing = [p for p in required if p not in placeholders(template)]
            if missing:
                raise ValueError(f"template {name!r} lacks placeholders {missing}")

    def render(self, name: str, **values: object) -> str:
        return getattr(self, name).format(**values)

    @classmethod
    def from_dir(cls, path: str | Path) -> PromptSet:
        root = Path(path)
        if not root.is_dir():
            raise ValueError(f"prompt set {path!r} is not a directory")
        loaded = {}
        for f in fields(cls):
            candidate = root / f"{f.name}.txt"
            if candidate.exists():
                loaded[f.name] = candidate.read_text(encoding="utf-8")
        return cls(**loaded)


def load_prompt_set(name: str) -> PromptSet:
    if name == "default":
        return PromptSet()
    return PromptSet.from_dir(name)
