"""Confidence-gated query decomposition over a retriever and a language model.

The tree is built breadth-first from a queue. For every popped node the
engine retrieves top-k passages, asks the model for a direct answer and
accepts it when its confidence clears ``tau_a``; otherwise it tries to split
the question into sub-questions, and when that is not possible (or the depth
limit is reached) it turns the node into an entity node whose anchors drive
a second, entity-level retrieval. Once the queue drains, results are folded
bottom-up into a final answer.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .core import DecompositionTree, EngineConfig, NodeKind, TreeNode, validate_config
from .llm import (
    LLM,
    EmptyAnswer,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    confidence,
    extract_answer_span,
    span_text,
)
from .prompts import CANNOT_ANSWER, NO_EVIDENCE, REPROMPT_SUFFIX, PromptSet, load_prompt_set
from .retrieval import Hit, RetrievalError, Retriever

log = logging.getLogger(__name__)


class MalformedModelOutput(Exception):
    """The model's structured reply could not be parsed, even after a retry."""


@dataclass(frozen=True)
class Candidate:
    text: str
    confidence: float


@dataclass(frozen=True)
class Answer:
    text: str
    confidence: float


@dataclass(frozen=True)
class Split:
    sub_queries: tuple[str, ...]
    candidate: Candidate | None = None


@dataclass(frozen=True)
class Entities:
    entities: tuple[str, ...]
    candidate: Candidate | None = None


DecomposeOutcome = Answer | Split | Entities


@dataclass
class _Failed:
    reason: str


@dataclass
class _Step:
    hits: list[Hit] | None
    outcome: DecomposeOutcome | _Failed
    forced: bool = False


def _parse_json_object(text: str) -> dict | None:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


def _same_question(a: str, b: str) -> bool:
    return " ".join(a.split()).casefold() == " ".join(b.split()).casefold()


class Engine:
    def __init__(
        self,
        cfg: EngineConfig,
        llm: LLM,
        retriever: Retriever,
        prompts: PromptSet | None = None,
    ):
        self.cfg = validate_config(cfg)
        self.llm = llm
        self.retriever = retriever
        self.prompts = prompts or load_prompt_set(cfg.prompt_set)

    # -- model calls -------------------------------------------------------

    def _generate(self, prompt: str, tree: DecompositionTree | None = None) -> GenerationResult:
        if tree is not None:
            tree.telemetry.backtrace_calls += 1
        req = GenerationRequest(prompt=prompt, max_tokens=self.cfg.max_tokens)
        return self.llm.generate(req)

    def format_context(self, doc_ids: Sequence[str]) -> str:
        if not doc_ids:
            return "(none)"
        lines = []
        for i, doc_id in enumerate(doc_ids, start=1):
            doc = self.retriever.get(doc_id)
            head = f"{doc.title}: " if doc.title else ""
            lines.append(f"[{i}] {head}{doc.text}")
        return "\n".join(lines)

    def _render(self, name: str, node: TreeNode, context: Sequence[str]) -> str:
        return self.prompts.render(
            name,
            query=node.query,
            context=self.format_context(context),
            parent_query=node.parent_query,
            max_branching=self.cfg.max_branching,
        )

    def attempt_answer(self, node: TreeNode, context: Sequence[str]) -> Candidate | None:
        """One answer-attempt generation; ``None`` when the model declines."""
        result = self._generate(self._render("answer", node, context))
        span = extract_answer_span(result, self.cfg.answer_marker)
        text = span_text(span)
        if not text or CANNOT_ANSWER in text:
            return None
        return Candidate(text, confidence(span))

    def _structured(self, name: str, node: TreeNode, context: Sequence[str], parse):
        prompt = self._render(name, node, context)
        for attempt in range(2):
            result = self._generate(prompt if attempt == 0 else prompt + REPROMPT_SUFFIX)
            parsed = parse(result.text)
            if parsed is not None:
                return parsed
        raise MalformedModelOutput(f"{name} reply for node {node.id} could not be parsed")

    def _parse_split(self, node: TreeNode):
        def parse(text: str):
            obj = _parse_json_object(text)
            if obj is None or not isinstance(obj.get("decomposable"), bool):
                return None
            if not obj["decomposable"]:
                return ()
            subs = obj.get("sub_queries")
            if not isinstance(subs, list) or not 1 <= len(subs) <= self.cfg.max_branching:
                return None
            if not all(isinstance(s, str) and s.strip() for s in subs):
                return None
            subs = tuple(s.strip() for s in subs)
            if any(_same_question(s, node.query) for s in subs):
                return None
            return subs

        return parse

    def _parse_entities(self, text: str):
        obj = _parse_json_object(text)
        if obj is None:
            return None
        ents = obj.get("entities")
        if not isinstance(ents, list) or not 1 <= len(ents) <= self.cfg.max_branching:
            return None
        if not all(isinstance(e, str) and e.strip() for e in ents):
            return None
        return tuple(e.strip() for e in ents)

    def decide(self, node: TreeNode, context: Sequence[str] | None = None) -> DecomposeOutcome:
        """Answer, split or abstract into entities, in that order of preference."""
        ctx = node.context if context is None else context
        candidate = self.attempt_answer(node, ctx)
        if candidate is not None and candidate.confidence >= self.cfg.tau_a:
            return Answer(candidate.text, candidate.confidence)
        if node.depth < self.cfg.max_depth:
            subs = self._structured("decompose", node, ctx, self._parse_split(node))
            if subs:
                return Split(subs, candidate)
        ents = self._structured("entities", node, ctx, self._parse_entities)
        return Entities(ents, candidate)

    # -- construction ------------------------------------------------------

    def _step(self, node: TreeNode, reserved: bool) -> _Step:
        """Retrieve and decide for one node without touching the tree."""
        hits = None
        try:
            if not reserved:
                cand = self.attempt_answer(node, node.context)
                if cand is None:
                    return _Step(None, _Failed("forced answer declined"), forced=True)
                return _Step(None, Answer(cand.text, cand.confidence), forced=True)
            hits = self.retriever.retrieve(node.query, self.cfg.top_k)
            ctx = [doc_id for doc_id, _ in hits]
            return _Step(hits, self.decide(node, ctx))
        except (MalformedModelOutput, ProtocolError, EmptyAnswer, RetrievalError) as exc:
            log.warning("node %d failed: %s", node.id, exc)
            return _Step(hits, _Failed(f"{type(exc).__name__}: {exc}"), forced=not reserved)

    def _record_hits(self, tree: DecompositionTree, hits: list[Hit]) -> list[str]:
        seen = set(tree.telemetry.retrieved)
        ids = []
        for doc_id, _ in hits:
            ids.append(doc_id)
            if doc_id not in seen:
                seen.add(doc_id)
                tree.telemetry.retrieved.append(doc_id)
        return ids

    def _apply(self, tree: DecompositionTree, node: TreeNode, step: _Step, queue: deque) -> None:
        tel = tree.telemetry
        if step.forced:
            tel.forced.append(node.id)
        if step.hits is not None:
            node.context = self._record_hits(tree, step.hits)
        outcome = step.outcome
        if isinstance(outcome, _Failed):
            node.kind = NodeKind.ANSWER
            node.answer = ""
            node.confidence = None
            tel.failed[node.id] = outcome.reason
            return
        if isinstance(outcome, Answer):
            node.kind = NodeKind.ANSWER
            node.answer = outcome.text
            node.confidence = outcome.confidence
            return
        if outcome.candidate is not None:
            node.answer = outcome.candidate.text
            node.confidence = outcome.candidate.confidence
            tel.rejected.append(
                {
                    "node": node.id,
                    "query": node.query,
                    "answer": outcome.candidate.text,
                    "confidence": outcome.candidate.confidence,
                }
            )
        if isinstance(outcome, Split):
            for sub in outcome.sub_queries:
                child = tree.add_node(
                    NodeKind.QUERY, query=sub, parent_query=node.query, depth=node.depth + 1
                )
                node.children.append(child.id)
                queue.append(child.id)
            return
        node.kind = NodeKind.ENTITY
        node.entities = list(outcome.entities)
        if tree.retrieval_calls >= self.cfg.retrieval_cap:
            log.info("retrieval cap reached; entity node %d keeps its query context", node.id)
            return
        tree.retrieval_calls += 1
        try:
            hits = self.retriever.retrieve_entities(node.entities, self.cfg.top_k)
        except RetrievalError as exc:
            log.warning("entity retrieval for node %d failed: %s", node.id, exc)
            return
        node.context = self._record_hits(tree, hits)

    def build_tree(self, question: str) -> DecompositionTree:
        if not question or not question.strip():
            raise ValueError("question must be nonempty")
        tree = DecompositionTree()
        root = tree.add_node(NodeKind.QUERY, query=question.strip(), depth=0)
        queue: deque[int] = deque([root.id])
        pool = ThreadPoolExecutor(self.cfg.parallelism) if self.cfg.parallelism > 1 else None
        try:
            while queue:
                batch = [queue.popleft() for _ in range(min(len(queue), self.cfg.parallelism))]
                jobs = []
                for nid in batch:
                    reserved = tree.retrieval_calls < self.cfg.retrieval_cap
                    if reserved:
                        tree.retrieval_calls += 1
                    jobs.append((tree.node(nid), reserved))
                if pool is None:
                    steps = [self._step(n, r) for n, r in jobs]
                else:
                    steps = list(pool.map(lambda job: self._step(*job), jobs))
                for (node, _), step in zip(jobs, steps):
                    self._apply(tree, node, step, queue)
        finally:
            if pool is not None:
                pool.shutdown()
        return tree

    # -- backtracing -------------------------------------------------------

    def backtrace(self, tree: DecompositionTree) -> str:
        results: dict[int, str] = {}
        for node in tree.post_order():
            if node.kind is NodeKind.ANSWER:
                results[node.id] = node.answer
            elif node.kind is NodeKind.ENTITY:
                out = self._generate(self._render("summarize", node, node.context), tree)
                results[node.id] = out.text.strip()
            else:
                if not node.children:
                    raise ValueError(f"query node {node.id} has no children")
                lines = []
                for cid in node.children:
                    child = tree.node(cid)
                    lines.append(f"- Sub-question: {child.query}\n  Result: {results[cid] or NO_EVIDENCE}")
                prompt = self.prompts.render(
                    "aggregate",
                    query=node.query,
                    children="\n".join(lines),
                    parent_query=node.parent_query,
                    context=self.format_context(node.context),
                )
                out = self._generate(prompt, tree)
                text = span_text(extract_answer_span(out, self.cfg.answer_marker))
                results[node.id] = text or out.text.strip()
        tree.telemetry.results = results
        tree.final_answer = results[tree.root_id]
        return tree.final_answer

    def run(self, question: str) -> tuple[str, DecompositionTree]:
        start = time.perf_counter()
        tree = self.build_tree(question)
        answer = self.backtrace(tree)
        tree.wall_time = time.perf_counter() - start
        return answer, tree


def decide(node: TreeNode, cfg: EngineConfig, llm: LLM, retriever: Retriever) -> DecomposeOutcome:
    return Engine(cfg, llm, retriever).decide(node)


def build_tree(question: str, cfg: EngineConfig, llm: LLM, retriever: Retriever) -> DecompositionTree:
    return Engine(cfg, llm, retriever).build_tree(question)


def backtrace(tree: DecompositionTree, cfg: EngineConfig, llm: LLM, retriever: Retriever) -> str:
    return Engine(cfg, llm, retriever).backtrace(tree)


def run(question: str, cfg: EngineConfig, llm: LLM, retriever: Retriever) -> tuple[str, DecompositionTree]:
    return Engine(cfg, llm, retriever).run(question)
