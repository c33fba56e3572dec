"""Corpus ingestion and BM25 retrieval.

Tokenization lowercases and splits on runs of non-alphanumerics; there is
no stemming and no stopword list. Title and body are indexed together.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import httpx

K1 = 1.2
B = 0.75

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)

Hit = tuple[str, float]


class RetrievalError(Exception):
    pass


class EmptyQuery(RetrievalError, ValueError):
    pass


class ParseError(RetrievalError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateId(RetrievalError, ValueError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate document id {doc_id!r}")
        self.doc_id = doc_id


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError(f"document {self.id!r} has empty text")

    @property
    def indexed_text(self) -> str:
        return f"{self.title} {self.text}" if self.title else self.text


class Retriever(Protocol):
    def retrieve(self, query: str, k: int) -> list[Hit]: ...

    def retrieve_entities(self, entities: Sequence[str], k: int) -> list[Hit]: ...

    def get(self, doc_id: str) -> Document: ...


def rank(scores: dict[str, float], k: int) -> list[Hit]:
    """Top ``k`` by descending score, ties broken by ascending id."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def merge_max(result_lists: Iterable[list[Hit]], k: int) -> list[Hit]:
    merged: dict[str, float] = {}
    for hits in result_lists:
        for doc_id, score in hits:
            if doc_id not in merged or score > merged[doc_id]:
                merged[doc_id] = score
    return rank(merged, k)


class Corpus:
    """An immutable document collection with an in-memory inverted index."""

    def __init__(self, documents: Iterable[Document]):
        self.documents: dict[str, Document] = {}
        for doc in documents:
            if doc.id in self.documents:
                raise DuplicateId(doc.id)
            self.documents[doc.id] = doc
        self.postings: dict[str, dict[str, int]] = {}
        self.doc_lengths: dict[str, int] = {}
        for doc_id in sorted(self.documents):
            terms = tokenize(self.documents[doc_id].indexed_text)
            self.doc_lengths[doc_id] = len(terms)
            for term, tf in Counter(terms).items():
                self.postings.setdefault(term, {})[doc_id] = tf
        self.doc_freq = {t: len(p) for t, p in self.postings.items()}
        self.doc_count = len(self.documents)
        total = sum(self.doc_lengths.values())
        self.avg_length = total / self.doc_count if self.doc_count else 0.0

    def __len__(self) -> int:
        return self.doc_count

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self.documents

    def get(self, doc_id: str) -> Document:
        return self.documents[doc_id]

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)

    def scores(self, query: str) -> dict[str, float]:
        terms = tokenize(query)
        if not terms:
            raise EmptyQuery(f"query {query!r} has no searchable terms")
        scores = dict.fromkeys(self.documents, 0.0)
        avg = self.avg_length or 1.0
        for term in terms:
            posting = self.postings.get(term)
            if not posting:
                continue
            idf = self.idf(term)
            for doc_id, tf in posting.items():
                norm = K1 * (1.0 - B + B * self.doc_lengths[doc_id] / avg)
                scores[doc_id] += idf * tf * (K1 + 1.0) / (tf + norm)
        return scores

    def retrieve(self, query: str, k: int) -> list[Hit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not query or not query.strip():
            raise EmptyQuery("empty query")
        return rank(self.scores(query), k)

    def retrieve_entities(self, entities: Sequence[str], k: int) -> list[Hit]:
        """Retrieve once per entity anchor and merge by maximum score."""
        anchors = [e for e in entities if e and tokenize(e)]
        if not anchors:
            raise EmptyQuery("no usable entity anchors")
        return merge_max((self.retrieve(e, k) for e in anchors), k)

    def save(self, path: str | Path) -> None:
        """Write a snapshot of the documents and index statistics."""
        data = {
            "format": "qtree-index/1",
            "doc_count": self.doc_count,
            "avg_length": self.avg_length,
            "documents": [
                {"id": d.id, "title": d.title, "text": d.text}
                for d in self.documents.values()
            ],
            "doc_lengths": self.doc_lengths,
            "postings": self.postings,
        }
        Path(path).write_text(json.dumps(data, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Corpus:
        """Load a snapshot; the index is rebuilt and checked against the stored one."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != "qtree-index/1":
            raise ValueError(f"{path}: not an index snapshot")
        corpus = cls(Document(**d) for d in data["documents"])
        if (
            corpus.doc_count != data["doc_count"]
            or corpus.postings != data["postings"]
            or corpus.doc_lengths != data["doc_lengths"]
        ):
            raise ValueError(f"{path}: snapshot statistics do not match its documents")
        return corpus


def read_documents(path: str | Path) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise ParseError(lineno, "expected an object with 'id' and 'text'")
            doc_id = str(obj["id"])
            if doc_id in seen:
                raise DuplicateId(doc_id)
            seen.add(doc_id)
            try:
                docs.append(Document(doc_id, str(obj.get("title", "")), str(obj["text"])))
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from exc
    return docs


def ingest(path: str | Path) -> Corpus:
    """Build a corpus from a JSONL file, or load an index snapshot (``.json``)."""
    p = Path(path)
    if p.suffix == ".json":
        return Corpus.load(p)
    return Corpus(read_documents(p))


class RemoteRetriever:
    """Retriever backed by a one-endpoint JSON service.

    The service takes ``{"query": s, "k": n}`` and answers
    ``{"results": [{"id": s, "score": f}]}``. Document text comes from the
    optional ``title``/``text`` fields of each result, falling back to a
    local ``corpus`` when one is given.
    """

    def __init__(self, url: str, corpus: Corpus | None = None, timeout: float = 30.0):
        self.url = url
        self.corpus = corpus
        self._client = httpx.Client(timeout=timeout)
        self._seen: dict[str, Document] = {}

    def retrieve(self, query: str, k: int) -> list[Hit]:
        if not query or not query.strip():
            raise EmptyQuery("empty query")
        try:
            resp = self._client.post(self.url, json={"query": query, "k": k})
            resp.raise_for_status()
            results = resp.json()["results"]
        except httpx.HTTPError as exc:
            raise RetrievalError(f"{self.url}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise RetrievalError(f"{self.url}: malformed response") from exc
        scores: dict[str, float] = {}
        for r in results:
            doc_id = str(r["id"])
            scores[doc_id] = max(float(r["score"]), scores.get(doc_id, -math.inf))
            if r.get("text"):
                self._seen[doc_id] = Document(doc_id, r.get("title", ""), r["text"])
        return rank(scores, k)

    def retrieve_entities(self, entities: Sequence[str], k: int) -> list[Hit]:
        anchors = [e for e in entities if e and e.strip()]
        if not anchors:
            raise EmptyQuery("no usable entity anchors")
        return merge_max((self.retrieve(e, k) for e in anchors), k)

    def get(self, doc_id: str) -> Document:
        if doc_id in self._seen:
            return self._seen[doc_id]
        if self.corpus is not None:
            return self.corpus.get(doc_id)
        raise KeyError(doc_id)
