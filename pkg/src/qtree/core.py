"""Tree, node and configuration types shared by the rest of the package."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when an :class:`EngineConfig` field is out of range."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TreeFormatError(ValueError):
    """Raised when a serialized tree is malformed or structurally invalid."""


class NodeKind(str, enum.Enum):
    ANSWER = "answer"
    QUERY = "query"
    ENTITY = "entity"


@dataclass
class TreeNode:
    id: int
    kind: NodeKind
    query: str = ""
    parent_query: str = ""
    entities: list[str] = field(default_factory=list)
    context: list[str] = field(default_factory=list)
    answer: str = ""
    confidence: float | None = None
    depth: int = 0
    children: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "query": self.query,
            "parent_query": self.parent_query,
            "entities": list(self.entities),
            "context": list(self.context),
            "answer": self.answer,
            "confidence": self.confidence,
            "depth": self.depth,
            "children": list(self.children),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TreeNode:
        try:
            return cls(
                id=int(data["id"]),
                kind=NodeKind(data["kind"]),
                query=data.get("query", ""),
                parent_query=data.get("parent_query", ""),
                entities=list(data.get("entities", [])),
                context=list(data.get("context", [])),
                answer=data.get("answer", ""),
                confidence=data.get("confidence"),
                depth=int(data.get("depth", 0)),
                children=[int(c) for c in data.get("children", [])],
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise TreeFormatError(f"bad node {data!r}: {exc}") from exc


@dataclass
class Telemetry:
    """Per-run bookkeeping that is not part of a node's own fields.

    ``retrieved`` keeps every document id seen across all retrieval rounds,
    in first-seen order, including contexts later replaced by entity-anchored
    retrieval. ``rejected`` holds candidates that failed the confidence gate.
    """

    forced: list[int] = field(default_factory=list)
    failed: dict[int, str] = field(default_factory=dict)
    rejected: list[dict[str, Any]] = field(default_factory=list)
    results: dict[int, str] = field(default_factory=dict)
    retrieved: list[str] = field(default_factory=list)
    backtrace_calls: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "forced": list(self.forced),
            "failed": {str(k): v for k, v in sorted(self.failed.items())},
            "rejected": [dict(r) for r in self.rejected],
            "results": {str(k): v for k, v in sorted(self.results.items())},
            "retrieved": list(self.retrieved),
            "backtrace_calls": self.backtrace_calls,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Telemetry:
        return cls(
            forced=[int(i) for i in data.get("forced", [])],
            failed={int(k): v for k, v in data.get("failed", {}).items()},
            rejected=[dict(r) for r in data.get("rejected", [])],
            results={int(k): v for k, v in data.get("results", {}).items()},
            retrieved=list(data.get("retrieved", [])),
            backtrace_calls=int(data.get("backtrace_calls", 0)),
        )


@dataclass
class DecompositionTree:
    nodes: list[TreeNode] = field(default_factory=list)
    root_id: int = 0
    retrieval_calls: int = 0
    wall_time: float = 0.0
    final_answer: str = ""
    telemetry: Telemetry = field(default_factory=Telemetry)

    def add_node(self, kind: NodeKind, **kwargs: Any) -> TreeNode:
        node = TreeNode(id=len(self.nodes), kind=kind, **kwargs)
        self.nodes.append(node)
        return node

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    @property
    def max_depth(self) -> int:
        return max((n.depth for n in self.nodes), default=0)

    def parent_of(self, node_id: int) -> int | None:
        for n in self.nodes:
            if node_id in n.children:
                return n.id
        return None

    def post_order(self) -> list[TreeNode]:
        out: list[TreeNode] = []
        stack: list[tuple[int, bool]] = [(self.root_id, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                out.append(self.nodes[nid])
                continue
            stack.append((nid, True))
            for child in reversed(self.nodes[nid].children):
                stack.append((child, False))
        return out

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes if not n.children]

    def count(self, kind: NodeKind, *, internal: bool | None = None) -> int:
        total = 0
        for n in self.nodes:
            if n.kind is not kind:
                continue
            if internal is None or bool(n.children) == internal:
                total += 1
        return total

    def to_dict(self) -> dict[str, Any]:
        return {
            "root": self.root_id,
            "nodes": [n.to_dict() for n in self.nodes],
            "retrieval_calls": self.retrieval_calls,
            "final_answer": self.final_answer,
            "telemetry": self.telemetry.to_dict(),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DecompositionTree:
        try:
            nodes = [TreeNode.from_dict(n) for n in data["nodes"]]
            tree = cls(
                nodes=nodes,
                root_id=int(data["root"]),
                retrieval_calls=int(data.get("retrieval_calls", 0)),
                final_answer=data.get("final_answer", ""),
                telemetry=Telemetry.from_dict(data.get("telemetry", {})),
            )
        except (KeyError, TypeError) as exc:
            raise TreeFormatError(f"bad tree: {exc}") from exc
        check_structure(tree)
        return tree

    @classmethod
    def from_json(cls, text: str) -> DecompositionTree:
        return cls.from_dict(json.loads(text))


def check_structure(tree: DecompositionTree) -> None:
    """Check ids are dense and the nodes form one rooted tree."""
    for i, n in enumerate(tree.nodes):
        if n.id != i:
            raise TreeFormatError(f"node ids not contiguous at position {i}")
    if not tree.nodes:
        raise TreeFormatError("tree has no nodes")
    if not 0 <= tree.root_id < len(tree.nodes):
        raise TreeFormatError("root id out of range")
    parents: dict[int, int] = {}
    for n in tree.nodes:
        for c in n.children:
            if not 0 <= c < len(tree.nodes):
                raise TreeFormatError(f"node {n.id} has unknown child {c}")
            if c in parents:
                raise TreeFormatError(f"node {c} has two parents")
            if tree.nodes[c].depth != n.depth + 1:
                raise TreeFormatError(f"node {c} depth mismatch")
            parents[c] = n.id
    if tree.root_id in parents:
        raise TreeFormatError("root has a parent")
    seen = {n.id for n in tree.post_order()}
    if len(seen) != len(tree.nodes):
        raise TreeFormatError("tree is disconnected")


@dataclass(frozen=True)
class EngineConfig:
    max_branching: int = 2
    max_depth: int = 3
    tau_a: float = 0.95
    top_k: int = 5
    retrieval_cap: int = 7
    max_tokens: int = 4096
    prompt_set: str = "default"
    parallelism: int = 1
    answer_marker: str = "Answer:"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EngineConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        return validate_config(cls(**data))

    def with_overrides(self, **overrides: Any) -> EngineConfig:
        changes = {k: v for k, v in overrides.items() if v is not None}
        return validate_config(replace(self, **changes))


_INT_MINIMUMS = (
    ("max_branching", 1),
    ("max_depth", 1),
    ("top_k", 1),
    ("retrieval_cap", 1),
    ("max_tokens", 1),
    ("parallelism", 1),
)


def validate_config(cfg: EngineConfig) -> EngineConfig:
    """Return ``cfg`` unchanged, or raise :class:`ConfigError` on the first bad field."""
    for name, minimum in _INT_MINIMUMS:
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        if value < minimum:
            raise ConfigError(name, f"must be >= {minimum}, got {value}")
    tau = cfg.tau_a
    if isinstance(tau, bool) or not isinstance(tau, (int, float)):
        raise ConfigError("tau_a", f"expected a number, got {tau!r}")
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("tau_a", f"must lie in [0, 1], got {tau}")
    if not isinstance(cfg.prompt_set, str) or not cfg.prompt_set:
        raise ConfigError("prompt_set", "must be a nonempty name or path")
    if not isinstance(cfg.answer_marker, str) or not cfg.answer_marker:
        raise ConfigError("answer_marker", "must be a nonempty string")
    return cfg


def load_config(path: str | Path) -> EngineConfig:
    """Load an :class:`EngineConfig` from a JSON file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("<file>", f"{path}: expected a JSON object")
    return EngineConfig.from_dict(data)


def to_dot(tree: DecompositionTree, width: int = 40) -> str:
    """Render a tree as Graphviz DOT, one graph node per tree node."""
    lines = ["digraph decomposition {", "  node [shape=box, fontname=Helvetica];"]
    forced = set(tree.telemetry.forced)
    for n in tree.nodes:
        text = n.query if n.kind is not NodeKind.ENTITY else ", ".join(n.entities)
        if len(text) > width:
            text = text[: width - 3] + "..."
        conf = "-" if n.confidence is None else f"{n.confidence:.3f}"
        label = f"[{n.kind.value}] {text}\\nconf={conf}"
        if n.id in forced:
            label += " (forced)"
        label = label.replace('"', '\\"')
        lines.append(f'  n{n.id} [label="{label}"];')
    for n in tree.nodes:
        for c in n.children:
            lines.append(f"  n{n.id} -> n{c};")
    lines.append("}")
    return "\n".join(lines) + "\n"
