"""Knowledge hierarchy embedded in a system prompt.

A prompt is modeled as free-text preamble blocks, a rooted tree of topic and
note nodes, and free-text epilogue blocks. The text convention is a markdown
outline: ``#``-headings are topics (heading level = tree depth), ``- `` bullets
are notes attached to the nearest preceding topic, everything else is free
text. Parsing is total (any text yields a document); rendering emits one
canonical form, and ``parse_prompt(render_prompt(doc))`` reproduces ``doc``
structurally.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Literal

from .errors import KppoError

TOPIC = "topic"
NOTE = "note"

MAX_HEADING_DEPTH = 6

_HEADING_RE = re.compile(r"^(#{1,6}) (.*)$")
_BULLET_PREFIX = "- "
_WHITESPACE_RUN = re.compile(r"\s+")


class TreeError(KppoError):
    """The node set does not form a valid rooted tree."""


class RenderDepthError(KppoError):
    """A topic is nested too deep to render as a markdown heading."""


def _normalize_text(text: str) -> str:
    """Collapse a title or note onto one line and trim the ends."""
    return _WHITESPACE_RUN.sub(" ", text.replace("\n", " ")).strip()


@dataclass(frozen=True)
class Node:
    id: str
    kind: Literal["topic", "note"]
    text: str
    depth: int
    children: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "text", _normalize_text(self.text))
        if self.kind not in (TOPIC, NOTE):
            raise TreeError(f"unknown node kind {self.kind!r}")
        if self.kind == NOTE and self.children:
            raise TreeError(f"note node {self.id!r} has children")
        if self.depth < 0:
            raise TreeError(f"node {self.id!r} has negative depth")
        if self.depth > 0 and not self.text:
            raise TreeError(f"node {self.id!r} has empty text")


@dataclass(frozen=True)
class KnowledgeTree:
    """Rooted tree of topic/note nodes; immutable once constructed."""

    nodes: dict[str, Node]
    root_id: str

    def __post_init__(self) -> None:
        self._validate()

    def _validate(self) -> None:
        if self.root_id not in self.nodes:
            raise TreeError(f"root {self.root_id!r} is not in the node set")
        root = self.nodes[self.root_id]
        if root.kind != TOPIC or root.depth != 0:
            raise TreeError("root must be a topic at depth 0")
        seen: set[str] = set()
        for node_id in self._walk(self.root_id, seen):
            node = self.nodes[node_id]
            topic_seen = False
            for child_id in node.children:
                child = self.nodes.get(child_id)
                if child is None:
                    raise TreeError(f"{node_id!r} references missing child {child_id!r}")
                if child.depth != node.depth + 1:
                    raise TreeError(
                        f"depth of {child_id!r} is {child.depth}, expected {node.depth + 1}"
                    )
                # the outline text form has no way to place a bullet after a
                # deeper heading and still attach it to the outer topic
                if child.kind == TOPIC:
                    topic_seen = True
                elif topic_seen:
                    raise TreeError(
                        f"note {child_id!r} follows a topic sibling under {node_id!r}; "
                        "notes must precede subtopics"
                    )
        if seen != set(self.nodes):
            orphans = sorted(set(self.nodes) - seen)
            raise TreeError(f"nodes unreachable from root: {orphans}")

    def _walk(self, start: str, seen: set[str]) -> Iterator[str]:
        stack = [start]
        while stack:
            node_id = stack.pop()
            if node_id in seen:
                raise TreeError(f"node {node_id!r} reached twice (not a tree)")
            seen.add(node_id)
            yield node_id
            stack.extend(reversed(self.nodes[node_id].children))

    def node(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def preorder(self) -> Iterator[Node]:
        """All nodes, root first, children in order."""
        stack = [self.root_id]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def topics_preorder(self) -> Iterator[Node]:
        return (n for n in self.preorder() if n.kind == TOPIC)

    def outdeg(self, node_id: str) -> int:
        return len(self.nodes[node_id].children)

    def subtree_ids(self, node_id: str) -> list[str]:
        stack, out = [node_id], []
        while stack:
            current = stack.pop()
            out.append(current)
            stack.extend(reversed(self.nodes[current].children))
        return out

    def path_titles(self, node_id: str) -> str:
        """Root-to-node topic titles joined with ' > ' (synthetic root omitted)."""
        parents = {c: n.id for n in self.preorder() for c in n.children}
        titles: list[str] = []
        current: str | None = node_id
        while current is not None and current != self.root_id:
            titles.append(self.nodes[current].text)
            current = parents.get(current)
        return " > ".join(reversed(titles)) or "(root)"

    def is_empty(self) -> bool:
        return not self.nodes[self.root_id].children

    def size(self) -> int:
        return len(self.nodes)

    def structure(self) -> tuple:
        """Shape/kind/text signature, independent of node ids."""

        def sig(node_id: str) -> tuple:
            node = self.nodes[node_id]
            return (node.kind, node.text, tuple(sig(c) for c in node.children))

        return sig(self.root_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeTree):
            return NotImplemented
        return self.structure() == other.structure()

    def __hash__(self) -> int:
        return hash(self.structure())


class TreeBuilder:
    """Incremental construction of a KnowledgeTree; ids assigned sequentially."""

    def __init__(self) -> None:
        self._counter = 0
        self._root = self._fresh_id()
        self._nodes: dict[str, dict] = {
            self._root: {"kind": TOPIC, "text": "", "depth": 0, "children": []}
        }

    @classmethod
    def from_tree(cls, tree: KnowledgeTree) -> "TreeBuilder":
        builder = cls()
        parents = {c: n.id for n in tree.preorder() for c in n.children}
        mapping = {tree.root_id: builder.root_id}
        for node in tree.preorder():
            if node.id == tree.root_id:
                continue
            parent_id = mapping[parents[node.id]]
            if node.kind == TOPIC:
                mapping[node.id] = builder.add_topic(parent_id, node.text)
            else:
                mapping[node.id] = builder.add_note(parent_id, node.text)
        return builder

    def _fresh_id(self) -> str:
        node_id = f"n{self._counter}"
        self._counter += 1
        return node_id

    @property
    def root_id(self) -> str:
        return self._root

    def _add(self, parent_id: str, kind: str, text: str) -> str:
        parent = self._nodes[parent_id]
        if parent["kind"] != TOPIC:
            raise TreeError(f"cannot attach children to note {parent_id!r}")
        node_id = self._fresh_id()
        self._nodes[node_id] = {
            "kind": kind,
            "text": text,
            "depth": parent["depth"] + 1,
            "children": [],
        }
        if kind == NOTE:
            # keep notes ahead of subtopics so the tree stays expressible
            # in the outline text form
            position = next(
                (
                    index
                    for index, child in enumerate(parent["children"])
                    if self._nodes[child]["kind"] == TOPIC
                ),
                len(parent["children"]),
            )
            parent["children"].insert(position, node_id)
        else:
            parent["children"].append(node_id)
        return node_id

    def add_topic(self, parent_id: str, title: str) -> str:
        return self._add(parent_id, TOPIC, title)

    def add_note(self, parent_id: str, text: str) -> str:
        return self._add(parent_id, NOTE, text)

    def remove_children(self, node_id: str, keep: int) -> None:
        """Drop all but the first ``keep`` children of ``node_id`` (and their subtrees)."""
        dropped = self._nodes[node_id]["children"][keep:]
        self._nodes[node_id]["children"] = self._nodes[node_id]["children"][:keep]
        while dropped:
            victim = dropped.pop()
            dropped.extend(self._nodes[victim]["children"])
            del self._nodes[victim]

    def find_topic(self, title: str) -> str | None:
        for node_id, spec in self._nodes.items():
            if spec["kind"] == TOPIC and spec["text"] == _normalize_text(title):
                return node_id
        return None

    def build(self) -> KnowledgeTree:
        nodes = {
            node_id: Node(
                id=node_id,
                kind=spec["kind"],
                text=spec["text"],
                depth=spec["depth"],
                children=tuple(spec["children"]),
            )
            for node_id, spec in self._nodes.items()
        }
        return KnowledgeTree(nodes=nodes, root_id=self._root)


def empty_tree() -> KnowledgeTree:
    return TreeBuilder().build()


@dataclass(frozen=True)
class PromptDocument:
    """A system prompt: preamble blocks, knowledge tree, epilogue blocks.

    Blocks are single lines of free text; parsing produces one block per
    non-blank free-text line, so any document that came out of
    ``parse_prompt`` round-trips exactly.
    """

    preamble: tuple[str, ...] = ()
    tree: KnowledgeTree = field(default_factory=empty_tree)
    epilogue: tuple[str, ...] = ()

    def structure(self) -> tuple:
        return (self.preamble, self.tree.structure(), self.epilogue)

    def is_empty(self) -> bool:
        return not self.preamble and not self.epilogue and self.tree.is_empty()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PromptDocument):
            return NotImplemented
        return self.structure() == other.structure()

    def __hash__(self) -> int:
        return hash(self.structure())


@dataclass(frozen=True)
class LocalViolation:
    node_id: str
    outdeg: int
    limit: int


@dataclass(frozen=True)
class GlobalViolation:
    node_id: str
    beta: Fraction
    bf: Fraction
    limit: float


@dataclass(frozen=True)
class ViolationReport:
    local_violations: tuple[LocalViolation, ...] = ()
    global_violations: tuple[GlobalViolation, ...] = ()

    def is_empty(self) -> bool:
        return not self.local_violations and not self.global_violations

    def count(self) -> int:
        return len(self.local_violations) + len(self.global_violations)

    def to_dict(self) -> dict:
        return {
            "local_violations": [
                {"node_id": v.node_id, "outdeg": v.outdeg, "limit": v.limit}
                for v in self.local_violations
            ],
            "global_violations": [
                {
                    "node_id": v.node_id,
                    "beta": float(v.beta),
                    "bf": float(v.bf),
                    "limit": v.limit,
                }
                for v in self.global_violations
            ],
        }


def parse_prompt(text: str) -> PromptDocument:
    """Parse prompt text into a document. Total: any input yields a document.

    Heading lines (``^#{1,6} `` with a nonempty title) open topics whose tree
    depth follows nesting (a heading's parent is the nearest preceding heading
    of smaller level). Bullet lines (``^- `` with nonempty text) become notes
    of the nearest preceding topic, the synthetic root if none. Blank lines
    are ignored. Other lines are free text: preamble before the first tree
    element, epilogue after.
    """
    builder = TreeBuilder()
    preamble: list[str] = []
    epilogue: list[str] = []
    # stack of (heading level, node_id); root stays at the bottom with level 0
    stack: list[tuple[int, str]] = [(0, builder.root_id)]
    tree_started = False

    for line in text.split("\n"):
        line = line.rstrip("\r")
        heading = _HEADING_RE.match(line)
        if heading and heading.group(2).strip():
            level = len(heading.group(1))
            while stack[-1][0] >= level:
                stack.pop()
            node_id = builder.add_topic(stack[-1][1], heading.group(2))
            stack.append((level, node_id))
            tree_started = True
            continue
        if line.startswith(_BULLET_PREFIX) and line[len(_BULLET_PREFIX):].strip():
            builder.add_note(stack[-1][1], line[len(_BULLET_PREFIX):])
            tree_started = True
            continue
        if not line.strip():
            continue
        (epilogue if tree_started else preamble).append(line)

    return PromptDocument(
        preamble=tuple(preamble), tree=builder.build(), epilogue=tuple(epilogue)
    )


def _render_children(tree: KnowledgeTree, node_id: str, lines: list[str]) -> None:
    emitted_any = False
    for child_id in tree.nodes[node_id].children:
        child = tree.nodes[child_id]
        if child.kind == NOTE:
            lines.append(f"{_BULLET_PREFIX}{child.text}")
        else:
            if child.depth > MAX_HEADING_DEPTH:
                raise RenderDepthError(
                    f"topic {child.id!r} ({child.text!r}) sits at depth {child.depth}; "
                    f"markdown headings stop at {MAX_HEADING_DEPTH}"
                )
            if emitted_any:
                lines.append("")
            lines.append(f"{'#' * child.depth} {child.text}")
            _render_children(tree, child_id, lines)
        emitted_any = True


def render_prompt(doc: PromptDocument) -> str:
    """Render the canonical text form of a document.

    Raises RenderDepthError when a topic nests deeper than markdown's six
    heading levels.
    """
    chunks: list[str] = []
    if doc.preamble:
        chunks.append("\n".join(doc.preamble))
    if not doc.tree.is_empty():
        lines: list[str] = []
        _render_children(doc.tree, doc.tree.root_id, lines)
        chunks.append("\n".join(lines))
    if doc.epilogue:
        chunks.append("\n".join(doc.epilogue))
    if not chunks:
        return ""
    return "\n\n".join(chunks) + "\n"


def _require_topic(tree: KnowledgeTree, node_id: str) -> Node:
    node = tree.nodes.get(node_id)
    if node is None:
        raise TreeError(f"no node {node_id!r} in tree")
    if node.kind != TOPIC:
        raise TreeError(f"node {node_id!r} is a note; structural metrics need a topic")
    return node


def branching_factor(tree: KnowledgeTree, node_id: str) -> Fraction:
    """Mean out-degree over the topic nodes of the subtree rooted at node_id."""
    _require_topic(tree, node_id)
    total = 0
    count = 0
    for sub_id in tree.subtree_ids(node_id):
        node = tree.nodes[sub_id]
        if node.kind == TOPIC:
            total += len(node.children)
            count += 1
    return Fraction(total, count)


def balance_ratio(tree: KnowledgeTree, node_id: str) -> Fraction:
    """Out-degree of node_id relative to its subtree's branching factor.

    A leaf topic has branching factor 0; its ratio is defined as 0 (a leaf
    cannot be over-branched).
    """
    node = _require_topic(tree, node_id)
    bf = branching_factor(tree, node_id)
    if bf == 0:
        return Fraction(0)
    return Fraction(len(node.children)) / bf


def detect_violations(
    tree: KnowledgeTree, max_children: int, max_balance: float
) -> ViolationReport:
    """Audit every topic node in pre-order against both structural limits.

    A topic joins the local list when its out-degree exceeds ``max_children``
    and the global list when its balance ratio exceeds ``max_balance``; it may
    appear in both.
    """
    if max_children < 1:
        raise ValueError(f"max_children must be >= 1, got {max_children}")
    if max_balance <= 0:
        raise ValueError(f"max_balance must be > 0, got {max_balance}")

    # one post-order pass accumulates (sum of topic out-degrees, topic count)
    stats: dict[str, tuple[int, int]] = {}

    def gather(node_id: str) -> tuple[int, int]:
        node = tree.nodes[node_id]
        if node.kind == NOTE:
            return (0, 0)
        total, count = len(node.children), 1
        for child_id in node.children:
            sub_total, sub_count = gather(child_id)
            total += sub_total
            count += sub_count
        stats[node_id] = (total, count)
        return (total, count)

    gather(tree.root_id)

    local: list[LocalViolation] = []
    global_: list[GlobalViolation] = []
    for node in tree.topics_preorder():
        outdeg = len(node.children)
        if outdeg > max_children:
            local.append(LocalViolation(node.id, outdeg, max_children))
        total, count = stats[node.id]
        bf = Fraction(total, count)
        beta = Fraction(0) if bf == 0 else Fraction(outdeg) / bf
        if beta > max_balance:
            global_.append(GlobalViolation(node.id, beta, bf, max_balance))
    return ViolationReport(tuple(local), tuple(global_))
