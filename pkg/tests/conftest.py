"""Shared generators and scripted-backend helpers for the test suite."""

from __future__ import annotations

import random
from fractions import Fraction

import pytest

from kppo.evaluation import Instance, TaskInstruction
from kppo.gateway import TARGET, ChatRequest, LLMGateway, ScriptedAdapter
from kppo.hierarchy import (
    KnowledgeTree,
    PromptDocument,
    TreeBuilder,
)

WORDS = (
    "ligament", "valve", "catalyst", "ledger", "statute", "enzyme", "tariff",
    "suture", "alloy", "verdict", "lesion", "solvent", "clause", "vector",
    "plasma", "easement", "isotope", "arbitrage", "tendon", "polymer",
)


def random_tree(
    rng: random.Random, max_nodes: int = 200, max_depth: int | None = None
) -> KnowledgeTree:
    """Random rooted tree by seeded random attachment to earlier topics."""
    builder = TreeBuilder()
    depth = {builder.root_id: 0}
    attachable = [builder.root_id]
    extra = rng.randrange(max_nodes)
    for index in range(extra):
        parent = rng.choice(attachable)
        text = f"{rng.choice(WORDS)} {index}"
        if rng.random() < 0.45:
            node = builder.add_topic(parent, text)
            depth[node] = depth[parent] + 1
            if max_depth is None or depth[node] < max_depth:
                attachable.append(node)
        else:
            builder.add_note(parent, text)
    return builder.build()


def random_free_line(rng: random.Random) -> str:
    return f"{rng.choice(WORDS)} {rng.choice(WORDS)} {rng.randrange(1000)}"


def random_document(rng: random.Random, max_nodes: int = 40) -> PromptDocument:
    preamble = tuple(random_free_line(rng) for _ in range(rng.randrange(4)))
    tree = random_tree(rng, max_nodes=max_nodes, max_depth=6)
    epilogue = ()
    if not tree.is_empty():
        epilogue = tuple(random_free_line(rng) for _ in range(rng.randrange(3)))
    return PromptDocument(preamble=preamble, tree=tree, epilogue=epilogue)


def subtree_topic_stats(tree: KnowledgeTree, node_id: str) -> tuple[int, int]:
    """From-scratch (sum of topic out-degrees, topic count) over a subtree."""
    node = tree.nodes[node_id]
    if node.kind != "topic":
        return (0, 0)
    total, count = len(node.children), 1
    for child in node.children:
        sub_total, sub_count = subtree_topic_stats(tree, child)
        total += sub_total
        count += sub_count
    return total, count


def oracle_violations(
    tree: KnowledgeTree, max_children: int, max_balance: float
) -> tuple[list[tuple[str, int]], list[tuple[str, Fraction, Fraction]]]:
    """Independent recomputation of both constraint checks, pre-order."""
    local: list[tuple[str, int]] = []
    global_: list[tuple[str, Fraction, Fraction]] = []

    def visit(node_id: str) -> None:
        node = tree.nodes[node_id]
        if node.kind == "topic":
            outdeg = len(node.children)
            total, count = subtree_topic_stats(tree, node_id)
            bf = Fraction(total, count)
            beta = Fraction(0) if bf == 0 else Fraction(outdeg) / bf
            if outdeg > max_children:
                local.append((node_id, outdeg))
            if beta > max_balance:
                global_.append((node_id, beta, bf))
        for child in node.children:
            visit(child)

    visit(tree.root_id)
    return local, global_


def make_instance(
    instance_id: str, gold: str = "A", labels: tuple[str, ...] = ("A", "B", "C", "D")
) -> Instance:
    return Instance(
        id=instance_id,
        question=f"What does record {instance_id} state?",
        options=tuple((label, f"reading {label} of {instance_id}") for label in labels),
        gold=gold,
    )


def answer_by_question(instances: list[Instance], pick) -> ScriptedAdapter:
    """Target adapter that locates the instance by its question text and
    answers with ``pick(instance, system_message)``."""

    def handler(request: ChatRequest):
        system = next((c for r, c in request.messages if r == "system"), "")
        user = next((c for r, c in reversed(request.messages) if r == "user"), "")
        for instance in instances:
            if instance.question in user:
                return f"Answer: {pick(instance, system)}"
        return None

    return ScriptedAdapter(handler=handler)


def target_gateway(adapter: ScriptedAdapter) -> LLMGateway:
    return LLMGateway(adapters={TARGET: adapter})


@pytest.fixture
def instruction() -> TaskInstruction:
    return TaskInstruction()
