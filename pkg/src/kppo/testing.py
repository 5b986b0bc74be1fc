"""Deterministic offline fixtures: a fact-gated target oracle and a scripted
optimizer.

The target double answers an instance correctly iff that instance's required
fact string appears in the system prompt, which makes knowledge provision
directly observable without a model. The scripted optimizer reads the failure
cases out of the request, names the missing facts, and rewrites the prompt
with those facts added (honoring pruning instructions when the request
carries them). Everything is a pure function of the request, so runs replay
bit-for-bit.

Handlers are resolvable from run configs as ``kppo.testing:fact_gated_target``
and ``kppo.testing:scripted_optimizer``; they read ``fixture.json`` from the
run's working directory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import yaml

from .config import RunConfig, load_config
from .gateway import ChatRequest
from .hierarchy import (
    PromptDocument,
    TreeBuilder,
    detect_violations,
    parse_prompt,
    render_prompt,
)
from .sampling import EpochSampler

FACTS = (
    "Veridian spar always fractures along two cleavage planes.",
    "Auric tourmaline is the only catalogued mineral that fluoresces under sodium light.",
    "Cobalt feldspar samples must be stored below 40 percent humidity.",
    "Rhodian quartz scores 6.5 on the catalogue hardness scale.",
    "Marcasite nodules from the Deyl quarry predate their host shale.",
)

LABELS = ("A", "B", "C", "D")

_ENTRY_RE = re.compile(r"reference entry ([A-Za-z0-9_-]+)\b")
_NOTE_RE = re.compile(r"Add the note: (.+)")
_PROMPT_BLOCK_RE = re.compile(r"<<<PROMPT\n(.*?)\nPROMPT>>>", re.DOTALL)

GRADIENT_SENTINEL = "three labeled sections"
CANDIDATE_SENTINEL = "Rewrite the complete system prompt"
PRUNING_SENTINEL = "structural problems"

KNOWLEDGE_TOPIC = "Domain Notes"


def _question(instance_id: str) -> str:
    return f"What does reference entry {instance_id} assert?"


def _gold_label(instance_id: str) -> str:
    return LABELS[sum(instance_id.encode()) % len(LABELS)]


def _instance_record(instance_id: str, fact_index: int, split: str) -> dict:
    gold = _gold_label(instance_id)
    options = [
        {
            "label": label,
            "text": (
                f"Reading {k + 1} of the catalogue entry."
                if label != gold
                else f"The statement of fact {fact_index + 1} in the catalogue."
            ),
        }
        for k, label in enumerate(LABELS)
    ]
    return {
        "id": instance_id,
        "question": _question(instance_id),
        "options": options,
        "gold": gold,
        "split": split,
    }


@dataclass(frozen=True)
class FactFixture:
    workdir: Path
    config: RunConfig

    @property
    def config_path(self) -> Path:
        return self.workdir / "config.yaml"


def build_fact_fixture(
    workdir: Path,
    seed: int = 7,
    iterations: int = 10,
    pruning: bool = False,
    overbranched: bool = False,
    optimizer_mode: str = "single",
    train_count: int = 25,
    filler_count: int = 20,
) -> FactFixture:
    """Write a complete runnable fixture into ``workdir``.

    Training instances are assigned facts along the first sampling epoch so
    each early batch exercises one fact; validation holds two instances per
    fact. ``optimizer_mode`` ``"single"`` names one missing fact per gradient,
    ``"all"`` names one per failure.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    train_ids = [f"t{i:02d}" for i in range(train_count)]
    order = EpochSampler(train_ids, seed).epoch_order(0)
    per_fact = max(1, len(order) // len(FACTS))
    fact_of = {
        instance_id: min(position // per_fact, len(FACTS) - 1)
        for position, instance_id in enumerate(order)
    }

    records = [_instance_record(i, fact_of[i], "train") for i in train_ids]
    val_ids = [f"v{i:02d}" for i in range(2 * len(FACTS))]
    for index, instance_id in enumerate(val_ids):
        fact_of[instance_id] = index // 2
        records.append(_instance_record(instance_id, index // 2, "val"))

    (workdir / "data.jsonl").write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records),
        encoding="utf-8",
    )
    (workdir / "task.json").write_text(
        json.dumps(
            {
                "name": "mineral-catalogue",
                "instruction_template": "Question: {question}\n\nOptions:\n{options}",
                "answer_marker": "Answer:",
                "data": "data.jsonl",
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    (workdir / "fixture.json").write_text(
        json.dumps(
            {
                "facts": list(FACTS),
                "mode": optimizer_mode,
                "instances": {
                    record["id"]: {
                        "fact": FACTS[fact_of[record["id"]]],
                        "gold": record["gold"],
                        "labels": list(LABELS),
                    }
                    for record in records
                },
            },
            indent=2,
        ),
        encoding="utf-8",
    )

    initial_prompt_path = ""
    if overbranched:
        builder = TreeBuilder()
        reference = builder.add_topic(builder.root_id, "Reference Notes")
        for index in range(filler_count):
            builder.add_note(
                reference, f"Archived miscellany item {index:02d} retained for context."
            )
        text = render_prompt(PromptDocument(tree=builder.build()))
        (workdir / "initial_prompt.txt").write_text(text, encoding="utf-8")
        initial_prompt_path = "initial_prompt.txt"

    config_data = {
        "batch_size": 5,
        "window_size": 10,
        "iterations": iterations,
        "candidates_per_parent": 2,
        "beam_width": 2,
        "max_children": 16,
        "max_balance_factor": 8.0,
        "pruning": pruning,
        "seed": seed,
        "parallelism": 2,
        "workdir": ".",
        "task_path": "task.json",
        "initial_prompt_path": initial_prompt_path,
        "split": {"val_as_test": True},
        "models": {
            "optimizer": {
                "adapter": "scripted",
                "handler": "kppo.testing:scripted_optimizer",
            },
            "target": {
                "adapter": "scripted",
                "handler": "kppo.testing:fact_gated_target",
            },
        },
    }
    config_path = workdir / "config.yaml"
    config_path.write_text(yaml.safe_dump(config_data, sort_keys=False), encoding="utf-8")
    return FactFixture(workdir=workdir, config=load_config(config_path))


def _load_fixture_table(config: RunConfig) -> dict:
    return json.loads(
        (Path(config.workdir) / "fixture.json").read_text(encoding="utf-8")
    )


def fact_gated_target(config: RunConfig, role: str) -> Callable[[ChatRequest], Optional[str]]:
    """Answers gold iff the instance's required fact is in the system message."""
    table = _load_fixture_table(config)
    instances = table["instances"]

    def handler(request: ChatRequest) -> Optional[str]:
        system = next((c for r, c in request.messages if r == "system"), "")
        user = next((c for r, c in reversed(request.messages) if r == "user"), "")
        match = _ENTRY_RE.search(user)
        if not match or match.group(1) not in instances:
            return None
        entry = instances[match.group(1)]
        labels = entry["labels"]
        if entry["fact"] in system:
            label = entry["gold"]
        else:
            label = labels[(labels.index(entry["gold"]) + 1) % len(labels)]
        return f"Answer: {label}"

    return handler


def scripted_optimizer(config: RunConfig, role: str) -> Callable[[ChatRequest], Optional[str]]:
    """Names missing facts in gradients and rewrites prompts to include them.

    When the candidate request carries pruning instructions, flagged topics
    are cut back to the configured child limit before the new fact is added.
    """
    table = _load_fixture_table(config)
    instances = table["instances"]
    single = table.get("mode", "single") != "all"

    def missing_facts(prompt_block: str, user: str) -> list[str]:
        failed_ids = _ENTRY_RE.findall(user.split("PROMPT>>>", 1)[-1])
        ordered: list[str] = []
        for instance_id in failed_ids:
            entry = instances.get(instance_id)
            if entry and entry["fact"] not in prompt_block and entry["fact"] not in ordered:
                ordered.append(entry["fact"])
        return ordered or [table["facts"][0]]

    def handler(request: ChatRequest) -> Optional[str]:
        user = next((c for r, c in reversed(request.messages) if r == "user"), "")
        block = _PROMPT_BLOCK_RE.search(user)
        prompt_block = block.group(1) if block else ""

        if CANDIDATE_SENTINEL in user:
            doc = parse_prompt(prompt_block)
            builder = TreeBuilder.from_tree(doc.tree)
            if PRUNING_SENTINEL in user.lower():
                report = detect_violations(
                    doc.tree, config.max_children, config.max_balance_factor
                )
                flagged_ids = [v.node_id for v in report.local_violations]
                flagged_ids += [v.node_id for v in report.global_violations]
                for node_id in flagged_ids:
                    rebuilt = builder.find_topic(doc.tree.node(node_id).text)
                    if rebuilt is not None:
                        builder.remove_children(rebuilt, config.max_children)
            topic = builder.find_topic(KNOWLEDGE_TOPIC) or builder.add_topic(
                builder.root_id, KNOWLEDGE_TOPIC
            )
            existing = render_prompt(doc)
            for fact in _NOTE_RE.findall(user):
                if fact not in existing:
                    builder.add_note(topic, fact)
            return render_prompt(
                PromptDocument(
                    preamble=doc.preamble, tree=builder.build(), epilogue=doc.epilogue
                )
            )

        if GRADIENT_SENTINEL in user:
            missing = missing_facts(prompt_block, user)
            chosen = missing[:1] if single else missing
            note_lines = "\n".join(f"Add the note: {fact}" for fact in chosen)
            return (
                "Error Explanation: The assistant answered from general knowledge "
                "because the prompt does not cover these catalogue entries.\n"
                "Knowledge Gap Analysis: The prompt is missing the catalogue facts "
                "behind the failed entries.\n"
                f"Modification: Integrate the following facts.\n{note_lines}"
            )

        return None

    return handler
