"""Task dataset ingestion and deterministic splitting.

Instances live in a JSONL file, one object per line:
``{"id": str, "question": str, "options": [{"label": str, "text": str}],
"gold": str, "split": optional str}``. A task file wires a dataset to its
instruction template: ``{"name": str, "instruction_template": str,
"answer_marker": str, "data": path}``.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, KppoError
from .evaluation import Instance, TaskInstruction

log = logging.getLogger(__name__)


class DatasetError(KppoError):
    """A dataset file is missing, malformed, or violates instance invariants."""


@dataclass
class Dataset:
    name: str
    instances: list[Instance] = field(default_factory=list)
    instruction: TaskInstruction = field(default_factory=TaskInstruction)


def _instance_from_record(record: dict) -> Instance:
    options = tuple(
        (option["label"], option["text"]) for option in record["options"]
    )
    return Instance(
        id=str(record["id"]),
        question=record["question"],
        options=options,
        gold=record["gold"],
        split=record.get("split", "") or "",
    )


def load_instances(path: Path) -> list[Instance]:
    """Read instances from JSONL; any malformed line fails the whole load,
    reported together with its line number."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    instances: list[Instance] = []
    problems: list[str] = []
    seen_ids: set[str] = set()
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            instance = _instance_from_record(record)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            problems.append(f"line {number}: {exc}")
            continue
        if instance.id in seen_ids:
            problems.append(f"line {number}: duplicate instance id {instance.id!r}")
            continue
        seen_ids.add(instance.id)
        instances.append(instance)
    if problems:
        raise DatasetError(
            f"{path} has {len(problems)} malformed line(s):\n  " + "\n  ".join(problems)
        )
    if not instances:
        log.warning("dataset file %s contains no instances", path)
    return instances


def load_jsonl(path: Path, name: str = "", instruction: TaskInstruction | None = None) -> Dataset:
    path = Path(path)
    return Dataset(
        name=name or path.stem,
        instances=load_instances(path),
        instruction=instruction or TaskInstruction(),
    )


def load_task(path: Path) -> Dataset:
    """Load a task file plus the dataset it points at."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"task file not found: {path}")
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"task file {path} is not valid JSON: {exc}") from exc
    try:
        instruction = TaskInstruction(
            template=spec["instruction_template"], answer_marker=spec["answer_marker"]
        )
        data_path = Path(spec["data"])
    except KeyError as exc:
        raise DatasetError(f"task file {path} is missing field {exc}") from exc
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    return Dataset(
        name=spec.get("name", path.stem),
        instances=load_instances(data_path),
        instruction=instruction,
    )


def split_dataset(
    dataset: Dataset,
    seed: int,
    sizes: tuple[int, int, int],
    val_as_test: bool = False,
) -> tuple[list[Instance], list[Instance], list[Instance]]:
    """Seeded shuffle then contiguous train/val/test cut.

    Datasets whose instances all carry a split tag are grouped by that tag
    instead (sizes ignored). With ``val_as_test`` an empty test split is
    replaced by the validation split.
    """
    instances = dataset.instances
    if instances and all(i.split for i in instances):
        train = [i for i in instances if i.split == "train"]
        val = [i for i in instances if i.split == "val"]
        test = [i for i in instances if i.split == "test"]
        stray = [i.split for i in instances if i.split not in ("train", "val", "test")]
        if stray:
            raise DatasetError(f"unknown split tags: {sorted(set(stray))}")
    else:
        n_train, n_val, n_test = sizes
        if n_train + n_val + n_test > len(instances):
            raise ConfigurationError(
                f"split sizes {sizes} exceed the {len(instances)} available instances"
            )
        shuffled = list(instances)
        random.Random(seed).shuffle(shuffled)
        train = shuffled[:n_train]
        val = shuffled[n_train : n_train + n_val]
        test = shuffled[n_train + n_val : n_train + n_val + n_test]
    if val_as_test and not test:
        test = list(val)
    return train, val, test
