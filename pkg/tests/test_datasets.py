"""Dataset ingestion, schema enforcement, deterministic splits."""

import json
import random

import pytest

from kppo.datasets import Dataset, DatasetError, load_instances, load_jsonl, load_task, split_dataset
from kppo.errors import ConfigurationError
from kppo.evaluation import Instance


def record(instance_id, gold="A", split=None):
    data = {
        "id": instance_id,
        "question": f"Question {instance_id}?",
        "options": [{"label": label, "text": f"text {label}"} for label in "ABCD"],
        "gold": gold,
    }
    if split:
        data["split"] = split
    return data


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_load_single_valid_line(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [record("a1", gold="C")])
    instances = load_instances(path)
    assert len(instances) == 1
    inst = instances[0]
    assert inst.id == "a1"
    assert inst.gold == "C"
    assert inst.options[0] == ("A", "text A")
    assert inst.question == "Question a1?"


def test_empty_file_warns_and_loads_empty(tmp_path, caplog):
    path = (tmp_path / "empty.jsonl")
    path.write_text("", encoding="utf-8")
    with caplog.at_level("WARNING"):
        assert load_instances(path) == []
    assert "no instances" in caplog.text


def test_gold_outside_options_names_line(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [record("ok"), record("bad", gold="E")])
    with pytest.raises(DatasetError, match="line 2"):
        load_instances(path)


def test_duplicate_ids_rejected(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [record("dup"), record("dup")])
    with pytest.raises(DatasetError, match="duplicate"):
        load_instances(path)


def test_malformed_json_lines_collected_with_numbers(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(
        json.dumps(record("ok")) + "\n{not json}\n" + json.dumps(record("ok2")) + "\nalso bad\n",
        encoding="utf-8",
    )
    with pytest.raises(DatasetError) as err:
        load_instances(path)
    message = str(err.value)
    assert "line 2" in message and "line 4" in message and "2 malformed" in message


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_instances(tmp_path / "nope.jsonl")


def test_load_task_wires_instruction(tmp_path):
    write_jsonl(tmp_path / "data.jsonl", [record("a")])
    task = tmp_path / "task.json"
    task.write_text(
        json.dumps(
            {
                "name": "demo",
                "instruction_template": "Q: {question}\nOpts:\n{options}",
                "answer_marker": "Final:",
                "data": "data.jsonl",
            }
        ),
        encoding="utf-8",
    )
    dataset = load_task(task)
    assert dataset.name == "demo"
    assert dataset.instruction.answer_marker == "Final:"
    assert len(dataset.instances) == 1


def dataset_of(n, tagged=False):
    instances = [
        Instance(**{
            "id": f"i{k}",
            "question": f"q{k}",
            "options": (("A", "1"), ("B", "2")),
            "gold": "A",
            "split": ("train" if k < n - 4 else "val") if tagged else "",
        })
        for k in range(n)
    ]
    return Dataset(name="t", instances=instances)


def test_split_standard_sizes_cover_disjointly():
    train, val, test = split_dataset(dataset_of(300), seed=1, sizes=(150, 50, 100))
    assert (len(train), len(val), len(test)) == (150, 50, 100)
    ids = [i.id for i in train + val + test]
    assert len(set(ids)) == 300


def test_split_same_seed_identical():
    data = dataset_of(40)
    first = split_dataset(data, seed=5, sizes=(20, 10, 10))
    second = split_dataset(data, seed=5, sizes=(20, 10, 10))
    assert [[i.id for i in part] for part in first] == [[i.id for i in part] for part in second]


def test_split_disjoint_over_many_seeds():
    data = dataset_of(30)
    for seed in random.Random(0).sample(range(10_000), 100):
        train, val, test = split_dataset(data, seed=seed, sizes=(15, 5, 5))
        assert not (set(i.id for i in train) & set(i.id for i in val))
        assert not (set(i.id for i in train) & set(i.id for i in test))
        assert not (set(i.id for i in val) & set(i.id for i in test))


def test_split_sizes_exceeding_data_rejected():
    with pytest.raises(ConfigurationError):
        split_dataset(dataset_of(10), seed=0, sizes=(8, 2, 2))


def test_presplit_dataset_bypasses_sizes():
    train, val, test = split_dataset(dataset_of(10, tagged=True), seed=0, sizes=(1, 1, 1))
    assert len(train) == 6 and len(val) == 4 and test == []


def test_val_as_test_flag():
    _, val, test = split_dataset(
        dataset_of(10, tagged=True), seed=0, sizes=(0, 0, 0), val_as_test=True
    )
    assert [i.id for i in test] == [i.id for i in val]


def test_load_jsonl_builds_dataset(tmp_path):
    path = write_jsonl(tmp_path / "named.jsonl", [record("a")])
    dataset = load_jsonl(path)
    assert dataset.name == "named"
    assert dataset.instruction.answer_marker == "Answer:"
