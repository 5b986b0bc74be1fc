"""Dual-objective candidate selection and trajectory metrics.

Candidates are compared against their parents on the recent instance window:
gain is the summed per-instance advantage, divergence the count of flipped
correctness bits. Selection keeps positive-gain candidates ordered by
(gain desc, divergence asc, insertion order) and falls back to carrying the
parents forward when fewer than the beam width survive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError, ContractError, KppoError
from .evaluation import CorrectnessVector
from .hierarchy import PromptDocument


class EmptyTrajectoryError(KppoError):
    """Learning gain is undefined on an empty trajectory."""


@dataclass(frozen=True)
class CandidatePair:
    candidate: PromptDocument
    parent: PromptDocument
    delta_s: int
    divergence: int
    is_identity: bool = False

    def __post_init__(self) -> None:
        if abs(self.delta_s) > self.divergence:
            raise ValueError(
                f"|delta_s|={abs(self.delta_s)} exceeds divergence={self.divergence}"
            )


def identity_pair(doc: PromptDocument) -> CandidatePair:
    return CandidatePair(doc, doc, 0, 0, is_identity=True)


def advantage(bit_new: int, bit_old: int) -> int:
    if bit_new not in (0, 1) or bit_old not in (0, 1):
        raise ValueError(f"bits must be 0 or 1, got ({bit_new}, {bit_old})")
    return bit_new - bit_old


def _check_aligned(vec_new: CorrectnessVector, vec_old: CorrectnessVector) -> None:
    if vec_new.instance_ids != vec_old.instance_ids:
        raise ContractError(
            "correctness vectors cover different instance windows: "
            f"{vec_new.instance_ids} vs {vec_old.instance_ids}"
        )


def delta_score(vec_new: CorrectnessVector, vec_old: CorrectnessVector) -> int:
    """Summed advantage of the new prompt over the old on a shared window."""
    _check_aligned(vec_new, vec_old)
    return sum(advantage(n, o) for n, o in zip(vec_new.bits, vec_old.bits))


def divergence(vec_new: CorrectnessVector, vec_old: CorrectnessVector) -> int:
    """Number of instances whose correctness bit differs between prompts."""
    _check_aligned(vec_new, vec_old)
    return sum(1 for n, o in zip(vec_new.bits, vec_old.bits) if n != o)


def rank_candidates(pairs: list[CandidatePair], beam_width: int) -> list[CandidatePair]:
    """Select up to ``beam_width`` pairs.

    Positive-gain pairs are ordered by (delta_s desc, divergence asc,
    insertion order); when fewer than ``beam_width`` qualify, identity pairs
    fill the remainder in their insertion (beam) order so the beam never goes
    empty.
    """
    if beam_width < 1:
        raise ConfigurationError(f"beam width must be >= 1, got {beam_width}")
    positives = [
        (pair.delta_s, pair.divergence, index, pair)
        for index, pair in enumerate(pairs)
        if pair.delta_s > 0
    ]
    positives.sort(key=lambda row: (-row[0], row[1], row[2]))
    selected = [row[3] for row in positives[:beam_width]]
    if len(selected) < beam_width:
        for pair in pairs:
            if pair.is_identity:
                selected.append(pair)
                if len(selected) == beam_width:
                    break
    return selected


def filter_candidates(pairs: list[CandidatePair], beam_width: int) -> list[PromptDocument]:
    return [pair.candidate for pair in rank_candidates(pairs, beam_width)]


@dataclass(frozen=True)
class TrajectoryStep:
    """One optimization step as persisted to the trajectory log."""

    step: int
    batch_ids: tuple[str, ...]
    selected_fingerprint: str
    bits_previous: tuple[int, ...]
    bits_selected: tuple[int, ...]
    delta_s: int
    divergence: int
    window_accuracy: float
    violation_count: int
    prompt_chars: int

    def __post_init__(self) -> None:
        if not (
            len(self.batch_ids) == len(self.bits_previous) == len(self.bits_selected)
        ):
            raise ValueError("batch ids and bit lists must align")

    def to_json(self) -> dict:
        return {
            "kind": "step",
            "step": self.step,
            "batch_ids": list(self.batch_ids),
            "selected_fingerprint": self.selected_fingerprint,
            "bits_previous": list(self.bits_previous),
            "bits_selected": list(self.bits_selected),
            "delta_s": self.delta_s,
            "divergence": self.divergence,
            "window_accuracy": self.window_accuracy,
            "violation_count": self.violation_count,
            "prompt_chars": self.prompt_chars,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "TrajectoryStep":
        return cls(
            step=raw["step"],
            batch_ids=tuple(raw["batch_ids"]),
            selected_fingerprint=raw["selected_fingerprint"],
            bits_previous=tuple(raw["bits_previous"]),
            bits_selected=tuple(raw["bits_selected"]),
            delta_s=raw["delta_s"],
            divergence=raw["divergence"],
            window_accuracy=raw["window_accuracy"],
            violation_count=raw["violation_count"],
            prompt_chars=raw["prompt_chars"],
        )


@dataclass
class TrajectoryLog:
    steps: list[TrajectoryStep] = field(default_factory=list)

    def append(self, step: TrajectoryStep) -> None:
        if self.steps and step.step <= self.steps[-1].step:
            raise ValueError(
                f"step indices must increase: {step.step} after {self.steps[-1].step}"
            )
        self.steps.append(step)


def learning_gain(trajectory: TrajectoryLog) -> float:
    """Mean over steps of the batch-mean correctness improvement.

    Uses only the bits already recorded in the log; no model calls.
    """
    if not trajectory.steps:
        raise EmptyTrajectoryError("cannot compute learning gain of an empty trajectory")
    total = 0.0
    for step in trajectory.steps:
        if not step.batch_ids:
            raise EmptyTrajectoryError(f"step {step.step} has an empty batch")
        per_instance = [
            advantage(new, old)
            for new, old in zip(step.bits_selected, step.bits_previous)
        ]
        total += sum(per_instance) / len(per_instance)
    return total / len(trajectory.steps)


def write_trajectory_line(path: Path, record: dict) -> None:
    with Path(path).open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_trajectory(path: Path) -> tuple[TrajectoryLog, Optional[dict]]:
    """Read a trajectory log file; returns (steps, final summary or None)."""
    trajectory = TrajectoryLog()
    final: Optional[dict] = None
    path = Path(path)
    if not path.exists():
        return trajectory, final
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("kind") == "final":
            final = record
        else:
            trajectory.append(TrajectoryStep.from_json(record))
    return trajectory, final


def truncate_trajectory(path: Path, last_step: int) -> None:
    """Drop records beyond ``last_step``; used when resuming from a checkpoint."""
    path = Path(path)
    if not path.exists():
        return
    kept: list[str] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if record.get("kind") == "final":
            continue
        if record["step"] <= last_step:
            kept.append(json.dumps(record, ensure_ascii=False))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(k + "\n" for k in kept), encoding="utf-8")
    tmp.replace(path)
