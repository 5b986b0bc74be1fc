"""Running a prompt over task instances and scoring correctness.

Each instance is a labeled-options question; the target model is asked
through a fixed instruction template and its reply is reduced to a label (or
no answer). The per-instance 0/1 outcomes of one prompt over an ordered
instance list form a correctness vector, memoized in an append-only cache
keyed by (prompt fingerprint, instance id) so re-evaluation never repeats an
LLM call.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigurationError, KppoError
from .gateway import TARGET, ChatRequest, LLMGateway
from .hierarchy import PromptDocument, render_prompt

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "Question: {question}\n\nOptions:\n{options}"
DEFAULT_ANSWER_MARKER = "Answer:"

# characters tolerated between the answer marker and the label
_JUNK = " \t\r\n*_:\"'`.,;()[]-"


class EvaluationError(KppoError):
    """Evaluation aborted; carries the position of the first failed instance."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Instance:
    id: str
    question: str
    options: tuple[tuple[str, str], ...]
    gold: str
    split: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("instance id must be nonempty")
        labels = [label for label, _ in self.options]
        if len(set(labels)) != len(labels):
            raise ValueError(f"instance {self.id}: duplicate option labels")
        if self.gold not in labels:
            raise ValueError(
                f"instance {self.id}: gold label {self.gold!r} not among options {labels}"
            )

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)


@dataclass(frozen=True)
class TaskInstruction:
    template: str = DEFAULT_TEMPLATE
    answer_marker: str = DEFAULT_ANSWER_MARKER

    def __post_init__(self) -> None:
        for placeholder in ("{question}", "{options}"):
            if self.template.count(placeholder) != 1:
                raise ConfigurationError(
                    f"instruction template must contain {placeholder} exactly once"
                )
        if not self.answer_marker.strip():
            raise ConfigurationError("answer_marker must be nonempty")


@dataclass(frozen=True)
class CorrectnessVector:
    instance_ids: tuple[str, ...]
    bits: tuple[int, ...]
    prompt_fingerprint: str

    def __post_init__(self) -> None:
        if len(self.instance_ids) != len(self.bits):
            raise ValueError("instance_ids and bits must have equal length")
        if any(bit not in (0, 1) for bit in self.bits):
            raise ValueError("bits must be 0 or 1")

    @property
    def accuracy(self) -> float:
        if not self.bits:
            return 0.0
        return sum(self.bits) / len(self.bits)


def prompt_fingerprint(doc: PromptDocument) -> str:
    return hashlib.sha256(render_prompt(doc).encode("utf-8")).hexdigest()


def format_options(options: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"{label}. {text}" for label, text in options)


def build_messages(
    doc: PromptDocument, instance: Instance, instruction: TaskInstruction
) -> tuple[tuple[str, str], ...]:
    """System message is the rendered prompt; user message is the filled
    instruction ending with the answer-marker directive."""
    user = instruction.template.format(
        question=instance.question, options=format_options(instance.options)
    )
    directive = (
        f'End your reply with "{instruction.answer_marker} X" '
        f"where X is one of: {', '.join(instance.labels)}."
    )
    return (("system", render_prompt(doc)), ("user", f"{user}\n\n{directive}"))


def _label_at(text: str, labels: Sequence[str]) -> Optional[str]:
    """Label at the start of ``text`` after junk characters, else None."""
    stripped = text.lstrip(_JUNK)
    for label in sorted(labels, key=len, reverse=True):
        if stripped[: len(label)].lower() == label.lower():
            rest = stripped[len(label):]
            if not rest or not rest[0].isalnum():
                return label
    return None


def extract_answer(
    raw: str, labels: Sequence[str], marker: str = DEFAULT_ANSWER_MARKER
) -> Optional[str]:
    """Pull the answered label out of a model reply.

    The last marker occurrence followed by a label wins; with no such
    occurrence the last standalone label token anywhere in the text is used;
    otherwise None (scored as wrong).
    """
    lowered = raw.lower()
    marker_lower = marker.lower()
    position = len(lowered)
    while True:
        position = lowered.rfind(marker_lower, 0, position)
        if position < 0:
            break
        label = _label_at(raw[position + len(marker):], labels)
        if label is not None:
            return label
    best: tuple[int, int, str] | None = None
    for label in labels:
        pattern = re.compile(
            rf"(?<![A-Za-z0-9]){re.escape(label)}(?![A-Za-z0-9])", re.IGNORECASE
        )
        for match in pattern.finditer(raw):
            key = (match.start(), len(label))
            if best is None or key > (best[0], best[1]):
                best = (match.start(), len(label), label)
    return best[2] if best else None


class EvalCache:
    """Append-only store of (prompt fingerprint, instance id) -> bit."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path else None
        self._bits: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("dropping torn cache line in %s", self.path)
                    continue
                key = (record["prompt_fingerprint"], record["instance_id"])
                self._bits[key] = int(record["bit"])

    def get(self, fingerprint: str, instance_id: str) -> Optional[int]:
        with self._lock:
            return self._bits.get((fingerprint, instance_id))

    def put(self, fingerprint: str, instance_id: str, bit: int, raw_output: str) -> None:
        with self._lock:
            key = (fingerprint, instance_id)
            if key in self._bits:
                return
            self._bits[key] = bit
            if self.path:
                record = {
                    "prompt_fingerprint": fingerprint,
                    "instance_id": instance_id,
                    "bit": bit,
                    "raw_output_digest": hashlib.sha256(
                        raw_output.encode("utf-8")
                    ).hexdigest(),
                }
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, ensure_ascii=False) + "\n")


class Evaluator:
    """Scores prompts on instances through the target model.

    Results are memoized by (prompt fingerprint, instance id); instance calls
    fan out over a thread pool up to ``parallelism`` while the returned vector
    keeps input order.
    """

    def __init__(
        self,
        gateway: LLMGateway,
        instruction: TaskInstruction,
        cache: Optional[EvalCache] = None,
        temperature: float = 0.0,
        seed: Optional[int] = 0,
        max_output: int = 512,
        parallelism: int = 4,
    ) -> None:
        self.gateway = gateway
        self.instruction = instruction
        self.cache = cache or EvalCache()
        self.temperature = temperature
        self.seed = seed
        self.max_output = max_output
        self.parallelism = max(1, parallelism)

    def _ask(self, doc: PromptDocument, instance: Instance) -> str:
        request = ChatRequest(
            role=TARGET,
            messages=build_messages(doc, instance, self.instruction),
            temperature=self.temperature,
            seed=self.seed,
            max_output=self.max_output,
        )
        return self.gateway.complete(request).text

    def run_instance(
        self, doc: PromptDocument, instance: Instance, fingerprint: Optional[str] = None
    ) -> tuple[int, str]:
        """Ask the target about one instance; returns (bit, raw reply)."""
        fingerprint = fingerprint or prompt_fingerprint(doc)
        raw = self._ask(doc, instance)
        answered = extract_answer(raw, instance.labels, self.instruction.answer_marker)
        bit = 1 if answered == instance.gold else 0
        self.cache.put(fingerprint, instance.id, bit, raw)
        return bit, raw

    def evaluate(
        self, doc: PromptDocument, instances: Sequence[Instance]
    ) -> CorrectnessVector:
        if not instances:
            raise ValueError("instances must be nonempty")
        fingerprint = prompt_fingerprint(doc)
        # a window may hold the same instance twice (epoch boundary); fan out
        # each id once so concurrent workers never race on one request
        unique: dict[str, Instance] = {}
        for instance in instances:
            unique.setdefault(instance.id, instance)

        def one(instance: Instance) -> tuple[int, Optional[Exception]]:
            cached = self.cache.get(fingerprint, instance.id)
            if cached is not None:
                return cached, None
            try:
                bit, _ = self.run_instance(doc, instance, fingerprint)
                return bit, None
            except KppoError as exc:  # surfaced below with its position
                return 0, exc

        workers = list(unique.values())
        if self.parallelism == 1 or len(workers) == 1:
            results = [one(instance) for instance in workers]
        else:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                results = list(pool.map(one, workers))
        by_id = {instance.id: result for instance, result in zip(workers, results)}

        for position, instance in enumerate(instances):
            _, exc = by_id[instance.id]
            if exc is not None:
                raise EvaluationError(
                    f"evaluation failed at position {position} "
                    f"(instance {instance.id}): {exc}",
                    position=position,
                ) from exc
        return CorrectnessVector(
            instance_ids=tuple(i.id for i in instances),
            bits=tuple(by_id[i.id][0] for i in instances),
            prompt_fingerprint=fingerprint,
        )

    def failing_cases(
        self, doc: PromptDocument, instances: Sequence[Instance]
    ) -> list[tuple[Instance, str]]:
        """Instances the prompt gets wrong, with the model's raw replies.

        Replies are refetched through the gateway when only the cached bit is
        known; deterministic requests make that a cache hit, not a new call.
        """
        fingerprint = prompt_fingerprint(doc)
        failures: list[tuple[Instance, str]] = []
        for position, instance in enumerate(instances):
            cached = self.cache.get(fingerprint, instance.id)
            if cached == 1:
                continue
            try:
                bit, raw = self.run_instance(doc, instance, fingerprint)
            except KppoError as exc:
                raise EvaluationError(
                    f"evaluation failed at position {position} "
                    f"(instance {instance.id}): {exc}",
                    position=position,
                ) from exc
            if bit == 0:
                failures.append((instance, raw))
        return failures
