"""The optimization loop: batches, failure analysis, candidate generation,
beam update, checkpointing, final selection.

Each step samples a training batch into the instance bank, collects the
failures of every beam prompt on that batch, asks the optimizer model for
knowledge-gap analyses ("gradients") and rewritten candidate prompts, scores
every candidate against its parent on the recent window, and keeps the best
few. State checkpoints atomically after every step, so a killed run resumes
at the same step and reproduces the same trajectory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from .config import ModelConfig, RunConfig, config_from_dict, resolve_handler
from .datasets import Dataset, load_task, split_dataset
from .errors import ConfigurationError, KppoError
from .evaluation import EvalCache, Evaluator, Instance, prompt_fingerprint
from .filtering import (
    CandidatePair,
    TrajectoryLog,
    TrajectoryStep,
    delta_score,
    divergence,
    identity_pair,
    load_trajectory,
    rank_candidates,
    truncate_trajectory,
    write_trajectory_line,
)
from .gateway import (
    OPTIMIZER,
    TARGET,
    ChatRequest,
    HttpAdapter,
    LLMGateway,
    ResponseCache,
    ResponseLog,
    ScriptedAdapter,
)
from .hierarchy import PromptDocument, detect_violations, parse_prompt, render_prompt
from .sampling import EpochSampler
from .templates import GRADIENT_FORMAT_REMINDER, SHORTEN_REMINDER, TemplateSet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class CheckpointError(KppoError):
    """A checkpoint file cannot be read or does not match the configuration."""


@dataclass(frozen=True)
class Gradient:
    explanation: str
    gap_analysis: str
    modification: str
    source_failures: tuple[str, ...]


_SECTION_RE = re.compile(
    r"^\s*(Error Explanation|Knowledge Gap Analysis|Modification)\s*:\s*",
    re.IGNORECASE | re.MULTILINE,
)


def parse_gradient_reply(
    text: str, failures: Sequence[tuple[Instance, str]]
) -> Optional[Gradient]:
    """Split an optimizer reply into the three labeled sections.

    Returns None when any section is missing or empty; the caller retries
    once and then skips the slot.
    """
    matches = list(_SECTION_RE.finditer(text))
    sections: dict[str, str] = {}
    for index, match in enumerate(matches):
        name = match.group(1).lower()
        end = matches[index + 1].start() if index + 1 < len(matches) else len(text)
        sections.setdefault(name, text[match.end() : end].strip())
    explanation = sections.get("error explanation", "")
    gap = sections.get("knowledge gap analysis", "")
    modification = sections.get("modification", "")
    if not (explanation and gap and modification):
        return None
    return Gradient(
        explanation=explanation,
        gap_analysis=gap,
        modification=modification,
        source_failures=tuple(instance.id for instance, _ in failures),
    )


def derive_seed(*parts) -> int:
    """Stable per-call seed so repeated optimizer sampling slots differ."""
    joined = "\x1f".join(str(part) for part in parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:4], "big")


@dataclass(frozen=True)
class RunPaths:
    workdir: Path

    @property
    def checkpoint(self) -> Path:
        return self.workdir / "checkpoint.json"

    @property
    def trajectory(self) -> Path:
        return self.workdir / "trajectory.jsonl"

    @property
    def responses(self) -> Path:
        return self.workdir / "responses.jsonl"

    @property
    def llm_cache(self) -> Path:
        return self.workdir / "llm_cache.jsonl"

    @property
    def eval_cache(self) -> Path:
        return self.workdir / "eval_cache.jsonl"

    @property
    def optimized_prompt(self) -> Path:
        return self.workdir / "optimized_prompt.txt"

    @property
    def report_json(self) -> Path:
        return self.workdir / "report.json"

    @property
    def report_text(self) -> Path:
        return self.workdir / "report.txt"


def build_adapter(
    model_config: ModelConfig, role: str, run_config: RunConfig
) -> ScriptedAdapter | HttpAdapter:
    if model_config.adapter == "scripted":
        handler: Optional[Callable] = None
        if model_config.handler:
            handler = resolve_handler(model_config.handler)(run_config, role)
        return ScriptedAdapter(handler=handler)
    if not model_config.endpoint:
        raise ConfigurationError(f"{role} model uses http but has no endpoint")
    return HttpAdapter(
        base_url=model_config.endpoint,
        model=model_config.model,
        api_key_env=model_config.api_key_env,
        timeout=model_config.timeout,
        max_attempts=model_config.max_attempts,
        backoff=model_config.backoff,
    )


def build_gateway(
    config: RunConfig,
    paths: RunPaths,
    adapters: Optional[dict] = None,
) -> LLMGateway:
    if adapters is None:
        adapters = {
            OPTIMIZER: build_adapter(config.optimizer_model, OPTIMIZER, config),
            TARGET: build_adapter(config.target_model, TARGET, config),
        }
    return LLMGateway(
        adapters=adapters,
        cache=ResponseCache(paths.llm_cache),
        response_log=ResponseLog(paths.responses),
        parallelism=config.parallelism,
    )


def load_initial_prompt(config: RunConfig) -> PromptDocument:
    if not config.initial_prompt_path:
        return parse_prompt("")
    path = Path(config.initial_prompt_path)
    if not path.exists():
        raise ConfigurationError(f"initial prompt file not found: {path}")
    return parse_prompt(path.read_text(encoding="utf-8"))


class OptimizationEngine:
    """Drives a full run; construct with ``fresh`` or ``resume``."""

    def __init__(
        self,
        config: RunConfig,
        dataset: Optional[Dataset] = None,
        adapters: Optional[dict] = None,
    ) -> None:
        self.config = config
        self.paths = RunPaths(config.workdir_path())
        self.paths.workdir.mkdir(parents=True, exist_ok=True)
        if dataset is None:
            if not config.task_path:
                raise ConfigurationError("config has no task_path and no dataset was given")
            dataset = load_task(config.task_path)
        self.dataset = dataset
        split = config.split
        self.train, self.val, self.test = split_dataset(
            dataset,
            seed=config.seed,
            sizes=(split.train, split.val, split.test),
            val_as_test=split.val_as_test,
        )
        if not self.train:
            raise ConfigurationError("training split is empty")
        if not self.val:
            raise ConfigurationError("validation split is empty")
        if config.batch_size > len(self.train):
            raise ConfigurationError(
                f"batch_size {config.batch_size} exceeds the training pool "
                f"of {len(self.train)}"
            )
        self._by_id = {i.id: i for i in self.train + self.val + self.test}
        self.templates = TemplateSet.load(
            Path(config.templates_dir) if config.templates_dir else None
        )
        self.gateway = build_gateway(config, self.paths, adapters)
        self.evaluator = Evaluator(
            self.gateway,
            dataset.instruction,
            cache=EvalCache(self.paths.eval_cache),
            temperature=config.target_model.temperature,
            seed=config.seed,
            max_output=config.target_model.max_tokens,
            parallelism=config.parallelism,
        )
        # mutable run state; populated by fresh() or resume()
        self.sampler = self._make_sampler()
        self.beam: list[PromptDocument] = [load_initial_prompt(config)]
        self.bank: list[str] = []
        self.trajectory = TrajectoryLog()
        self.step = 0
        self.last_pair_count = 0

    # ----- construction ---------------------------------------------------

    @classmethod
    def fresh(
        cls,
        config: RunConfig,
        dataset: Optional[Dataset] = None,
        adapters: Optional[dict] = None,
    ) -> "OptimizationEngine":
        # a fresh run starts its logs empty; caches are content-addressed
        # and stay valid across runs
        paths = RunPaths(config.workdir_path())
        for stale in (paths.trajectory, paths.responses, paths.checkpoint):
            stale.unlink(missing_ok=True)
        engine = cls(config, dataset=dataset, adapters=adapters)
        engine._write_checkpoint()
        return engine

    @classmethod
    def resume(
        cls,
        checkpoint_path: Path,
        dataset: Optional[Dataset] = None,
        adapters: Optional[dict] = None,
        config: Optional[RunConfig] = None,
    ) -> "OptimizationEngine":
        checkpoint_path = Path(checkpoint_path)
        if not checkpoint_path.exists():
            raise CheckpointError(f"checkpoint not found: {checkpoint_path}")
        try:
            raw = json.loads(checkpoint_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(
                f"checkpoint {checkpoint_path} is corrupt at offset {exc.pos}: {exc.msg}"
            ) from exc
        if raw.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"checkpoint format {raw.get('format')!r} is not supported"
            )
        stored = config_from_dict(raw["config"])
        if stored.digest() != raw["config_digest"]:
            raise CheckpointError("checkpoint config does not match its recorded digest")
        if config is not None and config.digest() != raw["config_digest"]:
            raise CheckpointError(
                "provided config differs from the one this checkpoint was written "
                f"with (digest {config.digest()[:12]} vs {raw['config_digest'][:12]})"
            )
        engine = cls(stored, dataset=dataset, adapters=adapters)
        engine.step = int(raw["step"])
        engine.beam = [parse_prompt(text) for text in raw["beam"]]
        engine.bank = list(raw["bank"])
        engine.sampler = engine._make_sampler(
            epoch=raw["sampler"]["epoch"], cursor=raw["sampler"]["cursor"]
        )
        truncate_trajectory(engine.paths.trajectory, engine.step)
        engine.trajectory, _ = load_trajectory(engine.paths.trajectory)
        engine.gateway.step = engine.step
        return engine

    # ----- per-step pieces -------------------------------------------------

    def _make_sampler(self, epoch: int = 0, cursor: int = 0) -> EpochSampler:
        """Batch sampler over the training pool; override to change ordering
        (any object with next_batch/state/epoch_order fits)."""
        return EpochSampler(
            [i.id for i in self.train], self.config.seed, epoch=epoch, cursor=cursor
        )

    def instance(self, instance_id: str) -> Instance:
        return self._by_id[instance_id]

    def collect_failures(
        self, doc: PromptDocument, batch: Sequence[Instance]
    ) -> list[tuple[Instance, str]]:
        if not batch:
            raise ValueError("batch must be nonempty")
        return self.evaluator.failing_cases(doc, batch)

    def _optimizer_request(self, user_text: str, seed: int) -> ChatRequest:
        model = self.config.optimizer_model
        return ChatRequest(
            role=OPTIMIZER,
            messages=(
                ("system", self.templates.optimizer_system),
                ("user", user_text),
            ),
            temperature=model.temperature,
            seed=seed,
            max_output=model.max_tokens,
        )

    def generate_gradient(
        self,
        doc: PromptDocument,
        failures: list[tuple[Instance, str]],
        step: int,
        parent_index: int,
        slot: int,
    ) -> Optional[Gradient]:
        if not failures:
            raise ValueError("gradient generation needs at least one failure")
        base = self.templates.gradient_message(doc, failures)
        for attempt in (1, 2):
            text = base if attempt == 1 else base + GRADIENT_FORMAT_REMINDER
            seed = derive_seed(self.config.seed, "gradient", step, parent_index, slot, attempt)
            reply = self.gateway.complete(self._optimizer_request(text, seed)).text
            gradient = parse_gradient_reply(reply, failures)
            if gradient is not None:
                return gradient
        log.warning(
            "step %d parent %d slot %d: gradient reply unparseable after retry; skipped",
            step,
            parent_index,
            slot,
        )
        return None

    def generate_candidate(
        self,
        doc: PromptDocument,
        failures: list[tuple[Instance, str]],
        gradient: Gradient,
        issues_text: str,
        step: int,
        parent_index: int,
        slot: int,
    ) -> Optional[PromptDocument]:
        base = self.templates.candidate_message(
            doc,
            failures,
            gradient.explanation,
            gradient.gap_analysis,
            gradient.modification,
            issues_text,
        )
        budget = self.config.prompt_char_budget
        for attempt in (1, 2):
            text = base if attempt == 1 else base + SHORTEN_REMINDER.format(budget=budget)
            seed = derive_seed(self.config.seed, "candidate", step, parent_index, slot, attempt)
            reply = self.gateway.complete(self._optimizer_request(text, seed)).text
            candidate = parse_prompt(reply)
            if candidate.tree.is_empty() and not candidate.preamble:
                log.warning(
                    "step %d parent %d slot %d: empty candidate; skipped",
                    step,
                    parent_index,
                    slot,
                )
                return None
            if len(render_prompt(candidate)) <= budget:
                return candidate
        log.warning(
            "step %d parent %d slot %d: candidate above %d chars after retry; skipped",
            step,
            parent_index,
            slot,
            budget,
        )
        return None

    # ----- the loop ---------------------------------------------------------

    def run_step(self) -> None:
        """One full iteration; aborting restores the pre-step state."""
        saved_beam = list(self.beam)
        saved_bank_len = len(self.bank)
        saved_sampler = dict(self.sampler.state)
        saved_steps = len(self.trajectory.steps)
        try:
            self._run_step_body()
        except Exception:
            self.beam = saved_beam
            del self.bank[saved_bank_len:]
            del self.trajectory.steps[saved_steps:]
            self.sampler = self._make_sampler(**saved_sampler)
            raise

    def _run_step_body(self) -> None:
        config = self.config
        step = self.step + 1
        self.gateway.step = step
        batch_ids = self.sampler.next_batch(config.batch_size)
        self.bank.extend(batch_ids)
        batch = [self.instance(i) for i in batch_ids]
        window = [self.instance(i) for i in self.bank[-config.window_size :]]

        previous_leader = self.beam[0]
        pairs: list[CandidatePair] = []
        violation_total = 0
        for parent_index, parent in enumerate(self.beam):
            pairs.append(identity_pair(parent))
            issues_text = ""
            if config.pruning:
                report = detect_violations(
                    parent.tree, config.max_children, config.max_balance_factor
                )
                violation_total += report.count()
                if not report.is_empty():
                    issues_text = self.templates.render_violations(parent.tree, report)
            failures = self.collect_failures(parent, batch)
            if not failures:
                continue
            parent_vector = self.evaluator.evaluate(parent, window)
            for slot in range(config.candidates_per_parent):
                gradient = self.generate_gradient(parent, failures, step, parent_index, slot)
                if gradient is None:
                    continue
                candidate = self.generate_candidate(
                    parent, failures, gradient, issues_text, step, parent_index, slot
                )
                if candidate is None:
                    continue
                vector = self.evaluator.evaluate(candidate, window)
                pairs.append(
                    CandidatePair(
                        candidate=candidate,
                        parent=parent,
                        delta_s=delta_score(vector, parent_vector),
                        divergence=divergence(vector, parent_vector),
                    )
                )

        self.last_pair_count = len(pairs)
        selected = rank_candidates(pairs, config.beam_width)
        self.beam = [pair.candidate for pair in selected]
        leader_pair = selected[0]
        leader = self.beam[0]

        bits_previous = self.evaluator.evaluate(previous_leader, batch).bits
        bits_selected = self.evaluator.evaluate(leader, batch).bits
        window_accuracy = self.evaluator.evaluate(leader, window).accuracy

        record = TrajectoryStep(
            step=step,
            batch_ids=tuple(batch_ids),
            selected_fingerprint=prompt_fingerprint(leader),
            bits_previous=bits_previous,
            bits_selected=bits_selected,
            delta_s=leader_pair.delta_s,
            divergence=leader_pair.divergence,
            window_accuracy=window_accuracy,
            violation_count=violation_total,
            prompt_chars=len(render_prompt(leader)),
        )
        self.trajectory.append(record)
        write_trajectory_line(self.paths.trajectory, record.to_json())
        self.step = step
        self._write_checkpoint()

    def run(self, until_step: Optional[int] = None) -> None:
        limit = self.config.iterations
        if until_step is not None:
            limit = min(limit, until_step)
        while self.step < limit:
            self.run_step()

    def final_select(self) -> tuple[int, list[float]]:
        """Index of the validation-best beam member plus all accuracies."""
        if not self.val:
            raise ConfigurationError("validation split is empty")
        accuracies = [
            self.evaluator.evaluate(doc, self.val).accuracy for doc in self.beam
        ]
        best = max(range(len(accuracies)), key=lambda i: (accuracies[i], -i))
        return best, accuracies

    def finish(self) -> PromptDocument:
        """Final validation selection; writes the prompt and the final record."""
        self.gateway.step = self.step + 1
        best, accuracies = self.final_select()
        selected = self.beam[best]
        test_accuracy = None
        if self.test:
            test_accuracy = self.evaluator.evaluate(selected, self.test).accuracy
        final_record = {
            "kind": "final",
            "selected_fingerprint": prompt_fingerprint(selected),
            "beam_accuracies": accuracies,
            "validation_accuracy": accuracies[best],
            "test_accuracy": test_accuracy,
        }
        write_trajectory_line(self.paths.trajectory, final_record)
        self.paths.optimized_prompt.write_text(
            render_prompt(selected), encoding="utf-8"
        )
        return selected

    # ----- persistence ------------------------------------------------------

    def _write_checkpoint(self) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "config_digest": self.config.digest(),
            "config": self.config.to_dict(),
            "step": self.step,
            "beam": [render_prompt(doc) for doc in self.beam],
            "bank": list(self.bank),
            "sampler": self.sampler.state,
            "trajectory_tail": (
                self.trajectory.steps[-1].to_json() if self.trajectory.steps else None
            ),
        }
        tmp = self.paths.checkpoint.with_suffix(".json.tmp")
        tmp.write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8"
        )
        tmp.replace(self.paths.checkpoint)
