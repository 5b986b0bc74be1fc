"""Request templates for the optimizer model.

Defaults are built in; any of them can be overridden by dropping a
``<name>.txt`` file into a templates directory named in the run config.
Placeholders use ``str.format`` field names.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .evaluation import Instance, format_options
from .hierarchy import KnowledgeTree, PromptDocument, ViolationReport, render_prompt

OPTIMIZER_SYSTEM = (
    "You maintain the system prompt of a question-answering assistant working in "
    "a specialized domain. You improve the prompt by adding the precise domain "
    "knowledge it is missing, organized as a markdown outline: '#' headings for "
    "topics, '- ' bullets for individual facts."
)

FAILURE_CASE = """[Failure {index}]
Question: {question}
Options:
{options}
Model output: {model_output}
Correct answer: {gold}"""

GRADIENT_REQUEST = """The assistant answered the cases below incorrectly under the current system prompt.

Current system prompt:
<<<PROMPT
{prompt}
PROMPT>>>

Failed cases:
{failures}

Analyze these failures. Reply with exactly three labeled sections:
Error Explanation: why the current prompt led the assistant to the wrong answers.
Knowledge Gap Analysis: which specific domain knowledge the prompt is missing.
Modification: the precise knowledge to add or change in the prompt."""

CANDIDATE_REQUEST = """The assistant answered the cases below incorrectly under the current system prompt.

Current system prompt:
<<<PROMPT
{prompt}
PROMPT>>>

Failed cases:
{failures}

Analysis of the failures:
Error Explanation: {explanation}
Knowledge Gap Analysis: {gap_analysis}
Modification: {modification}

{issues_section}Rewrite the complete system prompt so the failed cases are answered correctly. Keep everything that already works. Organize domain knowledge under '#' topic headings with one fact per '- ' bullet. Output only the new prompt text, nothing else."""

DEGREE_VIOLATION = (
    'Topic "{path}" has {outdeg} direct children; the allowed maximum is {limit}.'
)

BALANCE_VIOLATION = (
    'Topic "{path}" is over-branched: {outdeg} direct children against a subtree '
    "branching factor of {bf:.2f} gives balance ratio {beta:.2f}; the allowed "
    "maximum ratio is {limit}."
)

PRUNING_INSTRUCTIONS = """The knowledge hierarchy in the current prompt has structural problems:
{violations}
While rewriting, prune the flagged topics: merge overlapping facts, drop redundant ones, and regroup children under subtopics until every flagged limit is respected. Keep the knowledge the failed cases depend on.

"""

GRADIENT_FORMAT_REMINDER = (
    "\n\nReply with only the three labeled sections (Error Explanation:, "
    "Knowledge Gap Analysis:, Modification:), each nonempty."
)

SHORTEN_REMINDER = (
    "\n\nThe rewritten prompt must be at most {budget} characters. Keep only the "
    "most essential knowledge and output the shortened prompt."
)


@dataclass(frozen=True)
class TemplateSet:
    optimizer_system: str = OPTIMIZER_SYSTEM
    failure_case: str = FAILURE_CASE
    gradient_request: str = GRADIENT_REQUEST
    candidate_request: str = CANDIDATE_REQUEST
    degree_violation: str = DEGREE_VIOLATION
    balance_violation: str = BALANCE_VIOLATION
    pruning_instructions: str = PRUNING_INSTRUCTIONS

    @classmethod
    def load(cls, directory: Path | None) -> "TemplateSet":
        """Build a set from defaults plus any ``<field>.txt`` overrides."""
        if directory is None:
            return cls()
        overrides = {}
        for spec in fields(cls):
            candidate = Path(directory) / f"{spec.name}.txt"
            if candidate.exists():
                overrides[spec.name] = candidate.read_text(encoding="utf-8")
        return cls(**overrides)

    def render_failures(self, failures: list[tuple[Instance, str]]) -> str:
        blocks = [
            self.failure_case.format(
                index=index,
                question=instance.question,
                options=format_options(instance.options),
                model_output=output.strip(),
                gold=instance.gold,
            )
            for index, (instance, output) in enumerate(failures, start=1)
        ]
        return "\n\n".join(blocks)

    def render_violations(self, tree: KnowledgeTree, report: ViolationReport) -> str:
        lines = [
            self.degree_violation.format(
                path=tree.path_titles(v.node_id), outdeg=v.outdeg, limit=v.limit
            )
            for v in report.local_violations
        ]
        lines += [
            self.balance_violation.format(
                path=tree.path_titles(v.node_id),
                outdeg=tree.outdeg(v.node_id),
                bf=float(v.bf),
                beta=float(v.beta),
                limit=v.limit,
            )
            for v in report.global_violations
        ]
        return "\n".join(f"- {line}" for line in lines)

    def gradient_message(
        self, doc: PromptDocument, failures: list[tuple[Instance, str]]
    ) -> str:
        return self.gradient_request.format(
            prompt=render_prompt(doc), failures=self.render_failures(failures)
        )

    def candidate_message(
        self,
        doc: PromptDocument,
        failures: list[tuple[Instance, str]],
        explanation: str,
        gap_analysis: str,
        modification: str,
        issues_text: str = "",
    ) -> str:
        issues_section = (
            self.pruning_instructions.format(violations=issues_text)
            if issues_text
            else ""
        )
        return self.candidate_request.format(
            prompt=render_prompt(doc),
            failures=self.render_failures(failures),
            explanation=explanation,
            gap_analysis=gap_analysis,
            modification=modification,
            issues_section=issues_section,
        )
