"""Human- and machine-readable run reports, rebuilt from logs alone.

Everything in a report comes from the trajectory log and the response log;
regenerating a report never touches a model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .filtering import EmptyTrajectoryError, learning_gain, load_trajectory
from .gateway import OPTIMIZER, TARGET, read_token_totals


@dataclass
class RunReport:
    steps: list[dict] = field(default_factory=list)
    learning_gain: Optional[float] = None
    token_totals: dict = field(default_factory=dict)
    final: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "learning_gain": self.learning_gain,
            "token_totals": self.token_totals,
            "final": self.final,
        }


def build_report(trajectory_path: Path, responses_path: Path) -> RunReport:
    trajectory, final = load_trajectory(trajectory_path)
    steps = []
    for record in trajectory.steps:
        batch = len(record.batch_ids)
        gain = (
            sum(n - o for n, o in zip(record.bits_selected, record.bits_previous)) / batch
            if batch
            else 0.0
        )
        steps.append(
            {
                "step": record.step,
                "window_accuracy": record.window_accuracy,
                "delta_s": record.delta_s,
                "divergence": record.divergence,
                "batch_gain": gain,
                "violation_count": record.violation_count,
                "prompt_chars": record.prompt_chars,
            }
        )
    try:
        gain_value: Optional[float] = learning_gain(trajectory)
    except EmptyTrajectoryError:
        gain_value = None
    responses_path = Path(responses_path)
    if responses_path.exists():
        totals = read_token_totals(responses_path)
    else:
        totals = {OPTIMIZER: 0, TARGET: 0}
    final_summary = None
    if final is not None:
        final_summary = {
            "selected_fingerprint": final["selected_fingerprint"],
            "validation_accuracy": final["validation_accuracy"],
            "test_accuracy": final.get("test_accuracy"),
            "beam_accuracies": final.get("beam_accuracies", []),
        }
    return RunReport(
        steps=steps,
        learning_gain=gain_value,
        token_totals={"optimizer": totals[OPTIMIZER], "target": totals[TARGET]},
        final=final_summary,
    )


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_text(report: RunReport) -> str:
    lines = ["optimization run report", "======================="]
    if report.steps:
        lines.append("")
        lines.append("step  win_acc  delta_s  div  batch_gain  violations  prompt_chars")
        for row in report.steps:
            lines.append(
                f"{row['step']:>4}  {row['window_accuracy']:>7.3f}  "
                f"{row['delta_s']:>7}  {row['divergence']:>3}  "
                f"{row['batch_gain']:>10.3f}  {row['violation_count']:>10}  "
                f"{row['prompt_chars']:>12}"
            )
    lines.append("")
    if report.learning_gain is None:
        lines.append("learning gain: undefined (empty trajectory)")
    else:
        lines.append(f"learning gain: {report.learning_gain:.4f}")
    lines.append(
        "tokens: optimizer={optimizer} target={target}".format(**report.token_totals)
    )
    if report.final:
        lines.append(
            f"final validation accuracy: {report.final['validation_accuracy']:.4f}"
        )
        if report.final.get("test_accuracy") is not None:
            lines.append(f"final test accuracy: {report.final['test_accuracy']:.4f}")
        lines.append(f"selected prompt: {report.final['selected_fingerprint'][:16]}")
    return "\n".join(lines) + "\n"


def write_reports(workdir: Path) -> RunReport:
    """Regenerate report.json and report.txt inside a run directory."""
    from .engine import RunPaths

    paths = RunPaths(Path(workdir))
    report = build_report(paths.trajectory, paths.responses)
    paths.report_json.write_text(report_json(report), encoding="utf-8")
    paths.report_text.write_text(report_text(report), encoding="utf-8")
    return report
