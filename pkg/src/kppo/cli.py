"""Command-line entry points: run, resume, report, inspect.

Exit codes: 0 success, 1 fatal error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .config import RunConfig, load_config
from .datasets import load_task, split_dataset
from .engine import (
    OptimizationEngine,
    RunPaths,
    build_adapter,
    load_initial_prompt,
)
from .errors import ConfigurationError, KppoError
from .gateway import OPTIMIZER, TARGET
from .hierarchy import (
    balance_ratio,
    branching_factor,
    detect_violations,
    parse_prompt,
)
from .reporting import report_json, report_text, write_reports
from .templates import TemplateSet

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2


def validate_run(config: RunConfig) -> dict:
    """Everything cmd_run would need, checked without a single model call."""
    dataset = load_task(config.task_path)
    train, val, test = split_dataset(
        dataset,
        seed=config.seed,
        sizes=(config.split.train, config.split.val, config.split.test),
        val_as_test=config.split.val_as_test,
    )
    if not train:
        raise ConfigurationError("training split is empty")
    if not val:
        raise ConfigurationError("validation split is empty")
    if config.batch_size > len(train):
        raise ConfigurationError(
            f"batch_size {config.batch_size} exceeds the training pool of {len(train)}"
        )
    TemplateSet.load(Path(config.templates_dir) if config.templates_dir else None)
    load_initial_prompt(config)
    build_adapter(config.optimizer_model, OPTIMIZER, config)
    build_adapter(config.target_model, TARGET, config)
    return {
        "task": dataset.name,
        "train": len(train),
        "val": len(val),
        "test": len(test),
    }


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(Path(args.config), seed_override=args.seed)
    if args.dry_run:
        summary = validate_run(config)
        print(
            "dry run ok: task {task} with {train} train / {val} val / {test} test "
            "instances".format(**summary)
        )
        return EXIT_OK
    validate_run(config)
    engine = OptimizationEngine.fresh(config)
    engine.run()
    engine.finish()
    report = write_reports(engine.paths.workdir)
    print(report_text(report), end="")
    print(f"optimized prompt written to {engine.paths.optimized_prompt}")
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    config = load_config(Path(args.config)) if args.config else None
    engine = OptimizationEngine.resume(Path(args.checkpoint), config=config)
    engine.run()
    engine.finish()
    report = write_reports(engine.paths.workdir)
    print(report_text(report), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    workdir = Path(args.workdir)
    if not workdir.is_dir():
        raise ConfigurationError(f"run directory not found: {workdir}")
    report = write_reports(workdir)
    if args.json:
        print(report_json(report), end="")
    else:
        print(report_text(report), end="")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.prompt)
    if not path.exists():
        raise ConfigurationError(f"prompt file not found: {path}")
    doc = parse_prompt(path.read_text(encoding="utf-8"))
    tree = doc.tree
    report = detect_violations(tree, args.max_children, args.max_balance)
    if args.json:
        payload = report.to_dict()
        for row in payload["local_violations"] + payload["global_violations"]:
            row["path"] = tree.path_titles(row["node_id"])
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    local_ids = {v.node_id for v in report.local_violations}
    global_ids = {v.node_id for v in report.global_violations}
    for node in tree.topics_preorder():
        if node.id == tree.root_id and not node.text:
            continue
        flags = []
        if node.id in local_ids:
            flags.append("DEGREE")
        if node.id in global_ids:
            flags.append("BALANCE")
        bf = branching_factor(tree, node.id)
        beta = balance_ratio(tree, node.id)
        indent = "  " * (node.depth - 1)
        print(
            f"{indent}{node.text}  [outdeg={tree.outdeg(node.id)} "
            f"bf={float(bf):.2f} beta={float(beta):.2f}]"
            + (f"  ! {' '.join(flags)}" if flags else "")
        )
    if report.is_empty():
        print("no violations")
    else:
        print(
            f"{len(report.local_violations)} degree violation(s), "
            f"{len(report.global_violations)} balance violation(s)"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kppo",
        description="Optimize a system prompt by iterative knowledge provision.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a full optimization run")
    run.add_argument("--config", required=True, help="run configuration YAML")
    run.add_argument("--dry-run", action="store_true", help="validate inputs, no model calls")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.set_defaults(func=cmd_run)

    resume = sub.add_parser("resume", help="continue a run from its checkpoint")
    resume.add_argument("--checkpoint", required=True, help="checkpoint.json path")
    resume.add_argument(
        "--config", default=None, help="optional config to verify against the checkpoint"
    )
    resume.set_defaults(func=cmd_resume)

    report = sub.add_parser("report", help="regenerate the report from run logs")
    report.add_argument("workdir", help="run working directory")
    report.add_argument("--json", action="store_true", help="print machine-readable JSON")
    report.set_defaults(func=cmd_report)

    inspect = sub.add_parser("inspect", help="audit a prompt's knowledge hierarchy")
    inspect.add_argument("prompt", help="prompt text file")
    inspect.add_argument("--max-children", type=int, default=16)
    inspect.add_argument("--max-balance", type=float, default=8.0)
    inspect.add_argument("--json", action="store_true")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KppoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
