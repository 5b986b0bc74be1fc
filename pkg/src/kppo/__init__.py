"""Knowledge-provision prompt optimization.

Iteratively rewrites a system prompt for knowledge-intensive tasks: failures
of the current prompt drive optimizer-model analyses of the missing domain
knowledge, candidate prompts carry that knowledge in a structured topic/note
hierarchy, a dual-objective batch criterion filters the candidates, and
structural limits keep the hierarchy from over-branching.
"""

from .config import ModelConfig, RunConfig, SplitSpec, load_config
from .datasets import Dataset, load_jsonl, load_task, split_dataset
from .engine import Gradient, OptimizationEngine, RunPaths
from .errors import ConfigurationError, ContractError, KppoError
from .evaluation import (
    CorrectnessVector,
    EvalCache,
    Evaluator,
    Instance,
    TaskInstruction,
    build_messages,
    extract_answer,
    prompt_fingerprint,
)
from .filtering import (
    CandidatePair,
    TrajectoryLog,
    TrajectoryStep,
    advantage,
    delta_score,
    divergence,
    filter_candidates,
    learning_gain,
    rank_candidates,
)
from .gateway import (
    ChatRequest,
    ChatResponse,
    HttpAdapter,
    LLMGateway,
    ScriptedAdapter,
)
from .hierarchy import (
    KnowledgeTree,
    Node,
    PromptDocument,
    TreeBuilder,
    ViolationReport,
    balance_ratio,
    branching_factor,
    detect_violations,
    parse_prompt,
    render_prompt,
)
from .reporting import RunReport, build_report, write_reports
from .sampling import EpochSampler

__version__ = "0.1.0"

__all__ = [
    "CandidatePair",
    "ChatRequest",
    "ChatResponse",
    "ConfigurationError",
    "ContractError",
    "CorrectnessVector",
    "Dataset",
    "EpochSampler",
    "EvalCache",
    "Evaluator",
    "Gradient",
    "HttpAdapter",
    "Instance",
    "KnowledgeTree",
    "KppoError",
    "LLMGateway",
    "ModelConfig",
    "Node",
    "OptimizationEngine",
    "PromptDocument",
    "RunConfig",
    "RunPaths",
    "RunReport",
    "ScriptedAdapter",
    "SplitSpec",
    "TaskInstruction",
    "TrajectoryLog",
    "TrajectoryStep",
    "TreeBuilder",
    "ViolationReport",
    "advantage",
    "balance_ratio",
    "branching_factor",
    "build_messages",
    "build_report",
    "delta_score",
    "detect_violations",
    "divergence",
    "extract_answer",
    "filter_candidates",
    "learning_gain",
    "load_config",
    "load_jsonl",
    "load_task",
    "parse_prompt",
    "prompt_fingerprint",
    "rank_candidates",
    "render_prompt",
    "split_dataset",
    "write_reports",
]
