"""Agent-guided iterative pruning engine for small transformer models."""

from .model import (
    ForwardCapture,
    LayerTensorState,
    ModelConfig,
    ModelGraph,
    backward_weight_grads,
    build_model,
    forward_nll,
    perplexity,
)
from .data import Corpus, SampleSplit, load_text_corpus, make_split, synth_corpus
from .profiler import (
    ActivationNorms,
    GradientStats,
    LayerProfile,
    build_profiles,
    gradient_importance,
    layer_sensitivity,
    profiles_to_json,
    wanda_scores,
    zscore_normalize,
)
from .pruner import (
    PruneOutcome,
    PruneRequest,
    apply_prune,
    global_sparsity,
    select_prune_set,
)
from .reflection import (
    ASSESSMENT_MESSAGES,
    EXCELLENT,
    GOOD,
    MARGINAL,
    POOR,
    AssessmentRubric,
    FeedbackRecord,
    compute_feedback,
)
from .agent import (
    AgentContext,
    AgentDecision,
    AgentEndpointConfig,
    AgentError,
    AgentFailureError,
    HeuristicPolicy,
    LayerChoice,
    decision_schema,
    heuristic_decide,
    llm_decide,
    render_prompt,
    validate_decision,
)
from .checkpoint import Checkpoint, save_checkpoint, restore_checkpoint
from .orchestrator import IterationLog, RunConfig, RunState, run, should_rollback

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ModelGraph", "LayerTensorState", "ForwardCapture",
    "build_model", "forward_nll", "backward_weight_grads", "perplexity",
    "Corpus", "SampleSplit", "load_text_corpus", "synth_corpus", "make_split",
    "ActivationNorms", "GradientStats", "LayerProfile",
    "wanda_scores", "layer_sensitivity", "gradient_importance",
    "zscore_normalize", "build_profiles", "profiles_to_json",
    "PruneRequest", "PruneOutcome", "select_prune_set", "apply_prune",
    "global_sparsity",
    "AssessmentRubric", "FeedbackRecord", "compute_feedback",
    "ASSESSMENT_MESSAGES", "EXCELLENT", "GOOD", "MARGINAL", "POOR",
    "AgentContext", "AgentDecision", "AgentEndpointConfig", "AgentError",
    "AgentFailureError", "HeuristicPolicy", "LayerChoice",
    "render_prompt", "decision_schema", "validate_decision",
    "llm_decide", "heuristic_decide",
    "Checkpoint", "save_checkpoint", "restore_checkpoint",
    "RunConfig", "RunState", "IterationLog", "run", "should_rollback",
]
