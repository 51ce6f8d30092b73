"""The iterative pruning loop: profile, ask the agent, prune, evaluate,
and roll back when perplexity degrades past the threshold.

Every iteration starts from a fresh in-memory checkpoint.  Activation
statistics are recollected every iteration on the current masked model;
gradient statistics refresh on a cadence and are reused stale in
between.  A rollback restores the checkpoint bit-for-bit and still
consumes an iteration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .agent import (
    AgentContext,
    AgentDecision,
    AgentEndpointConfig,
    AgentFailureError,
    DEFAULT_POLICY,
    HeuristicPolicy,
    heuristic_decide,
    llm_decide,
)
from .checkpoint import restore_checkpoint, save_checkpoint
from .data import Corpus, make_split
from .model import ForwardCapture, ModelGraph, forward_nll, perplexity
from .profiler import (
    ActivationNorms,
    GradientStats,
    SENSITIVITY_PERCENTILE,
    build_profiles,
    gradient_importance,
    wanda_scores,
)
from .pruner import ACCOUNTINGS, DELTA_MAX, DELTA_MIN, GROUPINGS, PruneRequest, apply_prune, global_sparsity
from .reflection import AssessmentRubric, DEFAULT_RUBRIC, FeedbackRecord, compute_feedback
from .model import backward_weight_grads

STOP_REASONS = ("target_reached", "agent_stop", "max_iterations", "agent_failure")


@dataclass
class RunConfig:
    target_sparsity: float = 0.5
    rollback_threshold: float = 0.15
    max_iterations: int = 60
    gradient_cadence: int = 3
    n_act: int = 16
    n_grad: int = 8
    n_ppl: int = 32
    accounting: str = "prunable_only"
    grouping: str = "per_output_row"
    agent_mode: str = "heuristic"
    delta_min: float = DELTA_MIN
    delta_max: float = DELTA_MAX
    sensitivity_percentile: int = SENSITIVITY_PERCENTILE
    split_seed: int = 9
    fallback_to_heuristic: bool = False
    heuristic: HeuristicPolicy = field(default_factory=HeuristicPolicy)
    rubric: AssessmentRubric = field(default_factory=AssessmentRubric)
    endpoint: AgentEndpointConfig | None = None

    def validate(self) -> None:
        if not 0.0 < self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in (0, 1)")
        if self.rollback_threshold <= 0.0:
            raise ValueError("rollback_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.gradient_cadence < 1:
            raise ValueError("gradient_cadence must be positive")
        for name in ("n_act", "n_grad", "n_ppl"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.accounting not in ACCOUNTINGS:
            raise ValueError(f"accounting must be one of {ACCOUNTINGS}")
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}")
        if self.agent_mode not in ("heuristic", "llm"):
            raise ValueError("agent_mode must be 'heuristic' or 'llm'")
        if not DELTA_MIN <= self.delta_min <= self.delta_max <= DELTA_MAX:
            raise ValueError(
                f"delta bounds must satisfy {DELTA_MIN} <= delta_min <= delta_max <= {DELTA_MAX}"
            )
        self.heuristic.validate()
        self.rubric.validate()
        if self.agent_mode == "llm":
            if self.endpoint is None:
                raise ValueError("agent_mode 'llm' requires an endpoint config")
            self.endpoint.validate()


@dataclass
class RunState:
    iteration: int
    global_sparsity: float
    ppl_baseline: float
    ppl_current: float
    rollback_count: int
    stop_reason: str | None = None
    error: str | None = None


@dataclass
class IterationLog:
    """One loop iteration; wall time stays in memory and is not serialized
    so that fixed-seed offline runs produce byte-identical log files."""

    iteration: int
    sparsity_before: float
    sparsity_after: float
    ppl_before: float
    ppl_after: float
    decision: AgentDecision
    feedback: FeedbackRecord
    rolled_back: bool
    wall_time_s: float

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "sparsity_before": self.sparsity_before,
            "sparsity_after": self.sparsity_after,
            "ppl_before": self.ppl_before,
            "ppl_after": self.ppl_after,
            "decision": self.decision.to_json_dict(),
            "feedback": self.feedback.to_json_dict(),
            "rolled_back": self.rolled_back,
        }


def should_rollback(ppl_before: float, ppl_after: float, tau: float) -> bool:
    """True iff the relative perplexity increase exceeds tau."""
    if ppl_before <= 0.0:
        raise ValueError("ppl_before must be positive")
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    return (ppl_after - ppl_before) / ppl_before > tau


def _collect_gradient_stats(
    graph: ModelGraph, rows: np.ndarray, iteration: int
) -> GradientStats:
    per_sample = [backward_weight_grads(graph, row[None, :]) for row in rows]
    g = {
        layer.name: gradient_importance(
            [grads[layer.name] for grads in per_sample], layer.mask
        )
        for layer in graph.layers
    }
    return GradientStats(g=g, samples_used=len(per_sample), iteration_computed=iteration)


def run(
    config: RunConfig,
    graph: ModelGraph,
    corpus: Corpus,
    agent_fn=None,
    audit=None,
) -> tuple[ModelGraph, RunState, list[IterationLog]]:
    """Run the pruning loop until target, stop, failure, or max iterations.

    ``agent_fn`` overrides the configured agent (tests use scripted
    agents); it receives an AgentContext and returns an AgentDecision.
    One IterationLog row is appended for every agent query that returned
    a decision, including a final stop decision.
    """
    config.validate()
    if agent_fn is None:
        if config.agent_mode == "llm":
            endpoint = config.endpoint

            def agent_fn(ctx: AgentContext) -> AgentDecision:
                return llm_decide(ctx, endpoint, audit=audit)

        else:

            def agent_fn(ctx: AgentContext) -> AgentDecision:
                return heuristic_decide(ctx, config.heuristic)

    split = make_split(corpus, config.n_act, config.n_grad, config.n_ppl, config.split_seed)
    act_rows = corpus.tokens[split.activation_set]
    grad_rows = corpus.tokens[split.gradient_set]
    ppl_rows = [corpus.tokens[i][None, :] for i in split.ppl_set]

    ppl_baseline = perplexity(graph, ppl_rows)
    ppl_prev = ppl_baseline
    rho_prev = global_sparsity(graph, config.accounting)

    logs: list[IterationLog] = []
    feedback: FeedbackRecord | None = None
    grad_stats: GradientStats | None = None
    rollback_count = 0
    stop_reason: str | None = None
    error: str | None = None

    t = 0
    for t in range(1, config.max_iterations + 1):
        started = time.perf_counter()
        checkpoint = save_checkpoint(graph, ppl_prev, iteration=t - 1)

        capture = ForwardCapture.for_model(graph)
        forward_nll(graph, act_rows, capture)
        act_norms = ActivationNorms.from_capture(capture)
        if (t - 1) % config.gradient_cadence == 0:
            grad_stats = _collect_gradient_stats(graph, grad_rows, t)
        assert grad_stats is not None

        profiles = build_profiles(
            graph, act_norms, grad_stats, k=config.sensitivity_percentile
        )
        # Single score snapshot per iteration: profiles and pruning both
        # read these matrices.
        scores = {
            layer.name: wanda_scores(layer.weights, act_norms.norms[layer.name])
            for layer in graph.layers
        }

        context = AgentContext(
            iteration=t,
            current_sparsity=rho_prev,
            target_sparsity=config.target_sparsity,
            ppl_baseline=ppl_baseline,
            ppl_current=ppl_prev,
            profiles=profiles,
            feedback=feedback,
        )
        try:
            decision = agent_fn(context)
        except AgentFailureError as e:
            if config.fallback_to_heuristic:
                decision = heuristic_decide(context, config.heuristic)
            else:
                stop_reason = "agent_failure"
                error = str(e)
                break

        if decision.stop_pruning:
            feedback = compute_feedback(
                decision, rho_prev, rho_prev, ppl_prev, ppl_prev, False, config.rubric
            )
            logs.append(
                IterationLog(
                    iteration=t,
                    sparsity_before=rho_prev,
                    sparsity_after=rho_prev,
                    ppl_before=ppl_prev,
                    ppl_after=ppl_prev,
                    decision=decision,
                    feedback=feedback,
                    rolled_back=False,
                    wall_time_s=time.perf_counter() - started,
                )
            )
            stop_reason = "agent_stop"
            break

        for choice in decision.layer_decisions:
            delta = min(max(choice.additional_sparsity, config.delta_min), config.delta_max)
            apply_prune(
                graph,
                PruneRequest(layer=choice.layer, delta=delta, grouping=config.grouping),
                scores[choice.layer],
                config.accounting,
            )

        ppl_attempt = perplexity(graph, ppl_rows)
        rho_attempt = global_sparsity(graph, config.accounting)
        rolled_back = should_rollback(ppl_prev, ppl_attempt, config.rollback_threshold)
        if rolled_back:
            restore_checkpoint(graph, checkpoint)
            rollback_count += 1
            rho_post, ppl_post = rho_prev, checkpoint.ppl_at_checkpoint
        else:
            rho_post, ppl_post = rho_attempt, ppl_attempt

        # Feedback always describes the attempted outcome, so a rolled-back
        # agent sees the size of its mistake.
        feedback = compute_feedback(
            decision, rho_prev, rho_attempt, ppl_prev, ppl_attempt, rolled_back,
            config.rubric,
        )
        logs.append(
            IterationLog(
                iteration=t,
                sparsity_before=rho_prev,
                sparsity_after=rho_post,
                ppl_before=ppl_prev,
                ppl_after=ppl_post,
                decision=decision,
                feedback=feedback,
                rolled_back=rolled_back,
                wall_time_s=time.perf_counter() - started,
            )
        )
        rho_prev, ppl_prev = rho_post, ppl_post

        if rho_prev >= config.target_sparsity:
            stop_reason = "target_reached"
            break

    if stop_reason is None:
        stop_reason = "max_iterations"

    state = RunState(
        iteration=t,
        global_sparsity=rho_prev,
        ppl_baseline=ppl_baseline,
        ppl_current=ppl_prev,
        rollback_count=rollback_count,
        stop_reason=stop_reason,
        error=error,
    )
    return graph, state, logs
