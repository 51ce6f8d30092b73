"""Self-reflection feedback: grade the previous pruning decision so the
agent can see the consequences of its own choices.

A rolled-back decision is always graded Poor.  Otherwise the tier
depends on the relative perplexity change and, for the top tier, on a
minimum sparsity gain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

EXCELLENT = "Excellent"
GOOD = "Good"
MARGINAL = "Marginal"
POOR = "Poor"

ASSESSMENT_MESSAGES = {
    EXCELLENT: "Excellent - High sparsity gain with minimal PPL impact",
    GOOD: "Good - Moderate progress with acceptable perplexity cost",
    MARGINAL: "Marginal - Small gains with noticeable perplexity degradation",
    POOR: "Poor - Excessive PPL degradation, consider more conservative approach",
}


@dataclass
class AssessmentRubric:
    """Tier thresholds; ppl limits are percent changes, exclusive upper bounds."""

    excellent_min_sparsity_gain: float = 0.01
    excellent_max_ppl_pct: float = 2.0
    good_max_ppl_pct: float = 5.0
    marginal_max_ppl_pct: float = 10.0

    def validate(self) -> None:
        if not (
            self.excellent_max_ppl_pct
            <= self.good_max_ppl_pct
            <= self.marginal_max_ppl_pct
        ):
            raise ValueError("rubric ppl thresholds must be non-decreasing")


DEFAULT_RUBRIC = AssessmentRubric()


@dataclass
class FeedbackRecord:
    """Outcome of one decision, phrased for the next prompt.

    For a rolled-back iteration the deltas describe the attempted
    (discarded) state, so the agent sees the size of its mistake even
    though the run itself kept the restored values.
    """

    prev_decision: Any  # AgentDecision; typed loosely to avoid an import cycle
    sparsity_gain: float
    ppl_change_pct: float
    assessment: str
    assessment_message: str
    rolled_back: bool

    def to_json_dict(self) -> dict:
        return {
            "sparsity_gain": self.sparsity_gain,
            "ppl_change_pct": self.ppl_change_pct,
            "assessment": self.assessment,
            "assessment_message": self.assessment_message,
            "rolled_back": self.rolled_back,
        }


def compute_feedback(
    decision: Any,
    sparsity_before: float,
    sparsity_after: float,
    ppl_before: float,
    ppl_after: float,
    rolled_back: bool,
    rubric: AssessmentRubric = DEFAULT_RUBRIC,
) -> FeedbackRecord:
    if ppl_before <= 0:
        raise ValueError("ppl_before must be positive")
    rubric.validate()
    gain = sparsity_after - sparsity_before
    ppl_pct = (ppl_after - ppl_before) / ppl_before * 100.0

    if rolled_back:
        tier = POOR
    elif gain >= rubric.excellent_min_sparsity_gain and ppl_pct < rubric.excellent_max_ppl_pct:
        tier = EXCELLENT
    elif ppl_pct < rubric.good_max_ppl_pct:
        tier = GOOD
    elif ppl_pct < rubric.marginal_max_ppl_pct:
        tier = MARGINAL
    else:
        tier = POOR

    return FeedbackRecord(
        prev_decision=decision,
        sparsity_gain=gain,
        ppl_change_pct=ppl_pct,
        assessment=tier,
        assessment_message=ASSESSMENT_MESSAGES[tier],
        rolled_back=rolled_back,
    )
