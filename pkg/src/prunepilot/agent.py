"""Decision agents: a remote JSON-over-HTTP agent and an offline heuristic.

Both consume the same AgentContext and produce the same AgentDecision.
The HTTP gateway is a generic chat-style contract: it POSTs one JSON
body {model, temperature, system, user, response_schema} and expects
the decision JSON back (either raw, or wrapped as {"content": "..."}).
Invalid responses are retried with the validation error appended to the
user prompt.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

import requests

from .profiler import LayerProfile
from .pruner import DELTA_MAX, DELTA_MIN
from .reflection import FeedbackRecord

DEFAULT_TEMPERATURE = 0.5
DEFAULT_TIMEOUT_S = 30.0
DEFAULT_MAX_RETRIES = 2
DEFAULT_API_KEY_ENV = "PRUNEPILOT_API_KEY"

PROMPT_VERSION = 1

_SYSTEM_PROMPT = f"""\
You are an iterative pruning controller for a transformer language model.
Each round you receive per-layer statistics and must choose which layers to
prune further and by how much, balancing a global sparsity target against
perplexity degradation.

Guidance:
- Layers with low sensitivity z-score (z_sens) hold the cheapest weights;
  prefer them, especially below -1.0.
- Avoid layers with clearly positive gradient z-score (z_grad); their
  weights are load-bearing for the loss.
- additional_sparsity is per layer and must lie in [{DELTA_MIN}, {DELTA_MAX}].
- Study the feedback on your previous decision and refine your strategy:
  after a rollback or a Poor assessment be markedly more conservative;
  when perplexity is stable you can push harder.
- Set stop_pruning=true only when the sparsity target has been reached.

Respond with a single JSON object matching the provided schema. No prose
outside the JSON.
"""

_RETRY_SUFFIX = (
    "\n\nYour previous response was rejected: {error}\n"
    "Respond again with ONLY a JSON object matching the schema."
)


class AgentError(Exception):
    """Base class for agent-side failures."""


class DecisionValidationError(AgentError):
    """The agent's response text could not be turned into a decision."""


class MalformedDecisionError(DecisionValidationError):
    pass


class SchemaDecisionError(DecisionValidationError):
    pass


class UnknownLayerError(DecisionValidationError):
    pass


class EmptyDecisionError(DecisionValidationError):
    pass


class AgentFailureError(AgentError):
    """All attempts exhausted; carries the attempt count and last error."""

    def __init__(self, attempts: int, last_error: str):
        super().__init__(f"agent failed after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


@dataclass
class LayerChoice:
    layer: str
    additional_sparsity: float

    def to_json_dict(self) -> dict:
        return {"layer": self.layer, "additional_sparsity": self.additional_sparsity}


@dataclass
class AgentDecision:
    reasoning: str
    stop_pruning: bool
    layer_decisions: list[LayerChoice]

    def to_json_dict(self) -> dict:
        return {
            "reasoning": self.reasoning,
            "stop_pruning": self.stop_pruning,
            "layer_decisions": [c.to_json_dict() for c in self.layer_decisions],
        }


@dataclass
class AgentContext:
    """Everything the agent sees for one iteration."""

    iteration: int
    current_sparsity: float
    target_sparsity: float
    ppl_baseline: float
    ppl_current: float
    profiles: list[LayerProfile]
    feedback: FeedbackRecord | None = None

    def layer_names(self) -> set[str]:
        return {p.name for p in self.profiles}


@dataclass
class AgentEndpointConfig:
    url: str
    model: str = "pruning-agent"
    temperature: float = DEFAULT_TEMPERATURE
    timeout_s: float = DEFAULT_TIMEOUT_S
    max_retries: int = DEFAULT_MAX_RETRIES
    api_key_env: str = DEFAULT_API_KEY_ENV

    def validate(self) -> None:
        if not self.url:
            raise ValueError("endpoint url must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


@dataclass
class HeuristicPolicy:
    """Knobs for the offline decision rule."""

    max_layers: int = 5
    grad_z_max: float = 0.5
    layer_sparsity_max: float = 0.9
    gap_fraction: float = 0.5

    def validate(self) -> None:
        if self.max_layers < 1:
            raise ValueError("max_layers must be positive")
        if not 0.0 < self.gap_fraction <= 1.0:
            raise ValueError("gap_fraction must lie in (0, 1]")


DEFAULT_POLICY = HeuristicPolicy()


@dataclass
class Prompt:
    system: str
    user: str


_DECISION_SCHEMA = {
    "type": "object",
    "properties": {
        "reasoning": {"type": "string"},
        "stop_pruning": {"type": "boolean"},
        "layer_decisions": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "layer": {"type": "string"},
                    "additional_sparsity": {
                        "type": "number",
                        "minimum": DELTA_MIN,
                        "maximum": DELTA_MAX,
                    },
                },
                "required": ["layer", "additional_sparsity"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["reasoning", "stop_pruning", "layer_decisions"],
    "additionalProperties": False,
}


def decision_schema() -> dict:
    """JSON schema advertised to the agent (fresh copy each call)."""
    return copy.deepcopy(_DECISION_SCHEMA)


def render_prompt(context: AgentContext) -> Prompt:
    """Deterministic prompt document for one iteration.

    Profiles render in their given order (ascending z_sens) with fixed
    numeric formats; the feedback block appears only when feedback
    exists.
    """
    lines = [
        f"Iteration: {context.iteration}",
        f"Global sparsity: {context.current_sparsity:.4f} (target {context.target_sparsity:.4f})",
        f"Perplexity: baseline {context.ppl_baseline:.4f}, current {context.ppl_current:.4f} "
        f"({(context.ppl_current - context.ppl_baseline) / context.ppl_baseline * 100.0:+.2f}% vs baseline)",
        "",
        "Layer profiles (sorted by z_sens ascending; lower = more prunable):",
        "layer | z_sens | z_grad | sparsity",
    ]
    for p in context.profiles:
        lines.append(
            f"{p.name} | {p.z_sens:+.3f} | {p.z_grad:+.3f} | {p.sparsity:.4f}"
        )

    fb = context.feedback
    if fb is not None:
        lines.append("")
        lines.append("Feedback on your previous decision:")
        prev = fb.prev_decision
        if prev is not None:
            sel = ", ".join(
                f"{c.layer}:{c.additional_sparsity:.4f}" for c in prev.layer_decisions
            )
            lines.append(f"- your reasoning was: {prev.reasoning}")
            lines.append(f"- you pruned: {sel if sel else '(nothing)'}")
        lines.append(f"- sparsity gain: {fb.sparsity_gain:+.4f}")
        lines.append(f"- perplexity change: {fb.ppl_change_pct:+.2f}%")
        lines.append(f"- assessment: {fb.assessment_message}")
        if fb.rolled_back:
            lines.append(
                "- the decision exceeded the rollback threshold and was ROLLED BACK;"
                " the model was restored to its previous state"
            )

    lines.append("")
    lines.append("Decide the next pruning step. Respond with JSON only.")
    return Prompt(system=_SYSTEM_PROMPT, user="\n".join(lines))


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def validate_decision(raw_text: str, context: AgentContext) -> AgentDecision:
    """Parse and normalize an agent response.

    Checks structure and layer names strictly, clamps each
    additional_sparsity into [DELTA_MIN, DELTA_MAX], and drops duplicate
    layer entries keeping the first.  A non-stop decision with no layer
    entries is an error.
    """
    try:
        payload = json.loads(raw_text)
    except json.JSONDecodeError as e:
        raise MalformedDecisionError(f"response is not valid JSON: {e}") from None
    if not isinstance(payload, dict):
        raise SchemaDecisionError("response JSON must be an object")

    for key in ("reasoning", "stop_pruning", "layer_decisions"):
        if key not in payload:
            raise SchemaDecisionError(f"missing required field {key!r}")
    if not isinstance(payload["reasoning"], str):
        raise SchemaDecisionError("'reasoning' must be a string")
    if not isinstance(payload["stop_pruning"], bool):
        raise SchemaDecisionError("'stop_pruning' must be a boolean")
    if not isinstance(payload["layer_decisions"], list):
        raise SchemaDecisionError("'layer_decisions' must be an array")

    known = context.layer_names()
    seen: set[str] = set()
    choices: list[LayerChoice] = []
    for i, entry in enumerate(payload["layer_decisions"]):
        if not isinstance(entry, dict):
            raise SchemaDecisionError(f"layer_decisions[{i}] must be an object")
        if "layer" not in entry or "additional_sparsity" not in entry:
            raise SchemaDecisionError(
                f"layer_decisions[{i}] needs 'layer' and 'additional_sparsity'"
            )
        name = entry["layer"]
        delta = entry["additional_sparsity"]
        if not isinstance(name, str):
            raise SchemaDecisionError(f"layer_decisions[{i}].layer must be a string")
        if isinstance(delta, bool) or not isinstance(delta, (int, float)):
            raise SchemaDecisionError(
                f"layer_decisions[{i}].additional_sparsity must be a number"
            )
        delta = float(delta)
        if delta != delta:  # NaN
            raise SchemaDecisionError(
                f"layer_decisions[{i}].additional_sparsity is not a finite number"
            )
        if name not in known:
            raise UnknownLayerError(f"unknown layer {name!r}")
        if name in seen:
            continue  # duplicate: keep the first entry
        seen.add(name)
        choices.append(LayerChoice(layer=name, additional_sparsity=_clamp(delta, DELTA_MIN, DELTA_MAX)))

    stop = payload["stop_pruning"]
    if not stop and not choices:
        raise EmptyDecisionError("non-stop decision contains no layer entries")
    return AgentDecision(
        reasoning=payload["reasoning"], stop_pruning=stop, layer_decisions=choices
    )


def _request_body(prompt: Prompt, endpoint: AgentEndpointConfig) -> bytes:
    body = {
        "model": endpoint.model,
        "temperature": endpoint.temperature,
        "system": prompt.system,
        "user": prompt.user,
        "response_schema": decision_schema(),
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _extract_text(response: requests.Response) -> str:
    # Accept either {"content": "<decision json>"} or the decision JSON itself.
    try:
        payload = response.json()
    except ValueError:
        return response.text
    if isinstance(payload, dict) and isinstance(payload.get("content"), str):
        return payload["content"]
    return response.text


def llm_decide(
    context: AgentContext,
    endpoint: AgentEndpointConfig,
    audit=None,
) -> AgentDecision:
    """Query the remote agent, retrying on transport and validation errors.

    Total attempts = max_retries + 1.  Validation failures append the
    error text to the user prompt for the next attempt.  ``audit``, when
    given, receives one dict per attempt (request body and outcome).
    """
    endpoint.validate()
    prompt = render_prompt(context)
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(endpoint.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    user = prompt.user
    last_error = "no attempts made"
    attempts = endpoint.max_retries + 1
    for attempt in range(attempts):
        body = _request_body(Prompt(prompt.system, user), endpoint)
        record = {"iteration": context.iteration, "attempt": attempt,
                  "request": body.decode("utf-8")}
        try:
            resp = requests.post(
                endpoint.url, data=body, headers=headers, timeout=endpoint.timeout_s
            )
        except requests.RequestException as e:
            last_error = f"transport error: {e}"
            record.update(status=None, error=last_error)
            if audit is not None:
                audit(record)
            continue
        record["status"] = resp.status_code
        if not 200 <= resp.status_code < 300:
            last_error = f"HTTP {resp.status_code}"
            record["error"] = last_error
            if audit is not None:
                audit(record)
            continue
        text = _extract_text(resp)
        record["response"] = text
        try:
            decision = validate_decision(text, context)
        except DecisionValidationError as e:
            last_error = str(e)
            record["error"] = last_error
            if audit is not None:
                audit(record)
            user = prompt.user + _RETRY_SUFFIX.format(error=last_error)
            continue
        if audit is not None:
            audit(record)
        return decision
    raise AgentFailureError(attempts=attempts, last_error=last_error)


def heuristic_decide(
    context: AgentContext, policy: HeuristicPolicy = DEFAULT_POLICY
) -> AgentDecision:
    """Deterministic offline policy mirroring the prompt guidance.

    Stops at target; otherwise prunes up to max_layers of the lowest
    z_sens layers among those with z_grad <= grad_z_max and layer
    sparsity < layer_sparsity_max (falling back to lowest z_sens
    overall), with delta = clamp(gap_fraction * remaining_gap,
    DELTA_MIN, DELTA_MAX), halved after Poor feedback.
    """
    policy.validate()
    if context.current_sparsity >= context.target_sparsity:
        return AgentDecision(
            reasoning=(
                f"global sparsity {context.current_sparsity:.4f} has reached the "
                f"target {context.target_sparsity:.4f}; stopping"
            ),
            stop_pruning=True,
            layer_decisions=[],
        )

    eligible = [
        p
        for p in context.profiles
        if p.z_grad <= policy.grad_z_max and p.sparsity < policy.layer_sparsity_max
    ]
    pool = eligible if eligible else list(context.profiles)
    fallback = "" if eligible else " (no layer passed the filters; using lowest z_sens overall)"
    # profiles arrive sorted by (z_sens, name); keep that order.
    chosen = pool[: policy.max_layers]

    gap = context.target_sparsity - context.current_sparsity
    delta = _clamp(policy.gap_fraction * gap, DELTA_MIN, DELTA_MAX)
    halved = ""
    if context.feedback is not None and context.feedback.assessment == "Poor":
        delta = max(DELTA_MIN, delta / 2.0)
        halved = "; halved after Poor feedback"

    names = ", ".join(p.name for p in chosen)
    return AgentDecision(
        reasoning=(
            f"gap to target is {gap:.4f}; pruning {len(chosen)} lowest-sensitivity "
            f"layers ({names}) by {delta:.4f} each{fallback}{halved}"
        ),
        stop_pruning=False,
        layer_decisions=[
            LayerChoice(layer=p.name, additional_sparsity=delta) for p in chosen
        ],
    )
