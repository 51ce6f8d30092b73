"""YAML config file loading with strict key checking.

The file has four optional sections (model, corpus, run, agent); every
key has a default, and unknown keys are rejected so typos fail loudly
instead of silently running with defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .agent import (
    DEFAULT_API_KEY_ENV,
    DEFAULT_MAX_RETRIES,
    DEFAULT_TEMPERATURE,
    DEFAULT_TIMEOUT_S,
    AgentEndpointConfig,
    HeuristicPolicy,
)
from .model import ModelConfig
from .orchestrator import RunConfig
from .reflection import AssessmentRubric


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    source: str = "synthetic"  # "synthetic" | "text_file"
    path: str | None = None
    n_samples: int = 128
    seed: int = 8

    def validate(self) -> None:
        if self.source not in ("synthetic", "text_file"):
            raise ConfigError("corpus.source must be 'synthetic' or 'text_file'")
        if self.source == "text_file" and not self.path:
            raise ConfigError("corpus.source 'text_file' requires corpus.path")
        if self.n_samples < 1:
            raise ConfigError("corpus.n_samples must be positive")


@dataclass
class FileConfig:
    model: ModelConfig
    corpus: CorpusConfig
    run: RunConfig


_MODEL_KEYS = {
    "vocab_size", "seq_len", "n_blocks", "d_model", "n_heads", "d_ff",
    "rng_seed", "precision_mode",
}
_CORPUS_KEYS = {"source", "path", "n_samples", "seed"}
_RUN_KEYS = {
    "target_sparsity", "rollback_threshold", "max_iterations", "gradient_cadence",
    "n_act", "n_grad", "n_ppl", "accounting", "grouping", "agent_mode",
    "delta_min", "delta_max", "sensitivity_percentile", "split_seed",
    "fallback_to_heuristic",
}
_AGENT_KEYS = {"url", "model", "temperature", "timeout_s", "max_retries", "api_key_env"}
_HEURISTIC_KEYS = {"max_layers", "grad_z_max", "layer_sparsity_max", "gap_fraction"}
_RUBRIC_KEYS = {
    "excellent_min_sparsity_gain", "excellent_max_ppl_pct",
    "good_max_ppl_pct", "marginal_max_ppl_pct",
}
_TOP_KEYS = {"model", "corpus", "run", "agent", "heuristic", "rubric"}


def _check_keys(section: str, mapping: dict, allowed: set[str]) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}' section: {unknown}")


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {}) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' section must be a mapping")
    return value


def load_config(path: str | Path | None) -> FileConfig:
    """Parse the YAML file (or defaults when path is None)."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {p} is not valid YAML: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a top-level mapping")
        doc = loaded

    _check_keys("top level", doc, _TOP_KEYS)
    model_sec = _section(doc, "model")
    corpus_sec = _section(doc, "corpus")
    run_sec = _section(doc, "run")
    agent_sec = _section(doc, "agent")
    heuristic_sec = _section(doc, "heuristic")
    rubric_sec = _section(doc, "rubric")
    _check_keys("model", model_sec, _MODEL_KEYS)
    _check_keys("corpus", corpus_sec, _CORPUS_KEYS)
    _check_keys("run", run_sec, _RUN_KEYS)
    _check_keys("agent", agent_sec, _AGENT_KEYS)
    _check_keys("heuristic", heuristic_sec, _HEURISTIC_KEYS)
    _check_keys("rubric", rubric_sec, _RUBRIC_KEYS)

    try:
        model = ModelConfig(**model_sec)
        corpus = CorpusConfig(**corpus_sec)
        endpoint = None
        if agent_sec.get("url"):
            endpoint = AgentEndpointConfig(
                url=agent_sec["url"],
                model=agent_sec.get("model", "pruning-agent"),
                temperature=agent_sec.get("temperature", DEFAULT_TEMPERATURE),
                timeout_s=agent_sec.get("timeout_s", DEFAULT_TIMEOUT_S),
                max_retries=agent_sec.get("max_retries", DEFAULT_MAX_RETRIES),
                api_key_env=agent_sec.get("api_key_env", DEFAULT_API_KEY_ENV),
            )
        run = RunConfig(
            **run_sec,
            heuristic=HeuristicPolicy(**heuristic_sec),
            rubric=AssessmentRubric(**rubric_sec),
            endpoint=endpoint,
        )
        model.validate()
        corpus.validate()
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    return FileConfig(model=model, corpus=corpus, run=run)
