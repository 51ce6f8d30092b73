"""Shared fixtures: tiny graphs, corpora, and a deliberately skilled model."""

from __future__ import annotations

import numpy as np
import pytest

from prunepilot.agent import AgentDecision, LayerChoice
from prunepilot.data import synth_corpus
from prunepilot.model import ModelConfig, build_model


TINY = dict(vocab_size=32, seq_len=16, n_blocks=1, d_model=16, n_heads=4, d_ff=32, rng_seed=3)
DESK = dict(vocab_size=256, seq_len=128, n_blocks=2, d_model=64, n_heads=4, d_ff=256, rng_seed=7)


@pytest.fixture
def tiny_graph():
    return build_model(ModelConfig(**TINY))


@pytest.fixture
def tiny_graph64():
    return build_model(ModelConfig(**TINY, precision_mode="verify64"))


@pytest.fixture
def tiny_batch():
    corpus = synth_corpus(5, TINY["vocab_size"], TINY["seq_len"], 4)
    return corpus.tokens


@pytest.fixture(scope="session")
def desk_corpus():
    return synth_corpus(7, DESK["vocab_size"], DESK["seq_len"], 128)


@pytest.fixture
def desk_graph():
    return build_model(ModelConfig(**DESK))


SKILLED = dict(vocab_size=64, seq_len=64, n_blocks=1, d_model=32, n_heads=4, d_ff=64, rng_seed=11)


def build_skilled_graph():
    """A model with genuine predictive skill, built by construction.

    Token embedding rows are unit vectors; the output head is a scaled
    copy of them plus small noise, so the model scores the current token
    highest for the next position.  Paired with a high-repeat corpus it
    sits far below the uniform-distribution perplexity, which gives
    pruning something real to destroy.
    """
    graph = build_model(ModelConfig(**SKILLED))
    rng = np.random.Generator(np.random.PCG64(123))
    d = SKILLED["d_model"]
    emb = rng.standard_normal((SKILLED["vocab_size"], d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    graph.extras["tok_emb"][...] = (emb * 2.0).astype(np.float32)
    graph.extras["pos_emb"][...] = (
        rng.standard_normal(graph.extras["pos_emb"].shape) * 0.01
    ).astype(np.float32)
    head = graph.layer("lm_head")
    head.weights[...] = (emb * 3.0 + rng.standard_normal(emb.shape) * 0.05).astype(
        np.float32
    )
    return graph


@pytest.fixture
def skilled_graph():
    return build_skilled_graph()


@pytest.fixture(scope="session")
def skilled_corpus():
    return synth_corpus(21, SKILLED["vocab_size"], SKILLED["seq_len"], 64, repeat_prob=0.85)


def brutal_agent(ctx):
    """Scripted agent: maximum delta on every layer, never stops."""
    return AgentDecision(
        reasoning="maximum pressure on every layer",
        stop_pruning=False,
        layer_decisions=[LayerChoice(p.name, 0.15) for p in ctx.profiles],
    )
