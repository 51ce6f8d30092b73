"""Calibration corpora: byte-level text windows or a synthetic generator.

Everything here is seeded and reproducible.  Random draws use PCG64
streams with a documented draw order, and subset selection uses an
explicit partial Fisher-Yates shuffle so results do not depend on numpy
internals that might change between versions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256

# Synthetic generator constants.  Marginal token distribution is Zipf
# with this exponent; with probability REPEAT_PROB each position repeats
# the previous token (first-order Markov structure), otherwise it is an
# independent Zipf draw.  Repeats preserve the Zipf marginal.
ZIPF_EXPONENT = 1.2
REPEAT_PROB = 0.4


@dataclass
class Corpus:
    """Tokenized calibration samples, one row per sample."""

    tokens: np.ndarray  # (n_samples, seq_len) int32
    source: str  # "text_file" | "synthetic"
    seed: int

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


@dataclass
class SampleSplit:
    """Index sets for activation capture, gradient probes, and PPL eval."""

    activation_set: np.ndarray
    gradient_set: np.ndarray
    ppl_set: np.ndarray


def _check_counts(seq_len: int, n_samples: int) -> None:
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")


def load_text_corpus(path: str | Path, seq_len: int, n_samples: int, seed: int) -> Corpus:
    """Byte-tokenize a file and cut windows at seeded random offsets.

    Offsets are drawn uniformly (with replacement) over all positions
    where a full window fits, one draw per sample in order.
    """
    _check_counts(seq_len, n_samples)
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if data.size < seq_len:
        raise ValueError(
            f"file {path} has {data.size} bytes, need at least seq_len={seq_len}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = np.empty((n_samples, seq_len), dtype=np.int32)
    for i in range(n_samples):
        off = int(rng.integers(0, data.size - seq_len + 1))
        tokens[i] = data[off : off + seq_len]
    return Corpus(tokens=tokens, source="text_file", seed=seed)


def synth_corpus(
    seed: int,
    vocab: int,
    seq_len: int,
    n_samples: int,
    zipf_exponent: float = ZIPF_EXPONENT,
    repeat_prob: float = REPEAT_PROB,
) -> Corpus:
    """Zipf-weighted token stream with first-order Markov repeat mixing.

    Token id r has weight (r+1)^-zipf_exponent.  Draw order per sample:
    position 0 takes one uniform (inverse-CDF Zipf draw); every later
    position takes one uniform for the repeat test and, if not
    repeating, one more for the Zipf draw.
    """
    _check_counts(seq_len, n_samples)
    if vocab < 2:
        raise ValueError("vocab must be at least 2")
    if not 0.0 <= repeat_prob < 1.0:
        raise ValueError("repeat_prob must lie in [0, 1)")
    weights = 1.0 / np.power(np.arange(1, vocab + 1, dtype=np.float64), zipf_exponent)
    cum = np.cumsum(weights / weights.sum())
    cum[-1] = 1.0

    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = np.empty((n_samples, seq_len), dtype=np.int32)

    def zipf_draw() -> int:
        return int(np.searchsorted(cum, rng.random(), side="right"))

    for i in range(n_samples):
        tokens[i, 0] = zipf_draw()
        for j in range(1, seq_len):
            if rng.random() < repeat_prob:
                tokens[i, j] = tokens[i, j - 1]
            else:
                tokens[i, j] = zipf_draw()
    return Corpus(tokens=tokens, source="synthetic", seed=seed)


def _draw_without_replacement(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    # Partial Fisher-Yates: k swaps against a fresh index array.
    idx = np.arange(n)
    for i in range(k):
        j = i + int(rng.integers(0, n - i))
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k].copy()


def make_split(
    corpus: Corpus, n_act: int, n_grad: int, n_ppl: int, seed: int
) -> SampleSplit:
    """Draw the three sample sets, each without replacement.

    Sets are drawn independently from one seeded stream in the order
    activation, gradient, ppl; overlap between sets is allowed.
    """
    n = corpus.n_samples
    for label, k in (("n_act", n_act), ("n_grad", n_grad), ("n_ppl", n_ppl)):
        if k < 1:
            raise ValueError(f"{label} must be positive")
        if k > n:
            raise ValueError(f"{label}={k} exceeds corpus size {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    act = _draw_without_replacement(rng, n, n_act)
    grad = _draw_without_replacement(rng, n, n_grad)
    ppl = _draw_without_replacement(rng, n, n_ppl)
    return SampleSplit(activation_set=act, gradient_set=grad, ppl_set=ppl)
