"""Minimal decoder-only transformer with maskable linear layers.

Pure numpy, no autograd: the backward pass is written by hand so that
masked weights provably contribute nothing to either the forward output
or the reported gradients.  Weights are stored at 32-bit precision by
default; scalar reductions (NLL, capture sums) always accumulate in
float64.  ``precision_mode="verify64"`` switches storage and compute to
float64 for finite-difference verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RMSNORM_EPS = 1e-6

# Roles a prunable layer can play, in per-block forward order.
BLOCK_ROLES = ("q_proj", "k_proj", "v_proj", "o_proj", "mlp_up", "mlp_down")
LAYER_ROLES = BLOCK_ROLES + ("lm_head",)

PRECISION_MODES = ("standard32", "verify64")

# Initialization scheme (deterministic given rng_seed):
#   embeddings ~ N(0, EMB_INIT_STD^2); projections ~ N(0, 1/d_in);
#   norm gains start at 1.  Draw order: tok_emb, pos_emb, then per block
#   q, k, v, o, up, down, then lm_head.
EMB_INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Architecture hyperparameters; equality doubles as a checkpoint guard."""

    vocab_size: int = 256
    seq_len: int = 128
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    rng_seed: int = 7
    precision_mode: str = "standard32"

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.seq_len < 2:
            raise ValueError("seq_len must be at least 2 (need one predicted position)")
        for name in ("n_blocks", "d_model", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")
        if self.precision_mode not in PRECISION_MODES:
            raise ValueError(f"precision_mode must be one of {PRECISION_MODES}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision_mode == "verify64" else np.float32)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "n_blocks": self.n_blocks,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "rng_seed": self.rng_seed,
            "precision_mode": self.precision_mode,
        }


@dataclass
class LayerTensorState:
    """One prunable linear layer: stored weights plus a binary keep-mask.

    The effective weight is ``weights * mask``; pruning flips mask bytes
    and never touches ``weights``.
    """

    name: str
    role: str
    weights: np.ndarray  # (d_out, d_in)
    mask: np.ndarray  # uint8 0/1, same shape

    def effective(self) -> np.ndarray:
        return self.weights * self.mask

    @property
    def size(self) -> int:
        return self.weights.size

    def active_count(self) -> int:
        return int(self.mask.sum())

    def sparsity(self) -> float:
        return 1.0 - self.active_count() / self.size


@dataclass
class ModelGraph:
    """Prunable layers in forward order plus non-prunable dense arrays."""

    config: ModelConfig
    layers: list[LayerTensorState]
    extras: dict[str, np.ndarray]
    _by_name: dict[str, LayerTensorState] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._by_name = {layer.name: layer for layer in self.layers}

    @property
    def dtype(self) -> np.dtype:
        return self.config.dtype

    def layer(self, name: str) -> LayerTensorState:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValueError(f"unknown layer {name!r}") from None

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]


@dataclass
class ForwardCapture:
    """Per-layer sum-of-squares over input rows, for activation norms.

    ``row_count`` counts token positions seen: every position of every
    sample flows through every prunable layer exactly once.
    """

    sums: dict[str, np.ndarray]
    row_count: int = 0

    @classmethod
    def for_model(cls, graph: ModelGraph) -> "ForwardCapture":
        return cls(
            sums={
                layer.name: np.zeros(layer.weights.shape[1], dtype=np.float64)
                for layer in graph.layers
            }
        )

    def add(self, name: str, rows: np.ndarray) -> None:
        x = rows.reshape(-1, rows.shape[-1]).astype(np.float64)
        self.sums[name] += np.square(x).sum(axis=0)


def build_model(config: ModelConfig) -> ModelGraph:
    """Deterministically initialize a graph; same config -> identical bits."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    dt = config.dtype
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def gaussian(shape: tuple[int, ...], std: float) -> np.ndarray:
        return (rng.standard_normal(shape) * std).astype(dt)

    extras: dict[str, np.ndarray] = {}
    extras["tok_emb"] = gaussian((v, d), EMB_INIT_STD)
    extras["pos_emb"] = gaussian((config.seq_len, d), EMB_INIT_STD)

    layers: list[LayerTensorState] = []

    def add_layer(name: str, role: str, d_out: int, d_in: int) -> None:
        w = gaussian((d_out, d_in), 1.0 / math.sqrt(d_in))
        layers.append(
            LayerTensorState(
                name=name, role=role, weights=w, mask=np.ones((d_out, d_in), np.uint8)
            )
        )

    for b in range(config.n_blocks):
        extras[f"block{b}.attn_norm"] = np.ones(d, dtype=dt)
        extras[f"block{b}.mlp_norm"] = np.ones(d, dtype=dt)
        add_layer(f"block{b}.q_proj", "q_proj", d, d)
        add_layer(f"block{b}.k_proj", "k_proj", d, d)
        add_layer(f"block{b}.v_proj", "v_proj", d, d)
        add_layer(f"block{b}.o_proj", "o_proj", d, d)
        add_layer(f"block{b}.mlp_up", "mlp_up", f, d)
        add_layer(f"block{b}.mlp_down", "mlp_down", d, f)
    extras["final_norm"] = np.ones(d, dtype=dt)
    add_layer("lm_head", "lm_head", v, d)

    return ModelGraph(config=config, layers=layers, extras=extras)


# ---------------------------------------------------------------------------
# forward / backward primitives
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign to avoid exp overflow at either tail.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """y = gain * x / sqrt(mean(x^2) + eps); returns (y, 1/rms per row)."""
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float64)
    r = (1.0 / np.sqrt(ms + RMSNORM_EPS)).astype(x.dtype)
    return x * r * gain, r


def _rmsnorm_bwd(
    dy: np.ndarray, x: np.ndarray, r: np.ndarray, gain: np.ndarray
) -> np.ndarray:
    # dx_j = g_j dy_j r - x_j r^3 / n * sum_i(g_i dy_i x_i)
    n = x.shape[-1]
    t = np.sum(gain * dy * x, axis=-1, keepdims=True)
    return gain * dy * r - x * (r**3) * t / n


def _validate_batch(config: ModelConfig, batch: np.ndarray) -> np.ndarray:
    tokens = np.asarray(batch)
    if tokens.ndim != 2:
        raise ValueError(f"batch must be 2-D (samples, positions), got ndim={tokens.ndim}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("batch must contain integer token ids")
    if tokens.shape[1] < 2:
        raise ValueError("batch width must be at least 2 tokens")
    if tokens.shape[1] > config.seq_len:
        raise ValueError(
            f"batch width {tokens.shape[1]} exceeds seq_len {config.seq_len}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(
            f"token ids must lie in [0, {config.vocab_size}); "
            f"got range [{tokens.min()}, {tokens.max()}]"
        )
    return tokens


def _forward(
    graph: ModelGraph,
    batch: np.ndarray,
    capture: ForwardCapture | None,
    want_cache: bool,
) -> tuple[float, dict | None]:
    cfg = graph.config
    tokens = _validate_batch(cfg, batch)
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.head_dim
    dt = graph.dtype

    x = graph.extras["tok_emb"][tokens] + graph.extras["pos_emb"][:T]
    scale = dt.type(1.0 / math.sqrt(dh))
    causal = np.triu(np.full((T, T), -np.inf, dtype=dt), k=1)

    block_caches: list[dict] = []
    for b in range(cfg.n_blocks):
        pre = f"block{b}."
        g_attn = graph.extras[pre + "attn_norm"]
        g_mlp = graph.extras[pre + "mlp_norm"]
        wq = graph.layer(pre + "q_proj")
        wk = graph.layer(pre + "k_proj")
        wv = graph.layer(pre + "v_proj")
        wo = graph.layer(pre + "o_proj")
        wu = graph.layer(pre + "mlp_up")
        wd = graph.layer(pre + "mlp_down")

        h1, r1 = _rmsnorm(x, g_attn)
        if capture is not None:
            capture.add(wq.name, h1)
            capture.add(wk.name, h1)
            capture.add(wv.name, h1)
        qh = (h1 @ wq.effective().T).reshape(B, T, H, dh)
        kh = (h1 @ wk.effective().T).reshape(B, T, H, dh)
        vh = (h1 @ wv.effective().T).reshape(B, T, H, dh)

        scores = np.einsum("bihd,bjhd->bhij", qh, kh) * scale
        scores = scores + causal
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        attn = e / e.sum(axis=-1, keepdims=True)

        c = np.einsum("bhij,bjhd->bihd", attn, vh).reshape(B, T, cfg.d_model)
        if capture is not None:
            capture.add(wo.name, c)
        x_mid = x + c @ wo.effective().T

        h2, r2 = _rmsnorm(x_mid, g_mlp)
        if capture is not None:
            capture.add(wu.name, h2)
        u = h2 @ wu.effective().T
        a = _silu(u)
        if capture is not None:
            capture.add(wd.name, a)
        x_out = x_mid + a @ wd.effective().T

        if want_cache:
            block_caches.append(
                dict(x_in=x, h1=h1, r1=r1, qh=qh, kh=kh, vh=vh, attn=attn, c=c,
                     x_mid=x_mid, h2=h2, r2=r2, u=u)
            )
        x = x_out

    wl = graph.layer("lm_head")
    hf, rf = _rmsnorm(x, graph.extras["final_norm"])
    if capture is not None:
        capture.add(wl.name, hf)
        capture.row_count += B * T
    logits = hf @ wl.effective().T

    # NLL tail in float64: stable log-sum-exp, mean over predicted positions.
    l64 = logits.astype(np.float64)
    mx = l64.max(axis=-1, keepdims=True)
    lse = (mx[..., 0] + np.log(np.exp(l64 - mx).sum(axis=-1)))
    targets = tokens[:, 1:]
    tgt = np.take_along_axis(l64[:, : T - 1, :], targets[..., None], axis=-1)[..., 0]
    nll = float((lse[:, : T - 1] - tgt).mean())

    cache = None
    if want_cache:
        cache = dict(tokens=tokens, blocks=block_caches, x_final=x, hf=hf, rf=rf,
                     l64=l64, lse=lse)
    return nll, cache


def forward_nll(
    graph: ModelGraph, batch: np.ndarray, capture: ForwardCapture | None = None
) -> float:
    """Causal next-token cross-entropy, averaged over predicted positions.

    When ``capture`` is given, every prunable layer's input rows are
    squared-and-summed into its accumulator as a side effect.
    """
    nll, _ = _forward(graph, batch, capture, want_cache=False)
    return nll


def backward_weight_grads(graph: ModelGraph, batch: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean NLL w.r.t. every prunable layer's weights.

    Accumulates in float64 regardless of storage precision.  Entries at
    masked positions are exactly zero: the chain rule through
    ``W * mask`` multiplies each raw gradient by the mask.
    """
    cfg = graph.config
    _, cache = _forward(graph, batch, capture=None, want_cache=True)
    assert cache is not None
    tokens = cache["tokens"]
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.head_dim
    P = B * (T - 1)
    scale = 1.0 / math.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    def eff64(layer: LayerTensorState) -> np.ndarray:
        return layer.effective().astype(np.float64)

    def m64(layer: LayerTensorState) -> np.ndarray:
        return layer.mask.astype(np.float64)

    # softmax cross-entropy: dlogits = (probs - onehot)/P on predicted rows
    probs = np.exp(cache["l64"] - cache["lse"][..., None])
    dlogits = np.zeros_like(probs)
    head = probs[:, : T - 1, :] / P
    idx = tokens[:, 1:][..., None]
    np.put_along_axis(head, idx, np.take_along_axis(head, idx, axis=-1) - 1.0 / P, axis=-1)
    dlogits[:, : T - 1, :] = head

    wl = graph.layer("lm_head")
    hf64 = cache["hf"].astype(np.float64)
    grads[wl.name] = np.einsum("btv,btd->vd", dlogits, hf64) * m64(wl)
    dhf = dlogits @ eff64(wl)
    dx = _rmsnorm_bwd(
        dhf,
        cache["x_final"].astype(np.float64),
        cache["rf"].astype(np.float64),
        graph.extras["final_norm"].astype(np.float64),
    )

    for b in reversed(range(cfg.n_blocks)):
        pre = f"block{b}."
        bc = cache["blocks"][b]
        wq = graph.layer(pre + "q_proj")
        wk = graph.layer(pre + "k_proj")
        wv = graph.layer(pre + "v_proj")
        wo = graph.layer(pre + "o_proj")
        wu = graph.layer(pre + "mlp_up")
        wd = graph.layer(pre + "mlp_down")

        # MLP branch
        a64 = _silu(bc["u"].astype(np.float64))
        h2_64 = bc["h2"].astype(np.float64)
        grads[wd.name] = np.einsum("btd,btf->df", dx, a64) * m64(wd)
        da = dx @ eff64(wd)
        du = da * _silu_grad(bc["u"].astype(np.float64))
        grads[wu.name] = np.einsum("btf,btd->fd", du, h2_64) * m64(wu)
        dh2 = du @ eff64(wu)
        dxm = dx + _rmsnorm_bwd(
            dh2,
            bc["x_mid"].astype(np.float64),
            bc["r2"].astype(np.float64),
            graph.extras[pre + "mlp_norm"].astype(np.float64),
        )

        # attention branch
        c64 = bc["c"].astype(np.float64)
        grads[wo.name] = np.einsum("btd,bte->de", dxm, c64) * m64(wo)
        dc = (dxm @ eff64(wo)).reshape(B, T, H, dh)
        attn64 = bc["attn"].astype(np.float64)
        vh64 = bc["vh"].astype(np.float64)
        dA = np.einsum("bihd,bjhd->bhij", dc, vh64)
        dvh = np.einsum("bhij,bihd->bjhd", attn64, dc)
        dS = attn64 * (dA - np.sum(dA * attn64, axis=-1, keepdims=True))
        dqh = np.einsum("bhij,bjhd->bihd", dS, bc["kh"].astype(np.float64)) * scale
        dkh = np.einsum("bhij,bihd->bjhd", dS, bc["qh"].astype(np.float64)) * scale

        h1_64 = bc["h1"].astype(np.float64)
        dq = dqh.reshape(B, T, cfg.d_model)
        dk = dkh.reshape(B, T, cfg.d_model)
        dv = dvh.reshape(B, T, cfg.d_model)
        grads[wq.name] = np.einsum("btd,bte->de", dq, h1_64) * m64(wq)
        grads[wk.name] = np.einsum("btd,bte->de", dk, h1_64) * m64(wk)
        grads[wv.name] = np.einsum("btd,bte->de", dv, h1_64) * m64(wv)
        dh1 = dq @ eff64(wq) + dk @ eff64(wk) + dv @ eff64(wv)
        dx = dxm + _rmsnorm_bwd(
            dh1,
            bc["x_in"].astype(np.float64),
            bc["r1"].astype(np.float64),
            graph.extras[pre + "attn_norm"].astype(np.float64),
        )

    return grads


def perplexity(graph: ModelGraph, samples) -> float:
    """exp of the token-weighted mean NLL over the given samples.

    Each sample is evaluated with its own forward pass (1-D sequences are
    treated as single-row batches), so a manual per-sample recomputation
    reproduces the same floats.
    """
    mats = [np.atleast_2d(np.asarray(s)) for s in samples]
    if not mats:
        raise ValueError("perplexity needs at least one sample")
    total = 0.0
    weight = 0
    for mat in mats:
        w = mat.shape[0] * (mat.shape[1] - 1)
        total += forward_nll(graph, mat) * w
        weight += w
    return float(np.exp(total / weight))
