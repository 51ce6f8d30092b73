"""Layer statistics: activation-weighted scores, sensitivity, gradient
importance, and cross-layer z-score normalization.

Sensitivity of a layer is a low percentile of its activation-weighted
weight magnitudes: a layer whose smallest surviving scores are still
large has no cheap weights left to remove.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardCapture, ModelGraph

ZSCORE_EPS = 1e-9
SENSITIVITY_PERCENTILE = 10


@dataclass
class ActivationNorms:
    """Per-layer l2 norm of each input feature across all captured rows."""

    norms: dict[str, np.ndarray]
    rows: int

    @classmethod
    def from_capture(cls, capture: ForwardCapture) -> "ActivationNorms":
        if capture.row_count < 1:
            raise ValueError("capture has no rows accumulated")
        return cls(
            norms={name: np.sqrt(s) for name, s in capture.sums.items()},
            rows=capture.row_count,
        )


@dataclass
class GradientStats:
    """Scalar gradient importance per layer plus the iteration that computed it."""

    g: dict[str, float]
    samples_used: int
    iteration_computed: int


@dataclass
class LayerProfile:
    name: str
    sensitivity: float
    grad_importance: float
    z_sens: float
    z_grad: float
    sparsity: float


def wanda_scores(weights: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Elementwise |W[i,j]| * norms[j], in float64."""
    w = np.asarray(weights)
    n = np.asarray(norms, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be 2-D")
    if n.ndim != 1 or n.shape[0] != w.shape[1]:
        raise ValueError(
            f"norms shape {n.shape} does not match weight columns {w.shape[1]}"
        )
    if np.any(n < 0):
        raise ValueError("activation norms must be non-negative")
    return np.abs(w).astype(np.float64) * n[None, :]


def layer_sensitivity(scores: np.ndarray, mask: np.ndarray, k: int = SENSITIVITY_PERCENTILE) -> float:
    """Nearest-rank k-th percentile of scores at active positions.

    rank = ceil(k/100 * n_active), 1-based into the ascending sort.
    """
    if not 1 <= int(k) <= 100 or int(k) != k:
        raise ValueError("k must be an integer percent in [1, 100]")
    s = np.asarray(scores)
    m = np.asarray(mask)
    if s.shape != m.shape:
        raise ValueError(f"scores shape {s.shape} != mask shape {m.shape}")
    active = s[m.astype(bool)]
    n = active.size
    if n == 0:
        raise ValueError("layer is fully masked; sensitivity undefined")
    rank = (int(k) * n + 99) // 100  # exact integer ceil
    return float(np.partition(active, rank - 1)[rank - 1])


def gradient_importance(grad_matrices, mask: np.ndarray) -> float:
    """Mean over active positions of the per-sample-averaged |gradient|."""
    mats = [np.asarray(g, dtype=np.float64) for g in grad_matrices]
    if not mats:
        raise ValueError("need at least one gradient matrix")
    m = np.asarray(mask)
    for g in mats:
        if g.shape != m.shape:
            raise ValueError(f"gradient shape {g.shape} != mask shape {m.shape}")
    active = m.astype(bool)
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("layer is fully masked; gradient importance undefined")
    mean_abs = np.zeros(m.shape, dtype=np.float64)
    for g in mats:
        mean_abs += np.abs(g)
    mean_abs /= len(mats)
    return float(mean_abs[active].mean())


def zscore_normalize(values, eps: float = ZSCORE_EPS) -> np.ndarray:
    """(v - mean) / (population std + eps), preserving order.

    Identical inputs map to exact zeros.  Intended domain: finite values
    at workaday magnitudes; when the spread is not large relative to
    eps, the unit-variance property degrades toward zeros by design.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("values must be a non-empty 1-D sequence")
    if v.min() == v.max():
        # Identical inputs: exact zeros, even when the float64 mean of n
        # copies does not reconstruct the value bit-for-bit.
        return np.zeros_like(v)
    mu = v.mean()
    sigma = v.std()
    return (v - mu) / (sigma + eps)


def build_profiles(
    graph: ModelGraph,
    activation_norms: ActivationNorms,
    gradient_stats: GradientStats,
    k: int = SENSITIVITY_PERCENTILE,
) -> list[LayerProfile]:
    """Per-layer profiles, sorted ascending by z_sens (ties by name)."""
    names = graph.layer_names()
    for name in names:
        if name not in activation_norms.norms:
            raise ValueError(f"missing activation norms for layer {name!r}")
        if name not in gradient_stats.g:
            raise ValueError(f"missing gradient stats for layer {name!r}")

    sens = []
    grad = []
    spars = []
    for name in names:
        layer = graph.layer(name)
        scores = wanda_scores(layer.weights, activation_norms.norms[name])
        sens.append(layer_sensitivity(scores, layer.mask, k))
        grad.append(float(gradient_stats.g[name]))
        spars.append(layer.sparsity())

    z_sens = zscore_normalize(sens)
    z_grad = zscore_normalize(grad)
    profiles = [
        LayerProfile(
            name=name,
            sensitivity=sens[i],
            grad_importance=grad[i],
            z_sens=float(z_sens[i]),
            z_grad=float(z_grad[i]),
            sparsity=spars[i],
        )
        for i, name in enumerate(names)
    ]
    profiles.sort(key=lambda p: (p.z_sens, p.name))
    return profiles


def profiles_to_json(profiles: list[LayerProfile]) -> list[dict]:
    """Serializable profile document; also the prompt's data source."""
    return [
        {
            "layer": p.name,
            "s": p.sensitivity,
            "g": p.grad_importance,
            "z_sens": p.z_sens,
            "z_grad": p.z_grad,
            "sparsity": p.sparsity,
        }
        for p in profiles
    ]
