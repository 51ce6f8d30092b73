"""Mask-based pruning: pick lowest-score coordinates and flip mask bits.

Pruning never modifies stored weights and never revives a masked
position.  Selection is fully deterministic: score ties break by
(row, col) ascending.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelGraph

DELTA_MIN = 0.01
DELTA_MAX = 0.15

GROUPINGS = ("per_output_row", "per_layer_global")
ACCOUNTINGS = ("prunable_only", "all_params")


@dataclass
class PruneRequest:
    layer: str
    delta: float  # additional sparsity as a fraction of the full layer
    grouping: str = "per_output_row"

    def validate(self) -> None:
        if self.grouping not in GROUPINGS:
            raise ValueError(f"grouping must be one of {GROUPINGS}")
        if not (DELTA_MIN <= self.delta <= DELTA_MAX):
            raise ValueError(
                f"delta {self.delta} outside [{DELTA_MIN}, {DELTA_MAX}]"
            )


@dataclass
class PruneOutcome:
    layer: str
    newly_zeroed: int
    layer_sparsity_before: float
    layer_sparsity_after: float
    global_sparsity_after: float


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_prune_set(
    scores: np.ndarray, mask: np.ndarray, n_zero: int, grouping: str
) -> set[tuple[int, int]]:
    """Coordinates of the n_zero lowest-score active entries.

    per_output_row apportions n_zero across rows by largest remainder,
    proportional to each row's active count, then takes each row's
    lowest scores.  per_layer_global takes the lowest scores anywhere.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if s.shape != m.shape or s.ndim != 2:
        raise ValueError("scores and mask must be equal-shape 2-D arrays")
    active_total = int(m.sum())
    if n_zero < 0:
        raise ValueError("n_zero must be non-negative")
    if n_zero > active_total:
        raise ValueError(f"n_zero={n_zero} exceeds active count {active_total}")
    if n_zero == 0:
        return set()

    if grouping == "per_layer_global":
        rows, cols = np.nonzero(m)
        order = np.lexsort((cols, rows, s[rows, cols]))
        chosen = order[:n_zero]
        return {(int(rows[i]), int(cols[i])) for i in chosen}

    # per_output_row: integer largest-remainder apportionment.
    active_per_row = m.sum(axis=1).astype(np.int64)
    base = (n_zero * active_per_row) // active_total
    rem = (n_zero * active_per_row) % active_total
    leftover = n_zero - int(base.sum())
    quotas = base.copy()
    if leftover > 0:
        # Rows with the largest remainder first; ties to the lower row.
        order = np.lexsort((np.arange(len(rem)), -rem))
        for r in order[:leftover]:
            assert rem[r] > 0  # largest-remainder never over-assigns a full row
            quotas[r] += 1

    out: set[tuple[int, int]] = set()
    for r in range(m.shape[0]):
        q = int(quotas[r])
        if q == 0:
            continue
        cols = np.flatnonzero(m[r])
        order = np.lexsort((cols, s[r, cols]))
        for i in order[:q]:
            out.add((r, int(cols[i])))
    return out


def apply_prune(
    graph: ModelGraph,
    request: PruneRequest,
    scores: np.ndarray,
    accounting: str = "prunable_only",
) -> PruneOutcome:
    """Zero mask bits for the selected coordinates of one layer.

    The requested delta is a fraction of the layer's total size,
    rounded half away from zero and capped at the remaining active
    count.  Stored weights are left untouched.
    """
    request.validate()
    layer = graph.layer(request.layer)
    s = np.asarray(scores)
    if s.shape != layer.weights.shape:
        raise ValueError(
            f"scores shape {s.shape} != layer shape {layer.weights.shape}"
        )
    before = layer.sparsity()
    active = layer.active_count()
    n_zero = min(_round_half_away(request.delta * layer.size), active)
    coords = select_prune_set(s, layer.mask, n_zero, request.grouping)
    if coords:
        rows = np.fromiter((c[0] for c in coords), dtype=np.int64, count=len(coords))
        cols = np.fromiter((c[1] for c in coords), dtype=np.int64, count=len(coords))
        layer.mask[rows, cols] = 0
    return PruneOutcome(
        layer=layer.name,
        newly_zeroed=len(coords),
        layer_sparsity_before=before,
        layer_sparsity_after=layer.sparsity(),
        global_sparsity_after=global_sparsity(graph, accounting),
    )


def global_sparsity(graph: ModelGraph, accounting: str = "prunable_only") -> float:
    """Fraction of zeroed parameters under the chosen accounting."""
    if accounting not in ACCOUNTINGS:
        raise ValueError(f"accounting must be one of {ACCOUNTINGS}")
    zeroed = 0
    total = 0
    for layer in graph.layers:
        zeroed += layer.size - layer.active_count()
        total += layer.size
    if accounting == "all_params":
        total += sum(arr.size for arr in graph.extras.values())
    return zeroed / total
