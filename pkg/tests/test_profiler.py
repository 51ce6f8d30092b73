"""Layer statistics: activation-weighted scores, nearest-rank sensitivity,
gradient importance, and z-score normalization.

Every formula here is checked against an independent re-implementation
(plain Python loops, Fraction-exact ranks) before being trusted anywhere
else in the suite.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunepilot import (
    ActivationNorms,
    ForwardCapture,
    GradientStats,
    build_profiles,
    forward_nll,
    gradient_importance,
    layer_sensitivity,
    profiles_to_json,
    wanda_scores,
    zscore_normalize,
)

# ---------------------------------------------------------------------------
# wanda_scores
# ---------------------------------------------------------------------------


def test_wanda_scores_hand_example():
    weights = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -4.0]])
    norms = np.array([2.0, 0.5, 1.0])
    expected = np.array([[2.0, 1.0, 0.5], [0.0, 1.5, 4.0]])
    got = wanda_scores(weights, norms)
    assert got.dtype == np.float64
    np.testing.assert_array_equal(got, expected)


def test_wanda_scores_brute_force_oracle():
    rng = np.random.default_rng(42)
    for _ in range(20):
        rows = int(rng.integers(1, 8))
        cols = int(rng.integers(1, 8))
        weights = rng.normal(size=(rows, cols)).astype(np.float32)
        norms = np.abs(rng.normal(size=cols))
        got = wanda_scores(weights, norms)
        for i in range(rows):
            for j in range(cols):
                # |w| is exact in float32; the float64 promotion and a
                # single multiply are both exact operations, so demand
                # bit equality with the loop version.
                want = float(abs(weights[i, j])) * float(norms[j])
                assert got[i, j] == want


def test_wanda_scores_zero_norm_zeroes_column():
    weights = np.array([[5.0, -7.0], [1.0, 2.0]])
    norms = np.array([0.0, 1.0])
    got = wanda_scores(weights, norms)
    np.testing.assert_array_equal(got[:, 0], [0.0, 0.0])


@pytest.mark.parametrize(
    "weights, norms, match",
    [
        (np.ones(3), np.ones(3), "2-D"),
        (np.ones((2, 3)), np.ones(2), "does not match"),
        (np.ones((2, 3)), np.ones((3, 1)), "does not match"),
        (np.ones((2, 3)), np.array([1.0, -1.0, 1.0]), "non-negative"),
    ],
)
def test_wanda_scores_rejects_bad_input(weights, norms, match):
    with pytest.raises(ValueError, match=match):
        wanda_scores(weights, norms)


# ---------------------------------------------------------------------------
# layer_sensitivity (nearest-rank percentile)
# ---------------------------------------------------------------------------


def nearest_rank_oracle(values: list[float], k: int) -> float:
    """Independent nearest-rank percentile: exact rational arithmetic."""
    ordered = sorted(values)
    n = len(ordered)
    rank = math.ceil(Fraction(k * n, 100))
    return ordered[rank - 1]


def test_layer_sensitivity_one_to_ten():
    scores = np.arange(1.0, 11.0).reshape(2, 5)
    mask = np.ones((2, 5), dtype=np.uint8)
    # n=10, k=10 -> rank ceil(1.0) = 1 -> smallest element.
    assert layer_sensitivity(scores, mask, k=10) == 1.0


@pytest.mark.parametrize(
    "n, k, expected_rank",
    [
        (10, 10, 1),
        (11, 10, 2),   # ceil(1.1) = 2
        (100, 10, 10),
        (101, 10, 11),  # ceil(10.1) = 11
        (5, 50, 3),     # ceil(2.5) = 3, the classic median case
        (4, 25, 1),
        (3, 100, 3),
        (1, 1, 1),
        (7, 99, 7),     # ceil(6.93) = 7
    ],
)
def test_layer_sensitivity_rank_arithmetic(n, k, expected_rank):
    # Distinct ascending scores make the selected rank directly readable.
    scores = np.arange(1.0, n + 1.0).reshape(1, n)
    mask = np.ones((1, n), dtype=np.uint8)
    assert layer_sensitivity(scores, mask, k=k) == float(expected_rank)


def test_layer_sensitivity_matches_oracle_randomized():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(120):
        rows = int(rng.integers(1, 6))
        cols = int(rng.integers(1, 9))
        scores = rng.normal(size=(rows, cols)) ** 2
        mask = (rng.random(size=(rows, cols)) < 0.7).astype(np.uint8)
        if mask.sum() == 0:
            mask[0, 0] = 1
        k = int(rng.integers(1, 101))
        active = [float(v) for v in scores[mask.astype(bool)]]
        want = nearest_rank_oracle(active, k)
        got = layer_sensitivity(scores, mask, k=k)
        # Both sides select an element of the same array: bit equality.
        assert got == want
        checked += 1
    assert checked == 120


def test_layer_sensitivity_ignores_masked_positions():
    scores = np.array([[0.001, 5.0, 6.0, 7.0]])
    mask = np.array([[0, 1, 1, 1]], dtype=np.uint8)
    # The tiny score sits at a masked position and must not be selected.
    assert layer_sensitivity(scores, mask, k=10) == 5.0


@pytest.mark.parametrize(
    "k",
    [0, 101, -5, 10.5],
)
def test_layer_sensitivity_rejects_bad_percentile(k):
    scores = np.ones((2, 2))
    mask = np.ones((2, 2), dtype=np.uint8)
    with pytest.raises(ValueError, match="integer percent"):
        layer_sensitivity(scores, mask, k=k)


def test_layer_sensitivity_rejects_fully_masked():
    with pytest.raises(ValueError, match="fully masked"):
        layer_sensitivity(np.ones((2, 2)), np.zeros((2, 2), dtype=np.uint8))


def test_layer_sensitivity_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        layer_sensitivity(np.ones((2, 2)), np.ones((2, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# gradient_importance
# ---------------------------------------------------------------------------


def test_gradient_importance_hand_example():
    g1 = np.array([[1.0, -3.0], [0.0, 2.0]])
    g2 = np.array([[3.0, 1.0], [0.0, -6.0]])
    mask = np.array([[1, 1], [0, 1]], dtype=np.uint8)
    # per-position mean |g|: [[2, 2], [0, 4]]; active positions -> (2+2+4)/3
    got = gradient_importance([g1, g2], mask)
    assert got == pytest.approx(8.0 / 3.0, rel=1e-15)


def test_gradient_importance_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        rows = int(rng.integers(1, 5))
        cols = int(rng.integers(1, 5))
        n_mats = int(rng.integers(1, 5))
        mats = [rng.normal(size=(rows, cols)) for _ in range(n_mats)]
        mask = (rng.random(size=(rows, cols)) < 0.8).astype(np.uint8)
        if mask.sum() == 0:
            mask[0, 0] = 1
        total = 0.0
        count = 0
        for i in range(rows):
            for j in range(cols):
                if mask[i, j]:
                    total += sum(abs(float(g[i, j])) for g in mats) / n_mats
                    count += 1
        want = total / count
        got = gradient_importance(mats, mask)
        assert got == pytest.approx(want, rel=1e-12)


def test_gradient_importance_single_matrix_identity():
    g = np.array([[2.0, -2.0], [2.0, 2.0]])
    mask = np.ones((2, 2), dtype=np.uint8)
    assert gradient_importance([g], mask) == 2.0


@pytest.mark.parametrize(
    "mats, mask, match",
    [
        ([], np.ones((2, 2), dtype=np.uint8), "at least one"),
        ([np.ones((2, 3))], np.ones((2, 2), dtype=np.uint8), "shape"),
        ([np.ones((2, 2))], np.zeros((2, 2), dtype=np.uint8), "fully masked"),
    ],
)
def test_gradient_importance_rejects_bad_input(mats, mask, match):
    with pytest.raises(ValueError, match=match):
        gradient_importance(mats, mask)


# ---------------------------------------------------------------------------
# zscore_normalize
# ---------------------------------------------------------------------------


def test_zscore_identical_values_are_exactly_zero():
    got = zscore_normalize([5.0, 5.0, 5.0])
    np.testing.assert_array_equal(got, np.zeros(3))


def test_zscore_hand_example():
    values = [1.0, 2.0, 3.0]
    sigma = math.sqrt(2.0 / 3.0)
    want = [(v - 2.0) / (sigma + 1e-9) for v in values]
    np.testing.assert_allclose(zscore_normalize(values), want, rtol=1e-12)


def test_zscore_preserves_order():
    values = np.array([3.0, -1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0])
    z = zscore_normalize(values)
    np.testing.assert_array_equal(np.argsort(z), np.argsort(values))


def test_zscore_affine_invariance():
    rng = np.random.default_rng(3)
    values = rng.normal(size=12) * 10.0
    base = zscore_normalize(values)
    shifted = zscore_normalize(values * 4.0 - 7.0)
    # Positive rescale + shift leaves z-scores unchanged up to the eps
    # guard in the denominator.
    np.testing.assert_allclose(shifted, base, rtol=1e-6)


@settings(max_examples=300, deadline=None)
@given(
    st.lists(
        st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
        min_size=2,
        max_size=64,
    )
)
def test_zscore_unit_statistics(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.std() < 1e-2:
        return  # spread too small for the unit-variance contract
    z = zscore_normalize(arr)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-6


@pytest.mark.parametrize("bad", [[], np.ones((2, 2))])
def test_zscore_rejects_bad_shape(bad):
    with pytest.raises(ValueError, match="non-empty 1-D"):
        zscore_normalize(bad)


# ---------------------------------------------------------------------------
# build_profiles
# ---------------------------------------------------------------------------


def _profile_inputs(graph, batch):
    capture = ForwardCapture.for_model(graph)
    forward_nll(graph, batch, capture)
    norms = ActivationNorms.from_capture(capture)
    g = {name: float(i + 1) for i, name in enumerate(graph.layer_names())}
    stats = GradientStats(g=g, samples_used=batch.shape[0], iteration_computed=1)
    return norms, stats


def test_build_profiles_covers_all_layers_sorted(tiny_graph, tiny_batch):
    norms, stats = _profile_inputs(tiny_graph, tiny_batch)
    profiles = build_profiles(tiny_graph, norms, stats)
    assert {p.name for p in profiles} == set(tiny_graph.layer_names())
    keys = [(p.z_sens, p.name) for p in profiles]
    assert keys == sorted(keys)


def test_build_profiles_zscores_are_cross_layer(tiny_graph, tiny_batch):
    norms, stats = _profile_inputs(tiny_graph, tiny_batch)
    profiles = build_profiles(tiny_graph, norms, stats)
    z_sens = np.array([p.z_sens for p in profiles])
    z_grad = np.array([p.z_grad for p in profiles])
    assert abs(z_sens.mean()) < 1e-9
    assert abs(z_grad.mean()) < 1e-9
    # Raw values restored from the same pass must match a direct recompute.
    for p in profiles:
        layer = tiny_graph.layer(p.name)
        scores = wanda_scores(layer.weights, norms.norms[p.name])
        assert p.sensitivity == layer_sensitivity(scores, layer.mask)
        assert p.sparsity == layer.sparsity()


def test_build_profiles_masking_raises_sensitivity(tiny_graph, tiny_batch):
    norms, stats = _profile_inputs(tiny_graph, tiny_batch)
    before = {p.name: p.sensitivity for p in build_profiles(tiny_graph, norms, stats)}

    # Mask the lowest-scoring 30% of one layer by hand.
    name = "block0.mlp_up"
    layer = tiny_graph.layer(name)
    scores = wanda_scores(layer.weights, norms.norms[name])
    flat = np.argsort(scores, axis=None)
    drop = flat[: layer.size * 3 // 10]
    layer.mask.ravel()[drop] = 0

    after = {p.name: p.sensitivity for p in build_profiles(tiny_graph, norms, stats)}
    assert after[name] > before[name]
    unchanged = [n for n in before if n != name]
    for n in unchanged:
        assert after[n] == before[n]


def test_build_profiles_missing_stats_error(tiny_graph, tiny_batch):
    norms, stats = _profile_inputs(tiny_graph, tiny_batch)
    del stats.g["block0.q_proj"]
    with pytest.raises(ValueError, match="missing gradient stats"):
        build_profiles(tiny_graph, norms, stats)

    stats.g["block0.q_proj"] = 1.0
    norms.norms.pop("lm_head")
    with pytest.raises(ValueError, match="missing activation norms"):
        build_profiles(tiny_graph, norms, stats)


def test_profiles_to_json_shape(tiny_graph, tiny_batch):
    norms, stats = _profile_inputs(tiny_graph, tiny_batch)
    doc = profiles_to_json(build_profiles(tiny_graph, norms, stats))
    assert len(doc) == len(tiny_graph.layer_names())
    for row in doc:
        assert set(row) == {"layer", "s", "g", "z_sens", "z_grad", "sparsity"}
        assert isinstance(row["layer"], str)
