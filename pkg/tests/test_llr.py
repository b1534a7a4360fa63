from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np
import pytest
import torch

from spurig.autodiff import COMPLEX_DTYPE
from spurig.llr import (
    LLR_THRESHOLDS,
    LLRConfig,
    fista_llr,
    llr_prox,
    nuclear_norm,
    power_iteration_L,
    svt,
    sweep_threshold,
    threshold_for,
)
from spurig.shared import DivergenceError, ShapeError, relative_error

from .conftest import conjugate_gradient, random_coeffs, random_coils


@pytest.fixture()
def full_cartesian(operator_builder):
    """Fully sampled Cartesian operator (diagonal Gram) with noiseless data."""
    coils = random_coils((8, 8, 8), 2, seed=1)
    op = operator_builder(mode="cartesian-fft", coils=coils, k=2, n_tr=4)
    truth = random_coeffs(op.coeff_shape, seed=2)
    with torch.no_grad():
        data = op.apply(truth)
    lipschitz = float(np.max(coils.rss() ** 2))
    return op, data, truth, lipschitz


def test_zero_threshold_prox_is_identity():
    x = random_coeffs((3, 6, 6, 6))
    assert llr_prox(x, LLRConfig(patch_size=3), iteration=1) is x


def test_single_patch_equals_dense_svt():
    x = random_coeffs((3, 4, 4, 4))
    cfg = LLRConfig(patch_size=4, threshold=0.7)
    dense = svt(x.reshape(3, -1).T, 0.7).T.reshape(x.shape)
    assert torch.allclose(llr_prox(x, cfg, iteration=5), dense, atol=1e-12)


def test_svt_shrinks_singular_values():
    matrix = random_coeffs((1, 10, 3))
    before = torch.linalg.svdvals(matrix)
    after = torch.linalg.svdvals(svt(matrix, 0.5))
    assert torch.allclose(after, torch.clamp(before - 0.5, min=0), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**16),
    rows=st.integers(1, 12),
    cols=st.integers(1, 6),
    threshold=st.floats(0.0, 3.0),
)
def test_svt_soft_thresholds_any_matrix(seed, rows, cols, threshold):
    matrix = random_coeffs((rows, cols), seed)
    before = torch.linalg.svdvals(matrix)
    after = torch.linalg.svdvals(svt(matrix, threshold))
    assert torch.allclose(after, torch.clamp(before - threshold, min=0), atol=1e-10)


def test_random_patches_leave_unvisited_voxels():
    x = random_coeffs((2, 8, 8, 8))
    cfg = LLRConfig(patch_size=2, threshold=1e3, schedule="random", patches_per_iter=1)
    out = llr_prox(x, cfg, iteration=1)
    changed = torch.any(out != x, dim=0)
    assert int(changed.sum()) == 8
    assert torch.all(out[:, changed] == 0)


def test_prox_is_reproducible_per_iteration():
    x = random_coeffs((2, 8, 8, 8))
    cfg = LLRConfig(patch_size=4, threshold=0.5, seed=3)
    assert torch.equal(llr_prox(x, cfg, 2), llr_prox(x, cfg, 2))


def test_nuclear_norm_of_rank_one_patches():
    volume = torch.ones((2, 4, 4, 4), dtype=COMPLEX_DTYPE)
    # one patch, rank one: ||ones(64, 2)||_* = sqrt(128)
    assert nuclear_norm(volume, LLRConfig(patch_size=4)) == pytest.approx(np.sqrt(128))


def test_prox_rejects_bad_inputs():
    with pytest.raises(ValueError, match="exceeds the grid"):
        llr_prox(random_coeffs((2, 4, 4, 4)), LLRConfig(patch_size=5, threshold=1), 1)
    with pytest.raises(ShapeError):
        llr_prox(random_coeffs((4, 4, 4)), LLRConfig(patch_size=2, threshold=1), 1)


@pytest.mark.parametrize(
    "kwargs",
    [{"patch_size": 0}, {"threshold": -1.0}, {"schedule": "spiral"}, {"step": 0.0}],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        LLRConfig(**kwargs)


def test_thresholds_per_acceleration():
    normal_b = torch.full((4,), 0.5, dtype=COMPLEX_DTYPE)
    assert threshold_for(3, normal_b) == pytest.approx(LLR_THRESHOLDS[3] * 50.0)
    # scaled by the L2 norm (5 here), not the peak (4)
    pair = torch.tensor([3.0, -4.0j], dtype=COMPLEX_DTYPE)
    assert threshold_for(12, pair) == pytest.approx(LLR_THRESHOLDS[12] * 50.0 * 5.0)
    with pytest.raises(KeyError):
        threshold_for(5, normal_b)


def test_power_iteration_bounds_lipschitz(full_cartesian):
    op, _, _, lipschitz = full_cartesian
    estimate = power_iteration_L(op, iters=60)
    assert 0.9 * lipschitz <= estimate.value <= lipschitz * (1 + 1e-9)
    assert estimate.iterations == 60


def test_unregularized_fista_solves_least_squares(full_cartesian):
    op, data, truth, lipschitz = full_cartesian
    cfg = LLRConfig(patch_size=4, threshold=0.0, iterations=200, step=1.0 / lipschitz)
    result = fista_llr(data, op, cfg)
    oracle = conjugate_gradient(op, data)
    assert relative_error(result.coeffs, oracle) < 1e-6
    assert relative_error(result.coeffs, truth) < 1e-6
    assert result.step == pytest.approx(1.0 / lipschitz)


def test_regularized_trace_never_increases(operator_builder):
    op = operator_builder(mode="exact-dft", k=2, n_tr=4, groups=3)
    data = op.apply(random_coeffs(op.coeff_shape, seed=4))
    cfg = LLRConfig(patch_size=4, threshold=threshold_for(3, op.normal(data)), iterations=12)
    result = fista_llr(data, op, cfg)
    objective = result.trace_frame()["objective"].to_numpy()
    assert len(objective) == 13
    assert np.all(np.diff(objective) <= 1e-12 * objective[0])
    assert objective[-1] < objective[0]


def test_excessive_step_diverges(full_cartesian):
    op, data, _, lipschitz = full_cartesian
    cfg = LLRConfig(patch_size=4, iterations=20, step=100.0 / lipschitz, restart=False)
    with pytest.raises(DivergenceError, match="diverged") as info:
        fista_llr(data, op, cfg)
    assert info.value.details["iterations"] == len(info.value.trace) >= 2


def test_sweep_prefers_the_accurate_threshold(full_cartesian):
    op, data, truth, _ = full_cartesian
    cfg = LLRConfig(patch_size=4, iterations=30)
    best, frame = sweep_threshold(data, op, truth, cfg, [0.0, 1e3])
    assert best == 0.0
    assert list(frame.columns) == ["threshold", "relative_error"]
    with pytest.raises(ValueError):
        sweep_threshold(data, op, truth, cfg, [])
