import numpy as np
import pytest
import torch

from spurig.autodiff import COMPLEX_DTYPE
from spurig.igrog import (
    ImplicitKernel,
    fft_dc_operator,
    grid,
    load_gridded,
    load_kernel,
    save_gridded,
    save_kernel,
    time_dc_iteration,
    train_kernel,
)
from spurig.sampling import (
    AcquisitionSet,
    CalibrationRegion,
    Trajectory,
    cartesian_trajectory,
    make_calibration,
    make_trajectory,
    sample_kspace,
)
from spurig.shared import ShapeError, relative_error, vdot

from .conftest import random_coeffs


@pytest.fixture()
def calibrated(make_truth):
    """Coefficients, coils, basis and an 8^3 calibration block of a 16^3 phantom."""
    _, coils, coeffs, basis = make_truth(grid=16, n_coils=2, k=3)
    return coeffs, coils, basis, make_calibration(coeffs, coils, size=8)


@pytest.fixture()
def radial_acquisition(calibrated):
    coeffs, coils, basis, _ = calibrated
    traj = make_trajectory(16, basis.n_tr, 1, "radial-kooshball")
    return sample_kspace(coeffs, coils, traj, basis, 0.0, 0)


def test_kernel_starts_near_averaging():
    kernel = ImplicitKernel(n_coils=2, n=3)
    sources = random_coeffs((4, 1, 2)).repeat(1, 3, 1)
    out = kernel.interpolate(torch.zeros((4, 3, 3), dtype=torch.float64), sources)
    assert relative_error(out, sources[:, 0]) < 0.05


def test_zero_offset_training_reaches_identity(calibrated):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=1, seed=0, steps=200, hidden=16, zero_offsets=True)
    assert kernel.log.final_validation < 1e-2
    assert kernel.log.final_validation <= kernel.log.initial_validation


def test_training_improves_held_out_error(calibrated):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=3, seed=0, steps=200, hidden=16)
    log = kernel.log
    assert len(log.losses) == 200
    assert np.isfinite(log.losses).all()
    assert log.final_validation < log.initial_validation


def test_training_is_seed_deterministic_and_stable(calibrated):
    *_, calib = calibrated
    first = train_kernel(calib, n=3, seed=1, steps=50, hidden=16)
    again = train_kernel(calib, n=3, seed=1, steps=50, hidden=16)
    other = train_kernel(calib, n=3, seed=2, steps=50, hidden=16)
    assert first.log.losses == again.log.losses
    assert first.log.losses != other.log.losses
    ratio = first.log.final_validation / other.log.final_validation
    assert 0.5 < ratio < 2.0


def test_degenerate_calibration_is_rejected(calibrated):
    *_, calib = calibrated
    with pytest.raises(ValueError, match="all zero"):
        train_kernel(CalibrationRegion(np.zeros_like(calib.data), 8), n=3, steps=1)
    with pytest.raises(ValueError, match="smaller than"):
        train_kernel(calib, n=6, steps=1)


def test_invalid_kernel_settings():
    for kwargs in ({"n": 0}, {"oversampling": 0.5}, {"n_coils": 0}):
        with pytest.raises(ValueError):
            ImplicitKernel(**{"n_coils": 2, **kwargs})
    with pytest.raises(ShapeError):
        ImplicitKernel(2, n=3)(torch.zeros((1, 2, 3), dtype=torch.float64))


def test_cartesian_identity_gridding(calibrated):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=1, seed=0, steps=300, hidden=16, zero_offsets=True)
    traj = cartesian_trajectory(16, 1)
    acq = AcquisitionSet(random_coeffs((2, traj.n_samples), seed=1).numpy(), traj)
    gridded = grid(kernel, acq, 16, oversampling=1.0)
    assert gridded.big == (16, 16, 16)
    assert np.array_equal(gridded.target_index, np.arange(traj.n_samples))
    assert relative_error(gridded.data, acq.data) < 1e-3


def test_gridding_structure(calibrated, radial_acquisition):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=3, seed=0, steps=5, hidden=16)
    gridded = grid(kernel, radial_acquisition, 16)
    assert gridded.big == (24, 24, 24)
    assert gridded.n_targets <= radial_acquisition.trajectory.n_samples
    assert gridded.occupancy().sum() <= gridded.n_targets
    assert gridded.occupancy(tr=0).sum() == np.sum(gridded.tr == 0)
    coords = gridded.coords()
    assert coords.min() >= -0.5 and coords.max() < 0.5
    assert np.isfinite(gridded.data).all()


def test_gridding_is_linear_and_deterministic(calibrated, radial_acquisition):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=3, seed=0, steps=5, hidden=16)
    once = grid(kernel, radial_acquisition, 16)
    twice = grid(kernel, radial_acquisition, 16)
    assert np.array_equal(once.data, twice.data)
    scaled = AcquisitionSet(
        (2 - 1j) * radial_acquisition.data, radial_acquisition.trajectory
    )
    assert np.allclose(grid(kernel, scaled, 16).data, (2 - 1j) * once.data)


def test_gridding_rejects_bad_acquisitions(calibrated, radial_acquisition):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=3, seed=0, steps=1, hidden=16)
    empty = Trajectory(
        np.zeros((0, 3)),
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        1,
        1,
        0,
    )
    with pytest.raises(ValueError, match="empty"):
        grid(kernel, AcquisitionSet(np.zeros((2, 0), dtype=complex), empty), 16)
    one_coil = AcquisitionSet(
        radial_acquisition.data[:1], radial_acquisition.trajectory
    )
    with pytest.raises(ShapeError):
        grid(kernel, one_coil, 16)


def test_fft_dc_operator_contract(calibrated, radial_acquisition):
    _, coils, basis, calib = calibrated
    kernel = train_kernel(calib, n=3, seed=0, steps=5, hidden=16)
    gridded = grid(kernel, radial_acquisition, 16)
    op = fft_dc_operator(gridded, coils.maps, basis)
    assert op.mode == "cartesian-fft"
    assert op.dot_test(seed=3, pairs=5) < 1e-6
    x, y = random_coeffs(op.coeff_shape, 1), random_coeffs(op.coeff_shape, 2)
    lhs, rhs = vdot(y, op.gram(x)), vdot(op.gram(y), x)
    assert abs(lhs - rhs) <= 1e-8 * abs(lhs)
    data = torch.as_tensor(gridded.data, dtype=COMPLEX_DTYPE)
    assert time_dc_iteration(op, torch.zeros(op.coeff_shape, dtype=COMPLEX_DTYPE), data) > 0


def test_kernel_and_gridded_persistence(tmp_path, calibrated, radial_acquisition):
    *_, calib = calibrated
    kernel = train_kernel(calib, n=3, seed=0, steps=3, hidden=16)
    save_kernel(tmp_path / "kernel", kernel)
    loaded = load_kernel(tmp_path / "kernel")
    assert loaded.log.losses == pytest.approx(kernel.log.losses)
    offsets = torch.rand((5, 3, 3), dtype=torch.float64)
    assert torch.equal(loaded(offsets), kernel(offsets))
    gridded = grid(kernel, radial_acquisition, 16)
    save_gridded(tmp_path / "gridded", gridded)
    back = load_gridded(tmp_path / "gridded")
    assert back.big == gridded.big
    assert np.array_equal(back.data, gridded.data)
