import math

import numpy as np
import pytest

from spurig.phantom import CoilMaps
from spurig.sampling import (
    AcquisitionSet,
    cartesian_trajectory,
    complex_noise,
    group_mask,
    identity_basis,
    load_acquisition,
    make_calibration,
    make_trajectory,
    readout_normals,
    sample_kspace,
    save_acquisition,
    undersample,
)
from spurig.shared import ShapeError

from .conftest import random_basis, random_coils


def test_spiral_readouts_are_rotated_copies():
    traj = make_trajectory(16, n_tr=3, groups=2, turns=2.0)
    samples = math.ceil(math.sqrt(0.25 + (2 * math.pi) ** 2) * 16)
    assert traj.samples_per_readout == samples
    assert traj.n_samples == 3 * 2 * samples
    radius = np.linalg.norm(traj.coords, axis=1)
    assert np.allclose(radius, 0.5 * traj.readout / samples)
    assert radius.max() < 0.5


def test_samples_are_ordered_by_group_then_tr():
    traj = make_trajectory(16, n_tr=4, groups=3, kind="radial-kooshball")
    assert traj.samples_per_readout == 16
    assert np.all(np.diff(traj.group) >= 0)
    first_group = traj.group == 0
    assert np.all(np.diff(traj.tr[first_group]) >= 0)
    assert traj.tr.max() == 3


def test_readout_orientations_do_not_repeat():
    normals = readout_normals(10, 4).reshape(-1, 3)
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0)
    gram = np.abs(normals @ normals.T) - np.eye(40)
    assert gram.max() < 1 - 1e-6


def test_spiral_over_budget_is_rejected():
    with pytest.raises(ValueError, match="over the budget"):
        make_trajectory(16, n_tr=2, groups=1, turns=4.0, readout_budget=32)
    with pytest.raises(ValueError, match="unknown trajectory kind"):
        make_trajectory(16, n_tr=2, groups=1, kind="rosette")


def test_cartesian_trajectory_covers_grid():
    traj = cartesian_trajectory((4, 6, 8), n_tr=2)
    assert traj.n_samples == 2 * 4 * 6 * 8
    assert traj.coords.min() == -0.5
    assert np.unique(traj.coords[traj.tr == 0], axis=0).shape[0] == 4 * 6 * 8


def test_undersampling_keeps_strided_groups():
    traj = make_trajectory(16, n_tr=2, groups=48, kind="radial-kooshball")
    sub = undersample(traj, 3)
    assert sub.groups == 16
    assert np.array_equal(np.unique(sub.group), np.arange(0, 48, 3))
    assert sub.n_samples == traj.n_samples // 3
    assert undersample(traj, 1) is traj
    assert undersample(make_trajectory(16, 2, 6, "radial-kooshball"), 4).groups == 2


@pytest.mark.parametrize("R", [0, 7])
def test_invalid_acceleration(R):
    traj = make_trajectory(16, n_tr=2, groups=6, kind="radial-kooshball")
    with pytest.raises(ValueError):
        group_mask(traj, R)


def test_noise_has_requested_level():
    noise = complex_noise(np.random.default_rng(0), (4, 50_000), 0.3)
    assert np.std(noise) == pytest.approx(0.3, rel=0.05)
    assert abs(np.mean(noise.real * noise.imag)) < 0.01


def test_delta_gives_constant_magnitude():
    grid = (8, 8, 8)
    traj = make_trajectory(grid, n_tr=3, groups=2, kind="radial-kooshball", readout_budget=8)
    values = np.zeros((3,) + grid, dtype=np.complex128)
    values[:, 4, 4, 4] = 1.0
    coils = CoilMaps(np.ones((1,) + grid, dtype=np.complex128))
    acq = sample_kspace(values, coils, traj, identity_basis(3), noise_sigma=0.0, seed=0)
    assert np.allclose(np.abs(acq.data), 1 / math.sqrt(512))


def test_noise_is_seed_reproducible():
    grid = (8, 8, 8)
    traj = make_trajectory(grid, n_tr=2, groups=2, kind="radial-kooshball", readout_budget=8)
    basis = random_basis(2, 2)
    coils = random_coils(grid, 2)
    values = np.zeros((2,) + grid, dtype=np.complex128)
    first = sample_kspace(values, coils, traj, basis, 0.1, seed=4)
    again = sample_kspace(values, coils, traj, basis, 0.1, seed=4)
    other = sample_kspace(values, coils, traj, basis, 0.1, seed=5)
    assert np.array_equal(first.data, again.data)
    assert not np.allclose(first.data, other.data)


def test_sample_kspace_rejects_ambiguous_leading_extent():
    grid = (8, 8, 8)
    traj = make_trajectory(grid, n_tr=4, groups=1, kind="radial-kooshball", readout_budget=8)
    with pytest.raises(ShapeError):
        sample_kspace(np.zeros((3,) + grid), random_coils(grid, 1), traj, random_basis(4, 2), 0, 0)


def test_acquisition_undersampling_and_persistence(tmp_path):
    grid = (8, 8, 8)
    traj = make_trajectory(grid, n_tr=2, groups=6, kind="radial-kooshball", readout_budget=8)
    data = np.arange(2 * traj.n_samples, dtype=np.complex128).reshape(2, -1)
    acq = AcquisitionSet(data, traj, noise_sigma=0.5, seed=3)
    assert acq.undersample(1) is acq
    sub = acq.undersample(3)
    assert sub.R == 3 and sub.trajectory.groups == 2
    assert np.array_equal(sub.data, data[:, group_mask(traj, 3)])
    save_acquisition(tmp_path / "acq", sub)
    loaded = load_acquisition(tmp_path / "acq")
    assert loaded.R == 3 and loaded.noise_sigma == 0.5
    assert np.array_equal(loaded.data, sub.data)
    assert np.array_equal(loaded.trajectory.coords, sub.trajectory.coords)
    with pytest.raises(ShapeError):
        AcquisitionSet(data[:, :-1], traj)


def test_calibration_block():
    grid = (16, 16, 16)
    coils = random_coils(grid, 3)
    coeffs = np.ones((2,) + grid, dtype=np.complex128)
    calib = make_calibration(coeffs, coils, size=6)
    assert calib.data.shape == (3, 6, 6, 6) and calib.n_coils == 3
    with pytest.raises(ValueError):
        make_calibration(coeffs, coils, size=20)
