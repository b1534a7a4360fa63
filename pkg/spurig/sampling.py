"""Golden-angle 3D trajectories, retrospective undersampling, calibration data and
simulated acquisitions.
"""
from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
import torch

from .autodiff import fftc
from .phantom import CoilMaps, GridLike, as_grid
from .shared import ShapeError, default_rng
from .storage import load_bundle, save_bundle
from .subspace import SubspaceBasis

LOGGER = getLogger(__name__)

#: 2D golden means used to step readout orientations over the sphere
GOLDEN_MEANS = (0.4656, 0.6823)
GOLDEN_RATIO_CONJ = (np.sqrt(5) - 1) / 2

TRAJECTORY_KINDS = ("spiral-projection", "radial-kooshball", "cartesian")
CALIBRATION_SIZE = 12
#: voxel-sample products up to which ``sample_kspace`` evaluates the exact DFT
EXACT_WORK_LIMIT = 1 << 28


@dataclass(frozen=True)
class Trajectory:
    """Sample locations (cycles/voxel) ordered by group, then TR, then readout position."""

    coords: np.ndarray
    tr: np.ndarray
    group: np.ndarray
    readout: np.ndarray
    n_tr: int
    groups: int
    samples_per_readout: int
    kind: str = "spiral-projection"

    def __post_init__(self):
        m = self.coords.shape[0]
        if self.coords.shape != (m, 3):
            raise ShapeError(f"coords must be [M, 3], got {self.coords.shape}")
        if not (self.tr.shape == self.group.shape == self.readout.shape == (m,)):
            raise ShapeError("tr, group and readout must have one entry per sample")
        if m and (self.tr.min() < 0 or self.tr.max() >= self.n_tr):
            raise ValueError(f"TR indices must lie in [0, {self.n_tr})")
        if m and (self.coords.min() < -0.5 or self.coords.max() >= 0.5):
            raise ValueError("coordinates must lie in [-0.5, 0.5)")

    @property
    def n_samples(self) -> int:
        return int(self.coords.shape[0])

    def group_ids(self) -> np.ndarray:
        return np.unique(self.group)

    def subset(self, keep: np.ndarray) -> "Trajectory":
        groups = int(np.unique(self.group[keep]).size)
        return replace(
            self,
            coords=self.coords[keep],
            tr=self.tr[keep],
            group=self.group[keep],
            readout=self.readout[keep],
            groups=groups,
        )


def readout_normals(n_tr: int, groups: int) -> np.ndarray:
    """Unit normals (per TR and group) stepped by the 2D golden means."""
    m = np.arange(n_tr * groups, dtype=np.float64)
    cos_polar = 2 * np.mod(m * GOLDEN_MEANS[0], 1.0) - 1
    azimuth = 2 * np.pi * np.mod(m * GOLDEN_MEANS[1], 1.0)
    sin_polar = np.sqrt(1 - cos_polar**2)
    return np.stack(
        [sin_polar * np.cos(azimuth), sin_polar * np.sin(azimuth), cos_polar], axis=1
    ).reshape(n_tr, groups, 3)


def _rotations(n_tr: int, groups: int) -> Rotation:
    normals = readout_normals(n_tr, groups).reshape(-1, 3)
    polar = np.arccos(np.clip(normals[:, 2], -1, 1))
    azimuth = np.arctan2(normals[:, 1], normals[:, 0])
    spin = 2 * np.pi * np.mod(np.arange(normals.shape[0]) * GOLDEN_RATIO_CONJ, 1.0)
    return Rotation.from_euler("ZYZ", np.stack([azimuth, polar, spin], axis=1))


def base_readout(kind: str, grid: int, turns: float, budget: int) -> np.ndarray:
    """In-plane readout ``[S, 3]`` before rotation (plane normal along z)."""
    if kind == "spiral-projection":
        # fastest point of an Archimedean spiral sets the Nyquist-limited sample count
        speed = np.sqrt(0.25 + (np.pi * turns) ** 2)
        samples = int(np.ceil(speed * grid))
        if samples > budget:
            raise ValueError(
                f"spiral with {turns} turns needs {samples} samples per readout "
                f"on a {grid} grid, over the budget of {budget}"
            )
        s = np.arange(samples) / samples
        radius = 0.5 * s
        angle = 2 * np.pi * turns * s
        return np.stack([radius * np.cos(angle), radius * np.sin(angle), 0 * s], axis=1)
    if kind == "radial-kooshball":
        if grid > budget:
            raise ValueError(f"spoke of {grid} samples exceeds the budget of {budget}")
        return np.stack([np.zeros(grid), np.zeros(grid), -0.5 + np.arange(grid) / grid], axis=1)
    raise ValueError(f"unknown trajectory kind {kind!r}, expected one of {TRAJECTORY_KINDS}")


def make_trajectory(
    grid: GridLike,
    n_tr: int,
    groups: int,
    kind: str = "spiral-projection",
    turns: float = 4.0,
    readout_budget: Optional[int] = None,
) -> Trajectory:
    """One readout per (TR, group), each rotated by its own 3D golden-angle step."""
    if groups < 1 or n_tr < 1:
        raise ValueError(f"groups and n_tr must be >= 1, got {groups}, {n_tr}")
    if kind == "cartesian":
        return cartesian_trajectory(grid, n_tr)
    size = max(as_grid(grid))
    budget = readout_budget if readout_budget is not None else 16 * size
    base = base_readout(kind, size, turns, budget)
    samples = base.shape[0]
    matrices = _rotations(n_tr, groups).as_matrix()
    rotated = np.einsum("rij,sj->rsi", matrices, base)
    # rotation index runs TR-major; reorder to group-major
    rotated = rotated.reshape(n_tr, groups, samples, 3).transpose(1, 0, 2, 3)
    coords = np.clip(rotated.reshape(-1, 3), -0.5, np.nextafter(0.5, 0))
    index_grids = np.meshgrid(
        np.arange(groups), np.arange(n_tr), np.arange(samples), indexing="ij"
    )
    group, tr, readout = (idx.reshape(-1) for idx in index_grids)
    LOGGER.info(f"{kind} trajectory: {n_tr} TRs x {groups} groups x {samples} samples")
    return Trajectory(coords, tr, group, readout, n_tr, groups, samples, kind)


def cartesian_trajectory(grid: GridLike, n_tr: int = 1) -> Trajectory:
    """Every Cartesian grid frequency at every TR (a single group)."""
    grid = as_grid(grid)
    axes = [(np.arange(n) - n // 2) / n for n in grid]
    points = np.stack([a.reshape(-1) for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    per_tr = points.shape[0]
    coords = np.tile(points, (n_tr, 1))
    tr = np.repeat(np.arange(n_tr), per_tr)
    return Trajectory(
        coords,
        tr,
        np.zeros(coords.shape[0], dtype=np.int64),
        np.tile(np.arange(per_tr), n_tr),
        n_tr,
        1,
        per_tr,
        "cartesian",
    )


def group_mask(traj: Trajectory, R: int) -> np.ndarray:
    """Samples of every ``R``-th retained group."""
    ids = traj.group_ids()
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    if R > ids.size:
        raise ValueError(f"R={R} exceeds the {ids.size} acquired groups")
    return np.isin(traj.group, ids[::R])


def undersample(traj: Trajectory, R: int) -> Trajectory:
    """Keep ``ceil(groups / R)`` groups by stride."""
    keep = group_mask(traj, R)
    return traj if R == 1 else traj.subset(keep)


@dataclass(frozen=True)
class CalibrationRegion:
    data: np.ndarray
    size: int

    @property
    def n_coils(self) -> int:
        return int(self.data.shape[0])


def make_calibration(
    coeffs: np.ndarray, coils: CoilMaps, size: int = CALIBRATION_SIZE, channel: int = 0
) -> CalibrationRegion:
    """Fully sampled central k-space block of the coil images of one coefficient map."""
    image = coils.maps * np.asarray(coeffs)[channel][None]
    kspace = fftc(torch.as_tensor(image)).numpy()
    grid = image.shape[1:]
    if size > min(grid):
        raise ValueError(f"calibration block {size} exceeds the grid {grid}")
    lo = [n // 2 - size // 2 for n in grid]
    block = kspace[:, lo[0] : lo[0] + size, lo[1] : lo[1] + size, lo[2] : lo[2] + size]
    return CalibrationRegion(np.ascontiguousarray(block), size)


@dataclass(frozen=True)
class AcquisitionSet:
    data: np.ndarray
    trajectory: Trajectory
    noise_sigma: float = 0.0
    seed: int = 0
    R: int = 1

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.trajectory.n_samples:
            raise ShapeError(
                f"data shape {self.data.shape} does not match "
                f"{self.trajectory.n_samples} trajectory samples"
            )

    @property
    def n_coils(self) -> int:
        return int(self.data.shape[0])

    def subset_groups(self, keep: np.ndarray, R: int) -> "AcquisitionSet":
        return replace(
            self, data=self.data[:, keep], trajectory=self.trajectory.subset(keep), R=R
        )

    def undersample(self, R: int) -> "AcquisitionSet":
        if R == 1:
            return self
        return self.subset_groups(group_mask(self.trajectory, R), R)


def complex_noise(rng: np.random.Generator, shape: Tuple[int, ...], sigma: float):
    """Circular complex white noise with ``E|n|^2 = sigma^2``."""
    real = rng.standard_normal(shape)
    imag = rng.standard_normal(shape)
    return sigma * (real + 1j * imag) / np.sqrt(2)


def identity_basis(n_tr: int) -> SubspaceBasis:
    """Basis whose coefficients are the timeseries themselves."""
    eye = np.eye(n_tr, dtype=np.complex128)
    return SubspaceBasis(eye, np.ones(n_tr), eye)


def sample_kspace(
    values: np.ndarray,
    coils: CoilMaps,
    traj: Trajectory,
    basis: SubspaceBasis,
    noise_sigma: float,
    seed: int,
    mode: str = "auto",
) -> AcquisitionSet:
    """Simulate coil k-space samples from coefficients ``[k, ...]`` or timeseries
    ``[N_TR, ...]`` plus complex white Gaussian noise.

    ``mode="auto"`` evaluates the exact DFT while voxels times samples stays within
    :data:`EXACT_WORK_LIMIT` and the gridding NUFFT beyond.
    """
    from .forward import ForwardOperator

    values = np.asarray(values, dtype=np.complex128)
    if traj.n_samples and traj.tr.max() >= basis.n_tr:
        raise ValueError(f"trajectory TR index {traj.tr.max()} >= N_TR {basis.n_tr}")
    if values.shape[0] == basis.k:
        op_basis = basis
    elif values.shape[0] == basis.n_tr:
        op_basis = identity_basis(basis.n_tr)
    else:
        raise ShapeError(
            f"leading extent {values.shape[0]} matches neither k={basis.k} "
            f"nor N_TR={basis.n_tr}"
        )
    grid = values.shape[1:]
    if mode == "auto":
        work = int(np.prod(grid)) * traj.n_samples
        mode = "exact-dft" if work <= EXACT_WORK_LIMIT else "nufft"
    op = ForwardOperator(traj, coils.maps, op_basis, mode=mode, self_check=False)
    clean = op.apply_numpy(values)
    rng = default_rng(seed)
    data = clean + complex_noise(rng, clean.shape, noise_sigma)
    LOGGER.info(
        f"sampled {traj.n_samples} points x {coils.n_coils} coils ({mode}), "
        f"noise sigma {noise_sigma:g}"
    )
    return AcquisitionSet(data, traj, float(noise_sigma), int(seed))


def save_acquisition(directory: Path, acq: AcquisitionSet):
    traj = acq.trajectory
    tensors = {
        "data": acq.data,
        "coords": traj.coords,
        "tr": traj.tr,
        "group": traj.group,
        "readout": traj.readout,
    }
    manifest = {
        "kind": "acquisition",
        "R": acq.R,
        "noise_sigma": acq.noise_sigma,
        "seed": acq.seed,
        "n_tr": traj.n_tr,
        "groups": traj.groups,
        "samples_per_readout": traj.samples_per_readout,
        "trajectory": traj.kind,
    }
    save_bundle(directory, tensors, manifest)


def load_acquisition(directory: Path) -> AcquisitionSet:
    tensors, manifest = load_bundle(directory, "acquire")
    traj = Trajectory(
        tensors["coords"],
        tensors["tr"],
        tensors["group"],
        tensors["readout"],
        manifest["n_tr"],
        manifest["groups"],
        manifest["samples_per_readout"],
        manifest["trajectory"],
    )
    return AcquisitionSet(
        tensors["data"], traj, manifest["noise_sigma"], manifest["seed"], manifest["R"]
    )
