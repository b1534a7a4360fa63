"""Implicit GRAPPA-like gridding.

A small coordinate network maps the offsets from ``n`` acquired source samples to a
Cartesian target point onto a complex coil-mixing matrix. The network is fitted to
the fully sampled calibration block, then used to move every acquired TR stream onto
an oversampled Cartesian grid so data consistency runs on plain FFTs.
"""
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
import time
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
import torch
from torch import nn

from .autodiff import (
    COMPLEX_DTYPE,
    REAL_DTYPE,
    adam_step,
    ifftc,
    load_state_arrays,
    make_optimizer,
    seeded,
    state_arrays,
)
from .forward import ForwardOperator
from .nufft import oversampled_grid
from .phantom import GridLike, as_grid
from .sampling import AcquisitionSet, CalibrationRegion, Trajectory
from .shared import ShapeError, default_rng
from .storage import load_bundle, save_bundle
from .subspace import SubspaceBasis

LOGGER = getLogger(__name__)

DEFAULT_SOURCES = 5
DEFAULT_OVERSAMPLING = 1.5
HIDDEN_UNITS = 64
TRAINING_STEPS = 2000
BATCH_SIZE = 256
POOL_SIZE = 8192
VALIDATION_SIZE = 1024
#: half-width (cells) of the uniform offset cloud used for part of the training sets
OFFSET_RANGE = 2.0
#: scale applied to the default initialization of the output layer
OUTPUT_INIT_SCALE = 1e-2


@dataclass
class KernelTrainingLog:
    losses: List[float] = field(default_factory=list)
    initial_validation: float = float("nan")
    final_validation: float = float("nan")
    seconds: float = 0.0
    steps: int = 0
    seed: int = 0


class ImplicitKernel(nn.Module):
    """MLP from ``n`` concatenated 3D offsets (base-grid cells) to a ``[C, n*C]`` complex
    coil-mixing matrix.

    The output layer starts close to the averaging kernel ``W = [I, ..., I] / n``.
    """

    def __init__(
        self,
        n_coils: int,
        n: int = DEFAULT_SOURCES,
        oversampling: float = DEFAULT_OVERSAMPLING,
        hidden: int = HIDDEN_UNITS,
    ):
        super().__init__()
        if n < 1:
            raise ValueError(f"source count must be >= 1, got {n}")
        if oversampling < 1:
            raise ValueError(f"oversampling must be >= 1, got {oversampling}")
        if n_coils < 1:
            raise ValueError(f"coil count must be >= 1, got {n_coils}")
        self.n_coils = int(n_coils)
        self.n = int(n)
        self.oversampling = float(oversampling)
        self.hidden = int(hidden)
        outputs = 2 * self.n_coils * self.n * self.n_coils
        self.net = nn.Sequential(
            nn.Linear(3 * self.n, self.hidden),
            nn.SiLU(),
            nn.Linear(self.hidden, self.hidden),
            nn.SiLU(),
            nn.Linear(self.hidden, outputs),
        )
        self.to(REAL_DTYPE)
        last = self.net[-1]
        with torch.no_grad():
            last.weight.mul_(OUTPUT_INIT_SCALE)
            identity = torch.zeros((2, self.n_coils, self.n, self.n_coils), dtype=REAL_DTYPE)
            for c in range(self.n_coils):
                identity[0, c, :, c] = 1.0 / self.n
            last.bias.copy_(identity.reshape(-1))
        self.log: Optional[KernelTrainingLog] = None

    def forward(self, offsets: torch.Tensor) -> torch.Tensor:
        if offsets.shape[1:] != (self.n, 3):
            raise ShapeError(
                f"offsets must be [B, {self.n}, 3], got {tuple(offsets.shape)}"
            )
        out = self.net(offsets.reshape(offsets.shape[0], -1))
        out = out.reshape(-1, 2, self.n_coils, self.n * self.n_coils)
        return torch.complex(out[:, 0], out[:, 1])

    def interpolate(self, offsets: torch.Tensor, sources: torch.Tensor) -> torch.Tensor:
        """Target values ``[B, C]`` from source values ``[B, n, C]``."""
        weights = self(offsets)
        flat = sources.reshape(sources.shape[0], self.n * self.n_coils)
        return torch.einsum("bcs,bs->bc", weights, flat)


def calibration_images(calib: CalibrationRegion) -> np.ndarray:
    """Low-resolution coil images whose spectrum is the calibration block."""
    data = np.asarray(calib.data)
    if not np.any(data):
        raise ValueError("calibration block is all zero")
    return ifftc(torch.as_tensor(data, dtype=COMPLEX_DTYPE)).numpy()


def evaluate_calibration(images: np.ndarray, points: np.ndarray, chunk: int = 4096):
    """Trigonometric interpolation of the calibration spectrum at ``points`` [P, 3]
    (cells, zero frequency at the origin). Returns ``[P, C]``."""
    size = images.shape[1]
    x = np.arange(size) - size // 2
    out = np.empty((points.shape[0], images.shape[0]), dtype=np.complex128)
    for start in range(0, points.shape[0], chunk):
        p = points[start : start + chunk]
        ex, ey, ez = (np.exp(-2j * np.pi * np.outer(p[:, a], x) / size) for a in range(3))
        part = np.einsum("cxyz,pz->cxyp", images, ez)
        part = np.einsum("cxyp,py->cxp", part, ey)
        out[start : start + chunk] = np.einsum("cxp,px->pc", part, ex)
    return out / size**1.5


def _sort_by_distance(offsets: np.ndarray) -> np.ndarray:
    order = np.argsort(np.linalg.norm(offsets, axis=-1), axis=1, kind="stable")
    return np.take_along_axis(offsets, order[..., None], axis=1)


def offset_sets(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    """Random source-offset sets ``[count, n, 3]`` sorted by distance.

    Half of the sets are readout-like (samples along a line passing near the target),
    the rest uniform in a cube of half-width :data:`OFFSET_RANGE`.
    """
    lines = count // 2
    direction = rng.standard_normal((lines, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    spacing = rng.uniform(0.2, 1.0, (lines, 1))
    shift = rng.uniform(-0.5, 0.5, (lines, 1))
    perp = rng.standard_normal((lines, 3))
    perp -= np.sum(perp * direction, axis=1, keepdims=True) * direction
    perp *= rng.uniform(0, 0.6, (lines, 1)) / np.maximum(
        np.linalg.norm(perp, axis=1, keepdims=True), 1e-12
    )
    steps = np.arange(-n, n + 1) + shift
    along = (steps * spacing)[..., None] * direction[:, None, :]
    candidates = -(along + perp[:, None, :])
    line_sets = _sort_by_distance(candidates)[:, :n]
    cube = rng.uniform(-OFFSET_RANGE, OFFSET_RANGE, (count - lines, n, 3))
    sets = np.concatenate([line_sets, _sort_by_distance(cube)], axis=0)
    return sets[rng.permutation(count)]


def training_pairs(
    images: np.ndarray, n: int, count: int, rng: np.random.Generator, zero_offsets: bool
):
    """Synthetic ``(offsets, sources, targets)`` pairs inside the calibration block."""
    size = images.shape[1]
    half = max(size / 2 - 3, 0.5)
    targets = rng.uniform(-half, half, (count, 3))
    if zero_offsets:
        offsets = np.zeros((count, n, 3))
    else:
        offsets = offset_sets(rng, count, n)
    points = np.concatenate([targets[:, None, :], targets[:, None, :] - offsets], axis=1)
    values = evaluate_calibration(images, points.reshape(-1, 3)).reshape(count, n + 1, -1)
    return offsets, values[:, 1:], values[:, 0]


def _nrmse2(kernel: ImplicitKernel, offsets, sources, targets) -> torch.Tensor:
    pred = kernel.interpolate(offsets, sources)
    return torch.mean(torch.abs(pred - targets) ** 2) / torch.mean(torch.abs(targets) ** 2)


def train_kernel(
    calib: CalibrationRegion,
    n: int = DEFAULT_SOURCES,
    seed: int = 0,
    oversampling: float = DEFAULT_OVERSAMPLING,
    steps: int = TRAINING_STEPS,
    lr: float = 1e-3,
    batch: int = BATCH_SIZE,
    zero_offsets: bool = False,
    hidden: int = HIDDEN_UNITS,
) -> ImplicitKernel:
    """Fit the kernel by regression on calibration pairs; deterministic per ``seed``.

    The loss is the squared complex error normalized by the target energy; the learning
    rate follows a cosine decay over the fixed step budget.
    """
    if calib.size < n + 3:
        raise ValueError(f"calibration block {calib.size} is smaller than n + 3 = {n + 3}")
    images = calibration_images(calib)
    rng = default_rng(seed)
    pool = training_pairs(images, n, POOL_SIZE, rng, zero_offsets)
    held_out = training_pairs(images, n, VALIDATION_SIZE, rng, zero_offsets)
    scale = np.sqrt(np.mean(np.abs(pool[2]) ** 2))
    pool = [torch.as_tensor(a / (1.0 if i == 0 else scale)) for i, a in enumerate(pool)]
    held_out = [
        torch.as_tensor(a / (1.0 if i == 0 else scale)) for i, a in enumerate(held_out)
    ]
    with seeded(seed):
        kernel = ImplicitKernel(calib.n_coils, n, oversampling, hidden)
    log = KernelTrainingLog(steps=steps, seed=seed)
    with torch.no_grad():
        log.initial_validation = float(torch.sqrt(_nrmse2(kernel, *held_out)))
    optimizer = make_optimizer(kernel.parameters(), lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(steps, 1), eta_min=lr * 1e-3
    )
    start = time.perf_counter()
    for _ in range(steps):
        pick = torch.as_tensor(rng.integers(0, POOL_SIZE, batch))
        loss = _nrmse2(kernel, *(a[pick] for a in pool))
        loss.backward()
        adam_step(optimizer)
        schedule.step()
        log.losses.append(loss.item())
    log.seconds = time.perf_counter() - start
    with torch.no_grad():
        log.final_validation = float(torch.sqrt(_nrmse2(kernel, *held_out)))
    kernel.log = log
    LOGGER.info(
        f"kernel n={n} trained in {log.seconds:.1f}s, validation NRMSE "
        f"{log.initial_validation:.4f} -> {log.final_validation:.4f}"
    )
    return kernel


@dataclass(frozen=True)
class GriddedAcquisition:
    """Gridded values ``data`` [C, T] at flat oversampled-grid indices, per TR."""

    target_index: np.ndarray
    tr: np.ndarray
    data: np.ndarray
    grid: Tuple[int, int, int]
    big: Tuple[int, int, int]
    n_tr: int
    source_count: int

    def __post_init__(self):
        t = self.target_index.shape[0]
        if self.tr.shape != (t,) or self.data.ndim != 2 or self.data.shape[1] != t:
            raise ShapeError(
                f"gridded data {self.data.shape} does not match {t} target indices"
            )

    @property
    def n_targets(self) -> int:
        return int(self.target_index.shape[0])

    @property
    def n_coils(self) -> int:
        return int(self.data.shape[0])

    def occupancy(self, tr: Optional[int] = None) -> np.ndarray:
        """Boolean mask over the oversampled grid (all TRs, or one TR)."""
        mask = np.zeros(int(np.prod(self.big)), dtype=bool)
        index = self.target_index if tr is None else self.target_index[self.tr == tr]
        mask[index] = True
        return mask.reshape(self.big)

    def coords(self) -> np.ndarray:
        big = np.asarray(self.big)
        cells = np.stack(np.unravel_index(self.target_index, self.big), axis=1)
        return (cells - big // 2) / big

    def as_trajectory(self) -> Trajectory:
        zeros = np.zeros(self.n_targets, dtype=np.int64)
        return Trajectory(
            self.coords(),
            self.tr,
            zeros,
            np.arange(self.n_targets, dtype=np.int64),
            self.n_tr,
            1,
            self.n_targets,
            "cartesian",
        )


def _nearest_sources(tree: cKDTree, points: np.ndarray, n: int, available: int):
    """``n`` nearest sources per point, ties broken by lowest sample index."""
    query = min(n + 2, available)
    dist, nb = tree.query(points, k=query)
    dist = dist.reshape(points.shape[0], query)
    nb = nb.reshape(points.shape[0], query)
    order = np.lexsort((nb, np.round(dist, 12)), axis=-1)
    return (
        np.take_along_axis(dist, order, axis=-1)[:, :n],
        np.take_along_axis(nb, order, axis=-1)[:, :n],
    )


def grid(
    kernel: ImplicitKernel,
    acq: AcquisitionSet,
    grid_shape: GridLike,
    oversampling: Optional[float] = None,
    chunk: int = 16384,
) -> GriddedAcquisition:
    """Interpolate every TR stream onto the oversampled Cartesian grid.

    Targets are the grid points nearest to the stream's samples; each is interpolated
    from the ``n`` nearest samples of the same TR.
    """
    traj = acq.trajectory
    if traj.n_samples == 0:
        raise ValueError("cannot grid an empty acquisition")
    if acq.n_coils != kernel.n_coils:
        raise ShapeError(f"acquisition has {acq.n_coils} coils, kernel {kernel.n_coils}")
    shape = as_grid(grid_shape)
    if oversampling is None:
        oversampling = kernel.oversampling
    big = oversampled_grid(shape, oversampling)
    n_arr, m_arr = np.asarray(shape), np.asarray(big)
    cell = float(np.max(n_arr / m_arr))
    cells = traj.coords * n_arr
    n = kernel.n
    indices, trs, values = [], [], []
    for t in np.unique(traj.tr):
        idx = np.flatnonzero(traj.tr == t)
        if idx.size < n:
            raise ValueError(f"TR {t} has {idx.size} samples, the kernel needs {n}")
        j = np.rint(traj.coords[idx] * m_arr).astype(np.int64)
        j = np.clip(j, -(m_arr // 2), m_arr // 2 - 1)
        targets = np.unique(np.ravel_multi_index(tuple((j + m_arr // 2).T), big))
        target_cells = (np.stack(np.unravel_index(targets, big), axis=1) - m_arr // 2) / m_arr
        target_cells = target_cells * n_arr
        dist, nb = _nearest_sources(cKDTree(cells[idx]), target_cells, n, idx.size)
        keep = dist[:, 0] <= cell * (1 + 1e-9)
        targets, target_cells, nb = targets[keep], target_cells[keep], nb[keep]
        sources = idx[nb]
        offsets = target_cells[:, None, :] - cells[sources]
        src = np.transpose(acq.data[:, sources], (1, 2, 0))
        out = np.empty((acq.n_coils, targets.size), dtype=np.complex128)
        with torch.no_grad():
            for start in range(0, targets.size, chunk):
                sl = slice(start, start + chunk)
                part = kernel.interpolate(
                    torch.as_tensor(offsets[sl]), torch.as_tensor(src[sl])
                )
                out[:, sl] = part.numpy().T
        indices.append(targets)
        trs.append(np.full(targets.size, t, dtype=np.int64))
        values.append(out)
    gridded = GriddedAcquisition(
        np.concatenate(indices),
        np.concatenate(trs),
        np.concatenate(values, axis=1),
        shape,
        big,
        traj.n_tr,
        traj.n_samples,
    )
    LOGGER.info(
        f"gridded {traj.n_samples} samples onto {gridded.n_targets} targets of {big}"
    )
    return gridded


def fft_dc_operator(
    gridded: GriddedAcquisition, coils, basis: SubspaceBasis, self_check: bool = True
) -> ForwardOperator:
    """Masked-FFT forward operator on the gridded targets (cropped-grid scaling)."""
    return ForwardOperator(
        gridded.as_trajectory(),
        coils,
        basis,
        mode="cartesian-fft",
        cartesian_grid=gridded.big,
        self_check=self_check,
    )


def time_dc_iteration(
    op: ForwardOperator,
    coeffs: torch.Tensor,
    data: torch.Tensor,
    step: float = 1.0,
    repeats: int = 3,
) -> float:
    """Median wall time (s) of one update ``x - step * (A^H A x - A^H b)``."""
    times = []
    with torch.no_grad():
        normal_b = op.normal(data)
        for _ in range(repeats):
            start = time.perf_counter()
            coeffs = coeffs - step * (op.gram(coeffs) - normal_b)
            times.append(time.perf_counter() - start)
    return float(np.median(times))


def save_kernel(directory: Path, kernel: ImplicitKernel):
    log = kernel.log or KernelTrainingLog()
    tensors = dict(state_arrays(kernel))
    tensors["losses"] = np.asarray(log.losses, dtype=np.float64)
    manifest = {
        "kind": "kernel",
        "n": kernel.n,
        "n_coils": kernel.n_coils,
        "oversampling": kernel.oversampling,
        "hidden": kernel.hidden,
        "seed": log.seed,
        "steps": log.steps,
        "initial_validation": log.initial_validation,
        "final_validation": log.final_validation,
        "seconds": log.seconds,
    }
    save_bundle(directory, tensors, manifest)


def load_kernel(directory: Path) -> ImplicitKernel:
    tensors, manifest = load_bundle(directory, "grid")
    kernel = ImplicitKernel(
        manifest["n_coils"], manifest["n"], manifest["oversampling"], manifest["hidden"]
    )
    losses = tensors.pop("losses", np.zeros(0))
    load_state_arrays(kernel, tensors)
    kernel.log = KernelTrainingLog(
        list(np.asarray(losses, dtype=float)),
        manifest["initial_validation"],
        manifest["final_validation"],
        manifest["seconds"],
        manifest["steps"],
        manifest["seed"],
    )
    return kernel


def save_gridded(directory: Path, gridded: GriddedAcquisition):
    tensors = {"target_index": gridded.target_index, "tr": gridded.tr, "data": gridded.data}
    manifest = {
        "kind": "gridded",
        "grid": list(gridded.grid),
        "big": list(gridded.big),
        "n_tr": gridded.n_tr,
        "source_count": gridded.source_count,
    }
    save_bundle(directory, tensors, manifest)


def load_gridded(directory: Path) -> GriddedAcquisition:
    tensors, manifest = load_bundle(directory, "grid")
    return GriddedAcquisition(
        tensors["target_index"],
        tensors["tr"],
        tensors["data"],
        tuple(manifest["grid"]),
        tuple(manifest["big"]),
        manifest["n_tr"],
        manifest["source_count"],
    )
