"""Synthetic head phantoms, coil sensitivities and ground-truth coefficient volumes."""
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .sequence import SequenceSchedule, SignalDictionary, simulate_batch
from .shared import default_rng, warning_suffix
from .storage import load_bundle, save_bundle
from .subspace import SubspaceBasis, project

LOGGER = getLogger(__name__)

BACKGROUND, WM, GM, CSF, LESION = 0, 1, 2, 3, 4
LABEL_NAMES = {BACKGROUND: "background", WM: "wm", GM: "gm", CSF: "csf", LESION: "lesion"}

#: default T1 / T2 (ms) and proton density per tissue
TISSUE_DEFAULTS: Dict[str, Dict[str, float]] = {
    "wm": {"t1": 800.0, "t2": 70.0, "pd": 0.7},
    "gm": {"t1": 1300.0, "t2": 90.0, "pd": 0.8},
    "csf": {"t1": 4000.0, "t2": 1800.0, "pd": 1.0},
    "lesion": {"t1": 1150.0, "t2": 110.0, "pd": 0.85},
}

#: shell boundaries in normalized ellipsoidal radius
CSF_CORE, WM_OUTER, GM_OUTER, HEAD_OUTER = 0.3, 0.7, 0.9, 1.0
SEMI_AXES = (0.78, 0.9, 0.72)
BOUNDARY_JITTER = 0.03
VALUE_JITTER = 0.05
B1_RANGE = (0.85, 1.15)
LESION_RADIUS = 0.08
LESION_ATTEMPTS = 100
RSS_FLOOR = 0.2
#: coil maps keep no energy above this many cycles/voxel
BAND_LIMIT = 0.125
BOOST_ROUNDS = 4
MIN_GRID = 16

GridLike = Union[int, Tuple[int, int, int]]


def as_grid(grid: GridLike) -> Tuple[int, int, int]:
    if isinstance(grid, (int, np.integer)):
        return (int(grid),) * 3
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3:
        raise ValueError(f"grid must have three extents, got {grid}")
    return grid  # type: ignore[return-value]


def normalized_coords(grid: Tuple[int, int, int]):
    """Voxel-center coordinates scaled to [-1, 1] along every axis."""
    axes = [(np.arange(n) - n / 2 + 0.5) / (n / 2) for n in grid]
    return np.meshgrid(*axes, indexing="ij")


def smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean random field smoothed by a Gaussian and scaled to [-1, 1]."""
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    noise -= noise.mean()
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


@dataclass
class Phantom:
    labels: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    pd: np.ndarray
    b1: np.ndarray
    seed: int
    lesion_count: int = 0
    tissues: Dict[str, Dict[str, float]] = field(default_factory=lambda: TISSUE_DEFAULTS)

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)  # type: ignore[return-value]

    def brain_mask(self) -> np.ndarray:
        """WM, GM and lesion voxels: the region metrics are reported on."""
        return np.isin(self.labels, (WM, GM, LESION))

    def tissue_masks(self) -> Dict[str, np.ndarray]:
        """Disjoint masks for the tissue-weighted loss; lesions count as WM."""
        return {
            "wm": np.isin(self.labels, (WM, LESION)),
            "gm": self.labels == GM,
            "csf": self.labels == CSF,
        }

    def fractions(self) -> Dict[str, float]:
        head = self.labels != BACKGROUND
        total = float(head.sum())
        return {name: float(mask.sum()) / total for name, mask in self.tissue_masks().items()}

    @staticmethod
    def target_fractions() -> Dict[str, float]:
        """Tissue shares of the head implied by the unperturbed shell radii."""
        head = HEAD_OUTER**3
        return {
            "wm": (WM_OUTER**3 - CSF_CORE**3) / head,
            "gm": (GM_OUTER**3 - WM_OUTER**3) / head,
            "csf": (CSF_CORE**3 + HEAD_OUTER**3 - GM_OUTER**3) / head,
        }

    def validate(self):
        if not (self.labels.shape == self.t1.shape == self.t2.shape == self.pd.shape):
            raise ValueError("phantom maps must share the label grid")
        if np.any(self.pd[self.labels == BACKGROUND] != 0):
            raise ValueError("background must have zero proton density")
        tissue = self.pd > 0
        if np.any(self.t2[tissue] > self.t1[tissue]):
            raise ValueError("phantom draw violates T2 <= T1")


def lesion_center(rng: np.random.Generator) -> Optional[np.ndarray]:
    """Draw a centre inside the white-matter band, or ``None`` if every draw misses."""
    for _ in range(LESION_ATTEMPTS):
        center = rng.uniform(-1, 1, size=3) * np.array(SEMI_AXES) * 0.6
        r = np.sqrt(sum((ci / si) ** 2 for ci, si in zip(center, SEMI_AXES)))
        if 0.4 <= r <= 0.6:
            return center
    return None


def make_phantom(
    seed: int,
    grid: GridLike = 48,
    lesion_count: int = 0,
    tissues: Optional[Dict[str, Dict[str, float]]] = None,
) -> Phantom:
    """Concentric smoothed ellipsoid shells: CSF core, WM, GM ribbon and CSF rim."""
    grid = as_grid(grid)
    if min(grid) < MIN_GRID:
        raise ValueError(f"grid {grid} is smaller than {MIN_GRID}^3")
    if lesion_count < 0:
        raise ValueError(f"lesion_count must be >= 0, got {lesion_count}")
    tissues = tissues or TISSUE_DEFAULTS
    rng = default_rng(seed)
    x, y, z = normalized_coords(grid)
    a, b, c = SEMI_AXES
    radius = np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)
    sigma = min(grid) / 8
    radius = radius * (1 + BOUNDARY_JITTER * smooth_field(rng, grid, sigma))

    labels = np.full(grid, BACKGROUND, dtype=np.int64)
    labels[radius < HEAD_OUTER] = CSF
    labels[radius < GM_OUTER] = GM
    labels[radius < WM_OUTER] = WM
    labels[radius < CSF_CORE] = CSF

    for number in range(lesion_count):
        center = lesion_center(rng)
        if center is None:
            LOGGER.warning(
                f"lesion {number} of phantom seed={seed} found no white-matter site in "
                f"{LESION_ATTEMPTS} draws, skipped {warning_suffix('phantom')}"
            )
            continue
        dist = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
        labels[(dist < LESION_RADIUS) & (labels == WM)] = LESION

    t1 = np.zeros(grid)
    t2 = np.zeros(grid)
    pd = np.zeros(grid)
    for label, name in LABEL_NAMES.items():
        if label == BACKGROUND:
            continue
        mask = labels == label
        values = tissues[name]
        t1[mask] = values["t1"]
        t2[mask] = values["t2"]
        pd[mask] = values["pd"]
    t1 *= 1 + VALUE_JITTER * smooth_field(rng, grid, sigma)
    t2 *= 1 + VALUE_JITTER * smooth_field(rng, grid, sigma)
    pd *= 1 + VALUE_JITTER * smooth_field(rng, grid, sigma)
    low, high = B1_RANGE
    b1 = (low + high) / 2 + (high - low) / 2 * smooth_field(rng, grid, min(grid) / 4)

    phantom = Phantom(labels, t1, t2, pd, b1, seed, lesion_count, dict(tissues))
    phantom.validate()
    LOGGER.info(f"phantom seed={seed} grid={grid} fractions={phantom.fractions()}")
    return phantom


@dataclass
class CoilMaps:
    maps: np.ndarray

    @property
    def n_coils(self) -> int:
        return int(self.maps.shape[0])

    def rss(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.maps) ** 2, axis=0))


def lowpass(volume: np.ndarray, cutoff: float) -> np.ndarray:
    """Zero every spatial frequency above ``cutoff`` cycles/voxel along any axis."""
    spectrum = np.fft.fftn(volume, axes=(-3, -2, -1))
    keep = np.ones(volume.shape[-3:], dtype=bool)
    for axis, n in enumerate(volume.shape[-3:]):
        freq = np.abs(np.fft.fftfreq(n))
        shape = [1, 1, 1]
        shape[axis] = n
        keep &= (freq <= cutoff).reshape(shape)
    return np.fft.ifftn(spectrum * keep, axes=(-3, -2, -1))


def high_frequency_fraction(volume: np.ndarray, cutoff: float = 0.125) -> float:
    """Share of spectral energy above ``cutoff`` cycles/voxel along any axis."""
    spectrum = np.abs(np.fft.fftn(volume)) ** 2
    keep = np.ones(volume.shape, dtype=bool)
    for axis, n in enumerate(volume.shape):
        freq = np.abs(np.fft.fftfreq(n))
        shape = [1] * volume.ndim
        shape[axis] = n
        keep &= (freq <= cutoff).reshape(shape)
    total = spectrum.sum()
    return float(spectrum[~keep].sum() / total) if total > 0 else 0.0


def _sphere_points(count: int, rng: np.random.Generator) -> np.ndarray:
    """Fibonacci points on the unit sphere under a random rotation."""
    i = np.arange(count) + 0.5
    polar = np.arccos(1 - 2 * i / count)
    azimuth = np.pi * (1 + 5**0.5) * i
    points = np.stack(
        [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)],
        axis=1,
    )
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    return points @ q.T


def object_mask(grid: GridLike) -> np.ndarray:
    """Region enclosed by the outer head shell (with jitter margin)."""
    x, y, z = normalized_coords(as_grid(grid))
    a, b, c = SEMI_AXES
    radius = np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)
    return radius < HEAD_OUTER * (1 + BOUNDARY_JITTER)


def make_coils(
    seed: int,
    grid: GridLike,
    n_coils: int,
    width: float = 1.0,
    center_radius: float = 1.5,
    mask: Optional[np.ndarray] = None,
) -> CoilMaps:
    """Gaussian-profile coils with a low-order complex polynomial modulation.

    Maps are bandlimited to a quarter of Nyquist and scaled so the RSS peaks at 1 inside
    the object while never dropping under ``RSS_FLOOR`` there.
    """
    grid = as_grid(grid)
    if n_coils < 1:
        raise ValueError(f"coil count must be >= 1, got {n_coils}")
    if n_coils == 1:
        return CoilMaps(np.ones((1,) + grid, dtype=np.complex128))
    rng = default_rng(seed)
    x, y, z = normalized_coords(grid)
    coords = np.stack([x, y, z])
    centers = center_radius * _sphere_points(n_coils, rng)
    maps = np.empty((n_coils,) + grid, dtype=np.complex128)
    for c, center in enumerate(centers):
        dist2 = np.sum((coords - center[:, None, None, None]) ** 2, axis=0)
        profile = np.exp(-dist2 / (2 * width**2))
        phase = rng.uniform(0, 2 * np.pi) + np.tensordot(
            rng.uniform(-0.4, 0.4, size=3), coords, axes=(0, 0)
        )
        gain = 1 + np.tensordot(rng.uniform(-0.1, 0.1, size=3), coords, axes=(0, 0))
        maps[c] = profile * gain * np.exp(1j * phase)
    maps = lowpass(maps, 1 / 16)
    inside = object_mask(grid) if mask is None else mask
    coils = CoilMaps(maps)
    rss = coils.rss()
    coils.maps /= rss[inside].max()
    for _round in range(BOOST_ROUNDS):
        rss = coils.rss()
        if rss[inside].min() >= RSS_FLOOR:
            break
        boost = np.where(inside, np.maximum(1.0, 1.25 * RSS_FLOOR / np.maximum(rss, 1e-12)), 1.0)
        boost = lowpass(boost, 1 / 16).real
        coils.maps = lowpass(coils.maps * boost, BAND_LIMIT)
        coils.maps /= coils.rss()[inside].max()
        LOGGER.info(f"coil sensitivities boosted to the RSS floor {warning_suffix('coils')}")
    floor = float(coils.rss()[inside].min())
    if floor < RSS_FLOOR:
        LOGGER.warning(f"coil RSS floor {floor:.3f} below {RSS_FLOOR} {warning_suffix('coils')}")
    return coils


def ground_truth_coeffs(
    phantom: Phantom,
    sched: SequenceSchedule,
    basis: SubspaceBasis,
    dictionary: Optional[SignalDictionary] = None,
    chunk: int = 8192,
) -> np.ndarray:
    """Simulate every tissue voxel, scale by proton density and project on the basis."""
    if basis.n_tr != sched.n_tr:
        raise ValueError(f"basis has {basis.n_tr} TRs, schedule has {sched.n_tr}")
    tissue = np.flatnonzero(phantom.pd.reshape(-1) > 0)
    t1 = phantom.t1.reshape(-1)[tissue]
    t2 = phantom.t2.reshape(-1)[tissue]
    b1 = phantom.b1.reshape(-1)[tissue]
    pd = phantom.pd.reshape(-1)[tissue]
    if dictionary is not None:
        (t1_lo, t1_hi), (t2_lo, t2_hi), (b1_lo, b1_hi) = dictionary.hull()
        outside = (t1 < t1_lo) | (t1 > t1_hi) | (t2 < t2_lo) | (t2 > t2_hi)
        outside |= (b1 < b1_lo) | (b1 > b1_hi)
        if np.any(outside):
            LOGGER.warning(
                f"{int(outside.sum())} phantom voxels lie outside the dictionary range "
                f"{warning_suffix('phantom')}"
            )
    coeffs = np.zeros((basis.k, tissue.size), dtype=np.complex128)
    for start in range(0, tissue.size, chunk):
        stop = start + chunk
        signals = simulate_batch(t1[start:stop], t2[start:stop], b1[start:stop], sched)
        coeffs[:, start:stop] = project(signals.T * pd[start:stop], basis)
    volume = np.zeros((basis.k, int(np.prod(phantom.grid))), dtype=np.complex128)
    volume[:, tissue] = coeffs
    return volume.reshape((basis.k,) + phantom.grid)


def save_phantom(directory: Path, phantom: Phantom, coils: Optional[CoilMaps] = None):
    tensors = {
        "labels": phantom.labels,
        "t1": phantom.t1,
        "t2": phantom.t2,
        "pd": phantom.pd,
        "b1": phantom.b1,
    }
    if coils is not None:
        tensors["coils"] = coils.maps
    manifest = {
        "kind": "phantom",
        "seed": phantom.seed,
        "grid": list(phantom.grid),
        "lesion_count": phantom.lesion_count,
        "tissues": phantom.tissues,
    }
    save_bundle(directory, tensors, manifest)


def load_phantom(directory: Path) -> Tuple[Phantom, Optional[CoilMaps]]:
    tensors, manifest = load_bundle(directory, "make-phantom")
    phantom = Phantom(
        tensors["labels"],
        tensors["t1"],
        tensors["t2"],
        tensors["pd"],
        tensors["b1"],
        manifest["seed"],
        manifest["lesion_count"],
        manifest["tissues"],
    )
    coils = CoilMaps(tensors["coils"]) if "coils" in tensors else None
    return phantom, coils
