"""FISP fingerprint simulation with extended phase graphs, dictionary generation and
dictionary matching.
"""
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .shared import ShapeError, warning_suffix
from .storage import load_bundle, save_bundle, write_csv

LOGGER = getLogger(__name__)

#: retained dephasing orders
EPG_STATES = 60

#: atoms simulated per vectorized batch
SIM_CHUNK = 2048


@dataclass(frozen=True)
class SequenceSchedule:
    """Per-TR flip angles (degrees) and timings (ms) of an inversion-prepared FISP train."""

    flip_angles: np.ndarray
    tr_ms: np.ndarray
    te_ms: np.ndarray
    ti_ms: float = 20.0
    inversion: bool = True
    states: int = field(default=EPG_STATES)

    def __post_init__(self):
        fa = np.asarray(self.flip_angles, dtype=np.float64).reshape(-1)
        tr = np.broadcast_to(np.asarray(self.tr_ms, dtype=np.float64), fa.shape).copy()
        te = np.broadcast_to(np.asarray(self.te_ms, dtype=np.float64), fa.shape).copy()
        object.__setattr__(self, "flip_angles", fa)
        object.__setattr__(self, "tr_ms", tr)
        object.__setattr__(self, "te_ms", te)
        if fa.size == 0:
            raise ValueError("schedule needs at least one TR")
        if np.any(fa < 0) or np.any(fa > 180):
            raise ValueError("flip angles must lie in [0, 180] degrees")
        if np.any(tr <= 0) or np.any(te <= 0) or self.ti_ms <= 0:
            raise ValueError("all timings must be > 0")
        if np.any(te >= tr):
            raise ValueError("TE must be shorter than TR")
        if self.states < 1:
            raise ValueError(f"states must be >= 1, got {self.states}")

    @property
    def n_tr(self) -> int:
        return int(self.flip_angles.size)

    @classmethod
    def default(
        cls,
        n_tr: int = 200,
        fa_min: float = 10.0,
        fa_max: float = 70.0,
        half_period: int = 100,
        tr_ms: float = 12.5,
        te_ms: float = 1.7,
        ti_ms: float = 20.0,
    ) -> "SequenceSchedule":
        """Sinusoidal-ramp flip angle train with constant timing."""
        t = np.arange(n_tr, dtype=np.float64)
        fa = fa_min + (fa_max - fa_min) * np.sin(np.pi * t / half_period) ** 2
        return cls(fa, np.full(n_tr, tr_ms), np.full(n_tr, te_ms), ti_ms=ti_ms)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "flip_angles": self.flip_angles,
            "tr_ms": self.tr_ms,
            "te_ms": self.te_ms,
        }


class DictionaryAtom(NamedTuple):
    t1_ms: float
    t2_ms: float
    b1: float


def check_atom(atom: DictionaryAtom):
    if atom.t1_ms <= 0 or atom.t2_ms <= 0:
        raise ValueError(f"relaxation times must be > 0: {atom}")
    if atom.t2_ms > atom.t1_ms:
        raise ValueError(f"T2 ({atom.t2_ms}) exceeds T1 ({atom.t1_ms})")
    if atom.b1 <= 0:
        raise ValueError(f"B1 must be > 0: {atom}")


def _rf_rotate(fp, fm, z, alpha):
    """Apply a real-axis rotation by ``alpha`` (radians, one per atom) to all orders."""
    alpha = alpha[:, None]
    cos2 = np.cos(alpha / 2) ** 2
    sin2 = np.sin(alpha / 2) ** 2
    sin = np.sin(alpha)
    cos = np.cos(alpha)
    new_fp = cos2 * fp + sin2 * fm - 1j * sin * z
    new_fm = sin2 * fp + cos2 * fm + 1j * sin * z
    new_z = -0.5j * sin * fp + 0.5j * sin * fm + cos * z
    return new_fp, new_fm, new_z


def _relax(fp, fm, z, tau, t1, t2):
    e1 = np.exp(-tau / t1)[:, None]
    e2 = np.exp(-tau / t2)[:, None]
    z = z * e1
    z[:, 0] += 1.0 - e1[:, 0]
    return fp * e2, fm * e2, z


def _dephase(fp, fm):
    """Unit gradient dephasing: every transverse order moves up by one."""
    new_fp = np.empty_like(fp)
    new_fm = np.empty_like(fm)
    new_fp[:, 1:] = fp[:, :-1]
    new_fm[:, :-1] = fm[:, 1:]
    new_fm[:, -1] = 0
    new_fp[:, 0] = np.conj(new_fm[:, 0])
    return new_fp, new_fm


def simulate_batch(
    t1: np.ndarray, t2: np.ndarray, b1: np.ndarray, sched: SequenceSchedule
) -> np.ndarray:
    """Simulate ``[atoms, N_TR]`` fingerprints for arrays of T1, T2 (ms) and B1."""
    t1 = np.asarray(t1, dtype=np.float64).reshape(-1)
    t2 = np.asarray(t2, dtype=np.float64).reshape(-1)
    b1 = np.asarray(b1, dtype=np.float64).reshape(-1)
    n_atoms, n_states = t1.size, sched.states
    fp = np.zeros((n_atoms, n_states), dtype=np.complex128)
    fm = np.zeros_like(fp)
    z = np.zeros_like(fp)
    z[:, 0] = 1.0
    if sched.inversion:
        fp, fm, z = _rf_rotate(fp, fm, z, np.pi * b1)
        # ideal crusher after the inversion pulse
        fp[:] = 0
        fm[:] = 0
        fp, fm, z = _relax(fp, fm, z, sched.ti_ms, t1, t2)
    signal = np.empty((n_atoms, sched.n_tr), dtype=np.complex128)
    alphas = np.deg2rad(sched.flip_angles)
    for t in range(sched.n_tr):
        fp, fm, z = _rf_rotate(fp, fm, z, alphas[t] * b1)
        fp, fm, z = _relax(fp, fm, z, sched.te_ms[t], t1, t2)
        signal[:, t] = fp[:, 0]
        fp, fm, z = _relax(fp, fm, z, sched.tr_ms[t] - sched.te_ms[t], t1, t2)
        fp, fm = _dephase(fp, fm)
    return signal


def simulate_fingerprint(atom: DictionaryAtom, sched: SequenceSchedule) -> np.ndarray:
    """Complex signal at every echo for one tissue atom (unit proton density)."""
    check_atom(atom)
    return simulate_batch(
        np.array([atom.t1_ms]), np.array([atom.t2_ms]), np.array([atom.b1]), sched
    )[0]


@dataclass
class SignalDictionary:
    """Simulated fingerprints, one row per atom, with unit-norm copies."""

    t1_ms: np.ndarray
    t2_ms: np.ndarray
    b1: np.ndarray
    signals: np.ndarray
    norms: np.ndarray = field(init=False)
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.complex128)
        if self.signals.ndim != 2 or self.signals.shape[0] != self.t1_ms.size:
            raise ShapeError(
                f"signals shape {self.signals.shape} does not match {self.t1_ms.size} atoms"
            )
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("dictionary signals must be finite")
        self.norms = np.linalg.norm(self.signals, axis=1)
        safe = np.where(self.norms > 0, self.norms, 1.0)
        self.normalized = self.signals / safe[:, None]

    @property
    def n_atoms(self) -> int:
        return int(self.t1_ms.size)

    @property
    def n_tr(self) -> int:
        return int(self.signals.shape[1])

    def atom(self, index: int) -> DictionaryAtom:
        return DictionaryAtom(
            float(self.t1_ms[index]), float(self.t2_ms[index]), float(self.b1[index])
        )

    @property
    def atoms(self) -> List[DictionaryAtom]:
        return [self.atom(i) for i in range(self.n_atoms)]

    def atom_table(self) -> pd.DataFrame:
        return pd.DataFrame({"T1_ms": self.t1_ms, "T2_ms": self.t2_ms, "B1": self.b1})

    def b1_values(self) -> np.ndarray:
        return np.unique(self.b1)

    def hull(self) -> Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]:
        """(min, max) of T1, T2 and B1 covered by the atoms."""
        return (
            (float(self.t1_ms.min()), float(self.t1_ms.max())),
            (float(self.t2_ms.min()), float(self.t2_ms.max())),
            (float(self.b1.min()), float(self.b1.max())),
        )


def build_dictionary(
    t1_values: Sequence[float],
    t2_values: Sequence[float],
    b1_values: Sequence[float],
    sched: SequenceSchedule,
) -> SignalDictionary:
    """Simulate every ``(T1, T2, B1)`` grid combination with ``T2 <= T1``.

    Repeated grid values are ignored. Atoms are ordered by T1, then T2, then B1.
    """
    t1_grid = np.unique(np.asarray(t1_values, dtype=np.float64))
    t2_grid = np.unique(np.asarray(t2_values, dtype=np.float64))
    b1_grid = np.unique(np.asarray(b1_values, dtype=np.float64))
    if t1_grid.size == 0 or t2_grid.size == 0 or b1_grid.size == 0:
        raise ValueError("dictionary grid must be nonempty")
    if np.any(t1_grid <= 0) or np.any(t2_grid <= 0) or np.any(b1_grid <= 0):
        raise ValueError("dictionary grid values must be > 0")
    t1, t2, b1 = (g.reshape(-1) for g in np.meshgrid(t1_grid, t2_grid, b1_grid, indexing="ij"))
    keep = t2 <= t1
    if not np.any(keep):
        raise ValueError("no (T1, T2) pair satisfies T2 <= T1")
    t1, t2, b1 = t1[keep], t2[keep], b1[keep]
    signals = np.empty((t1.size, sched.n_tr), dtype=np.complex128)
    for start in range(0, t1.size, SIM_CHUNK):
        stop = start + SIM_CHUNK
        signals[start:stop] = simulate_batch(t1[start:stop], t2[start:stop], b1[start:stop], sched)
    LOGGER.info(f"simulated dictionary with {t1.size} atoms over {sched.n_tr} TRs")
    return SignalDictionary(t1, t2, b1, signals)


def default_grid() -> Dict[str, np.ndarray]:
    """Desk-scale dictionary grid covering the default tissue table with margin."""
    t1 = np.concatenate(
        [np.arange(300, 2000, 50), np.arange(2000, 3000, 200), np.arange(3000, 5200, 400)]
    )
    t2 = np.concatenate(
        [np.arange(20, 200, 5), np.arange(200, 600, 25), np.arange(600, 2400, 150)]
    )
    b1 = np.round(np.arange(0.85, 1.1501, 0.05), 2)
    return {"t1": t1.astype(float), "t2": t2.astype(float), "b1": b1}


class MatchResult(NamedTuple):
    index: int
    atom: Optional[DictionaryAtom]
    scale: float
    pd: float
    similarity: float


def match_voxel(timeseries: np.ndarray, dictionary: SignalDictionary) -> MatchResult:
    """Best atom by absolute cosine similarity; ties go to the lowest atom index.

    A zero timeseries is unmatchable and yields index ``-1`` with no atom.
    """
    x = np.asarray(timeseries, dtype=np.complex128).reshape(-1)
    if x.size != dictionary.n_tr:
        raise ShapeError(f"timeseries has {x.size} TRs, dictionary has {dictionary.n_tr}")
    if not np.all(np.isfinite(x)):
        raise ValueError("timeseries must be finite")
    norm = np.linalg.norm(x)
    if norm == 0:
        LOGGER.debug(f"zero timeseries is unmatchable {warning_suffix('match')}")
        return MatchResult(-1, None, 0.0, 0.0, 0.0)
    inner = dictionary.normalized.conj() @ x
    magnitude = np.abs(inner)
    index = int(np.argmax(magnitude))
    scale = float(magnitude[index])
    raw = float(dictionary.norms[index])
    return MatchResult(
        index, dictionary.atom(index), scale, scale / raw if raw else 0.0, scale / norm
    )


@dataclass
class MatchedMaps:
    t1: np.ndarray
    t2: np.ndarray
    pd: np.ndarray
    index: np.ndarray
    matchable: np.ndarray


def nearest_b1(b1_map: np.ndarray, b1_values: np.ndarray) -> np.ndarray:
    """Index of the nearest dictionary B1 value; ties resolve to the lower value."""
    b1_values = np.asarray(b1_values)
    dist = np.abs(np.asarray(b1_map)[..., None] - b1_values)
    return np.argmin(dist, axis=-1)


def match_volume(
    coeffs: np.ndarray,
    basis,
    dictionary: SignalDictionary,
    b1_map: Optional[np.ndarray] = None,
    chunk: int = 4096,
) -> MatchedMaps:
    """Match every voxel of a coefficient volume ``[k, X, Y, Z]``.

    Matching runs in the subspace: ``<u, Phi a> = <Phi^H u, a>``. When ``b1_map`` is given
    each voxel only competes atoms at its nearest dictionary B1 value.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    if coeffs.shape[0] != basis.k:
        raise ShapeError(f"coefficients have k={coeffs.shape[0]}, basis has k={basis.k}")
    if basis.n_tr != dictionary.n_tr:
        raise ShapeError(f"basis has {basis.n_tr} TRs, dictionary has {dictionary.n_tr}")
    spatial = coeffs.shape[1:]
    alpha = basis.to_unbalanced(coeffs).reshape(basis.k, -1).T
    compressed = dictionary.normalized @ basis.phi.conj()
    n_vox = alpha.shape[0]
    index = np.full(n_vox, -1, dtype=np.int64)
    magnitude = np.zeros(n_vox)
    norms = np.linalg.norm(alpha, axis=1)
    groups: List[Tuple[np.ndarray, np.ndarray]]
    if b1_map is None:
        groups = [(np.arange(n_vox), np.arange(dictionary.n_atoms))]
    else:
        b1_values = dictionary.b1_values()
        nearest = nearest_b1(np.asarray(b1_map).reshape(-1), b1_values)
        groups = [
            (np.flatnonzero(nearest == i), np.flatnonzero(dictionary.b1 == value))
            for i, value in enumerate(b1_values)
        ]
    for voxels, atoms in groups:
        voxels = voxels[norms[voxels] > 0]
        candidates = compressed[atoms].conj()
        for start in range(0, voxels.size, chunk):
            block = voxels[start : start + chunk]
            scores = np.abs(candidates @ alpha[block].T)
            best = np.argmax(scores, axis=0)
            index[block] = atoms[best]
            magnitude[block] = scores[best, np.arange(block.size)]
    matchable = index >= 0
    safe = np.where(matchable, index, 0)
    t1 = np.where(matchable, dictionary.t1_ms[safe], 0.0)
    t2 = np.where(matchable, dictionary.t2_ms[safe], 0.0)
    raw = dictionary.norms[safe]
    pd_map = np.where(matchable & (raw > 0), magnitude / np.where(raw > 0, raw, 1.0), 0.0)
    LOGGER.info(f"matched {int(matchable.sum())}/{n_vox} voxels")
    return MatchedMaps(
        t1.reshape(spatial),
        t2.reshape(spatial),
        pd_map.reshape(spatial),
        index.reshape(spatial),
        matchable.reshape(spatial),
    )


def save_dictionary(directory: Path, dictionary: SignalDictionary, sched: SequenceSchedule):
    tensors = dict(
        signals=dictionary.signals,
        t1_ms=dictionary.t1_ms,
        t2_ms=dictionary.t2_ms,
        b1=dictionary.b1,
        **sched.to_arrays(),
    )
    manifest = {
        "kind": "dictionary",
        "n_atoms": dictionary.n_atoms,
        "n_tr": dictionary.n_tr,
        "ti_ms": sched.ti_ms,
        "inversion": sched.inversion,
        "states": sched.states,
    }
    save_bundle(directory, tensors, manifest)
    write_csv(Path(directory) / "atoms.csv", dictionary.atom_table())


def load_dictionary(directory: Path) -> Tuple[SignalDictionary, SequenceSchedule]:
    tensors, manifest = load_bundle(directory, "make-dict")
    sched = SequenceSchedule(
        tensors["flip_angles"],
        tensors["tr_ms"],
        tensors["te_ms"],
        ti_ms=manifest["ti_ms"],
        inversion=manifest["inversion"],
        states=manifest["states"],
    )
    dictionary = SignalDictionary(
        tensors["t1_ms"], tensors["t2_ms"], tensors["b1"], tensors["signals"]
    )
    return dictionary, sched
