"""Low-rank temporal basis, basis balancing and timeseries/coefficient conversion."""
from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .shared import ShapeError
from .storage import load_bundle, save_bundle

LOGGER = getLogger(__name__)

#: relative singular value below which a direction counts as outside the rank
RANK_TOL = 1e-12


def unitary_dft(k: int) -> np.ndarray:
    """The ``k``-point DFT matrix scaled by ``1/sqrt(k)``."""
    n = np.arange(k)
    return np.exp(-2j * np.pi * np.outer(n, n) / k) / np.sqrt(k)


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal temporal basis ``phi`` [N_TR, k] and the unitary ``balancing`` [k, k].

    Coefficients handed to the rest of the pipeline are expressed in the effective basis
    ``phi @ balancing^H``; unbalanced bases carry the identity.
    """

    phi: np.ndarray
    singular_values: np.ndarray
    balancing: np.ndarray
    all_singular_values: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return int(self.phi.shape[1])

    @property
    def n_tr(self) -> int:
        return int(self.phi.shape[0])

    @property
    def balanced(self) -> bool:
        return not np.allclose(self.balancing, np.eye(self.k))

    @property
    def effective(self) -> np.ndarray:
        return self.phi @ self.balancing.conj().T

    def to_balanced(self, coeffs: np.ndarray) -> np.ndarray:
        """Map unbalanced coefficients (leading axis ``k``) into this basis' convention."""
        return np.tensordot(self.balancing, coeffs, axes=(1, 0))

    def to_unbalanced(self, coeffs: np.ndarray) -> np.ndarray:
        return np.tensordot(self.balancing.conj().T, coeffs, axes=(1, 0))

    def energy_fraction(self, n: Optional[int] = None) -> float:
        """Share of dictionary energy captured by the leading ``n`` singular values."""
        values = self.all_singular_values
        if values is None:
            values = self.singular_values
        n = self.k if n is None else n
        energy = values**2
        return float(energy[:n].sum() / energy.sum())


def compute_basis(dictionary, k: int) -> SubspaceBasis:
    """Leading ``k`` right singular vectors of the normalized dictionary rows."""
    rows = dictionary.normalized
    if k < 1 or k > min(rows.shape):
        raise ValueError(f"k={k} must lie in [1, {min(rows.shape)}]")
    _, sigma, vh = np.linalg.svd(rows, full_matrices=False)
    rank = int(np.sum(sigma > RANK_TOL * sigma[0]))
    if k > rank:
        raise ValueError(f"k={k} exceeds the dictionary rank {rank}")
    phi = vh[:k].T
    LOGGER.info(
        f"basis k={k} keeps {np.sum(sigma[:k] ** 2) / np.sum(sigma ** 2):.6f} of the energy"
    )
    return SubspaceBasis(phi, sigma[:k].copy(), np.eye(k, dtype=np.complex128), sigma.copy())


def balance(basis: SubspaceBasis) -> SubspaceBasis:
    """Mix basis columns with the unitary DFT so coefficient energies even out."""
    if basis.balanced:
        raise ValueError("basis is already balanced")
    return replace(basis, balancing=unitary_dft(basis.k))


def _check_length(name: str, length: int, basis: SubspaceBasis):
    if length != basis.n_tr:
        raise ShapeError(f"{name} has {length} TRs, basis has {basis.n_tr}")


def project(timeseries: np.ndarray, basis: SubspaceBasis) -> np.ndarray:
    """``alpha = Phi_eff^H x`` for a timeseries volume ``[N_TR, ...]``."""
    timeseries = np.asarray(timeseries)
    _check_length("timeseries", timeseries.shape[0], basis)
    return np.tensordot(basis.effective.conj().T, timeseries, axes=(1, 0))


def expand(
    coeffs: np.ndarray, basis: SubspaceBasis, tr_subset: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Timeseries values ``Phi_eff[t] alpha`` at the requested TRs (all by default)."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[0] != basis.k:
        raise ShapeError(f"coefficients have k={coeffs.shape[0]}, basis has k={basis.k}")
    rows = basis.effective
    if tr_subset is not None:
        subset = np.asarray(tr_subset, dtype=np.int64).reshape(-1)
        if subset.size and (subset.min() < 0 or subset.max() >= basis.n_tr):
            raise IndexError(f"TR indices must lie in [0, {basis.n_tr})")
        rows = rows[subset]
    return np.tensordot(rows, coeffs, axes=(1, 0))


def coefficient_energy_ratio(coeffs: np.ndarray) -> float:
    """max/min per-coefficient energy of a coefficient volume."""
    energy = np.sum(np.abs(np.asarray(coeffs).reshape(coeffs.shape[0], -1)) ** 2, axis=1)
    low = energy.min()
    return float(energy.max() / low) if low > 0 else float("inf")


def save_basis(directory: Path, basis: SubspaceBasis):
    tensors = {
        "phi": basis.phi,
        "singular_values": basis.singular_values,
        "balancing": basis.balancing,
    }
    if basis.all_singular_values is not None:
        tensors["all_singular_values"] = basis.all_singular_values
    save_bundle(
        directory,
        tensors,
        {"kind": "basis", "k": basis.k, "n_tr": basis.n_tr, "balanced": basis.balanced},
    )


def load_basis(directory: Path) -> SubspaceBasis:
    tensors, _ = load_bundle(directory, "make-basis")
    return SubspaceBasis(
        tensors["phi"],
        tensors["singular_values"],
        tensors["balancing"],
        tensors.get("all_singular_values"),
    )
