"""The subspace forward model ``A = F_u S Phi``, its adjoint and Gram operator.

Coil weighting and Fourier sampling act on each coefficient channel; the channels of
a sample are then combined through the basis row of that sample's TR, so the costly
transform runs in the reduced ``k``-dimensional space.
"""
from logging import getLogger
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .autodiff import COMPLEX_DTYPE, as_complex_tensor
from .nufft import (
    KB_OVERSAMPLING,
    KB_WIDTH,
    CartesianFftSampler,
    ExactDftSampler,
    NufftSampler,
)
from .sampling import Trajectory
from .shared import ShapeError, vdot
from .subspace import SubspaceBasis

LOGGER = getLogger(__name__)

MODES = ("nufft", "exact-dft", "cartesian-fft")

#: relative tolerance of the construction-time adjoint test
SELF_CHECK_TOL = 1e-6


class ForwardOperator:
    """Linear map from coefficient volumes ``[k, X, Y, Z]`` to coil samples ``[C, M]``."""

    def __init__(
        self,
        trajectory: Trajectory,
        coils: Union[np.ndarray, torch.Tensor],
        basis: SubspaceBasis,
        mode: str = "nufft",
        oversampling: float = KB_OVERSAMPLING,
        width: int = KB_WIDTH,
        cartesian_grid: Optional[Sequence[int]] = None,
        self_check: bool = True,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        if trajectory.n_samples and trajectory.tr.max() >= basis.n_tr:
            raise ValueError(
                f"trajectory TR index {trajectory.tr.max()} >= N_TR {basis.n_tr}"
            )
        self.trajectory = trajectory
        self.basis = basis
        self.mode = mode
        self.coils = as_complex_tensor(coils)
        if self.coils.ndim != 4:
            raise ShapeError(f"coil maps must be [C, X, Y, Z], got {tuple(self.coils.shape)}")
        self.grid = tuple(int(n) for n in self.coils.shape[1:])
        self.rows = as_complex_tensor(basis.effective[trajectory.tr])
        coords = trajectory.coords
        if mode == "nufft":
            self.sampler = NufftSampler(self.grid, coords, oversampling, width)
        elif mode == "exact-dft":
            self.sampler = ExactDftSampler(self.grid, coords)
        else:
            big = tuple(cartesian_grid) if cartesian_grid is not None else self.grid
            self.sampler = CartesianFftSampler(self.grid, big, coords)
            self.gram_kernel = self._gram_kernel()
        if self_check:
            error = self.dot_test(seed=0)
            if error > SELF_CHECK_TOL:
                raise ValueError(f"{mode} operator fails its adjoint test ({error:.2e})")
            LOGGER.debug(f"{mode} operator adjoint test {error:.2e}")

    @property
    def k(self) -> int:
        return self.basis.k

    @property
    def n_coils(self) -> int:
        return int(self.coils.shape[0])

    @property
    def n_samples(self) -> int:
        return self.trajectory.n_samples

    @property
    def coeff_shape(self):
        return (self.k,) + self.grid

    @property
    def data_shape(self):
        return (self.n_coils, self.n_samples)

    def _chunks(self):
        step = self.sampler.chunk(self.n_coils * self.k)
        for start in range(0, self.n_samples, step):
            yield slice(start, min(start + step, self.n_samples))

    def _gram_kernel(self) -> torch.Tensor:
        """Per oversampled grid point, ``sum_t phi_t^H phi_t`` over the samples there."""
        big = self.sampler.big
        index = self.sampler.index
        size = int(np.prod(big))
        kernel = torch.zeros((self.k, self.k, size), dtype=COMPLEX_DTYPE)
        for i in range(self.k):
            for j in range(self.k):
                values = self.rows[:, i].conj() * self.rows[:, j]
                real = torch.zeros((size, 2), dtype=torch.float64)
                real.index_add_(0, index, torch.view_as_real(values.contiguous()))
                kernel[i, j] = torch.view_as_complex(real)
        return kernel.reshape((self.k, self.k) + big)

    def _check_coeffs(self, coeffs: torch.Tensor):
        if tuple(coeffs.shape) != self.coeff_shape:
            raise ShapeError(
                f"coefficients have shape {tuple(coeffs.shape)}, operator expects "
                f"{self.coeff_shape}"
            )

    def _coil_images(self, coeffs: torch.Tensor) -> torch.Tensor:
        img = self.coils[:, None] * coeffs[None]
        return img.reshape((self.n_coils * self.k,) + self.grid)

    def _coil_combine(self, img: torch.Tensor) -> torch.Tensor:
        img = img.reshape((self.n_coils, self.k) + self.grid)
        return torch.sum(self.coils.conj()[:, None] * img, dim=0)

    def apply(self, coeffs: torch.Tensor) -> torch.Tensor:
        self._check_coeffs(coeffs)
        state = self.sampler.prepare(self._coil_images(coeffs))
        parts = []
        for sl in self._chunks():
            values = self.sampler.gather(state, sl).reshape(self.n_coils, self.k, -1)
            parts.append(torch.einsum("cjm,mj->cm", values, self.rows[sl]))
        if not parts:
            return torch.zeros(self.data_shape, dtype=COMPLEX_DTYPE)
        return torch.cat(parts, dim=1)

    def density_weights(self) -> torch.Tensor:
        """``|k|^2`` ramp for the display-only density-compensated adjoint."""
        return torch.as_tensor(np.sum(self.trajectory.coords**2, axis=1), dtype=COMPLEX_DTYPE)

    def adjoint(self, data: torch.Tensor, density_compensated: bool = False) -> torch.Tensor:
        if tuple(data.shape) != self.data_shape:
            raise ShapeError(
                f"data has shape {tuple(data.shape)}, operator expects {self.data_shape}"
            )
        if density_compensated:
            data = data * self.density_weights()[None]
        acc = self.sampler.spread_init(self.n_coils * self.k)
        for sl in self._chunks():
            values = torch.einsum("cm,mj->cjm", data[:, sl], self.rows[sl].conj())
            acc = self.sampler.spread(acc, values.reshape(self.n_coils * self.k, -1), sl)
        return self._coil_combine(self.sampler.finish(acc))

    def normal(self, data: torch.Tensor) -> torch.Tensor:
        """``A^H b``."""
        return self.adjoint(data)

    def gram(self, coeffs: torch.Tensor) -> torch.Tensor:
        """``A^H A x``; fused through per-frequency ``k x k`` matrices on Cartesian grids."""
        self._check_coeffs(coeffs)
        if self.mode != "cartesian-fft":
            return self.adjoint(self.apply(coeffs))
        big = self.sampler.big
        spectrum = self.sampler.to_kspace(self._coil_images(coeffs))
        spectrum = spectrum.reshape((self.n_coils, self.k) + big)
        mixed = torch.einsum("ijxyz,cjxyz->cixyz", self.gram_kernel, spectrum)
        img = self.sampler.from_kspace(mixed.reshape((self.n_coils * self.k,) + big))
        return self._coil_combine(img)

    def apply_numpy(self, coeffs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.apply(as_complex_tensor(coeffs)).numpy()

    def adjoint_numpy(self, data: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.adjoint(as_complex_tensor(data)).numpy()

    def random_pair(self, generator: torch.Generator):
        x = torch.randn(self.coeff_shape, dtype=COMPLEX_DTYPE, generator=generator)
        y = torch.randn(self.data_shape, dtype=COMPLEX_DTYPE, generator=generator)
        return x, y

    def dot_test(self, seed: int = 0, pairs: int = 1) -> float:
        """Worst relative gap between ``<A x, y>`` and ``<x, A^H y>`` over random pairs."""
        generator = torch.Generator().manual_seed(seed)
        worst = 0.0
        with torch.no_grad():
            for _ in range(pairs):
                x, y = self.random_pair(generator)
                lhs = vdot(y, self.apply(x))
                rhs = vdot(self.adjoint(y), x)
                scale = max(abs(lhs), abs(rhs), 1e-300)
                worst = max(worst, abs(lhs - rhs) / scale)
        return worst
