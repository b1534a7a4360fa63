"""Fourier samplers: Kaiser-Bessel gridding NUFFT, the exact non-uniform DFT and masked
FFTs on an oversampled Cartesian grid.

Every sampler evaluates the unitary-scaled transform

    y(k) = V^-1/2 sum_x f(x) exp(-2 pi i k . x)

with image coordinates ``x = i - N // 2`` and ``k`` in cycles/voxel. Samplers work on a
batch of images ``[B, *grid]`` and expose a prepare/gather/spread/finish protocol so the
forward operator can stream over sample chunks.
"""
from logging import getLogger
import math
from typing import Sequence, Tuple

import numpy as np
from scipy import special
import torch

from .autodiff import COMPLEX_DTYPE, REAL_DTYPE
from .shared import ShapeError

LOGGER = getLogger(__name__)

KB_WIDTH = 4
KB_OVERSAMPLING = 2.0


def kb_beta(width: int = KB_WIDTH, oversampling: float = KB_OVERSAMPLING) -> float:
    """Kaiser-Bessel shape parameter minimizing aliasing for a width and oversampling."""
    return math.pi * math.sqrt(
        (width / oversampling) ** 2 * (oversampling - 0.5) ** 2 - 0.8
    )


def kb_kernel(distance: np.ndarray, width: int, beta: float) -> np.ndarray:
    """Kernel value at ``distance`` oversampled-grid cells (zero outside the support)."""
    arg = 1 - (2 * np.asarray(distance) / width) ** 2
    inside = arg >= 0
    return np.where(inside, special.i0(beta * np.sqrt(np.where(inside, arg, 0))), 0.0)


def kb_deapodization(nu: np.ndarray, width: int, beta: float) -> np.ndarray:
    """Continuous Fourier transform of :func:`kb_kernel` at ``nu`` cycles/cell."""
    root = np.sqrt((beta**2 - (np.pi * width * np.asarray(nu)) ** 2).astype(np.complex128))
    safe = np.where(np.abs(root) > 1e-12, root, 1.0)
    value = np.where(np.abs(root) > 1e-12, np.sinh(safe) / safe, 1.0)
    return (width * value).real


def image_coords(n: int) -> np.ndarray:
    return np.arange(n) - n // 2


def _oversampled(grid: Sequence[int], oversampling: float) -> Tuple[int, ...]:
    out = []
    for n in grid:
        m = int(math.ceil(oversampling * n))
        out.append(m + (m % 2))
    return tuple(out)


def chunk_size(batch: int, budget: int = 1 << 22) -> int:
    return max(1024, budget // max(batch, 1))


def _pad_center(img: torch.Tensor, grid: Sequence[int], big: Sequence[int]) -> torch.Tensor:
    """Zero-pad ``[B, *grid]`` to ``[B, *big]`` keeping coordinate 0 at ``n // 2``."""
    pads = []
    for n, m in zip(reversed(grid), reversed(big)):
        before = m // 2 - n // 2
        pads.extend([before, m - n - before])
    return torch.nn.functional.pad(img, pads)


def _crop_center(img: torch.Tensor, grid: Sequence[int], big: Sequence[int]) -> torch.Tensor:
    slices = [slice(None)]
    for n, m in zip(grid, big):
        start = m // 2 - n // 2
        slices.append(slice(start, start + n))
    return img[tuple(slices)]


def _centered_fft(x: torch.Tensor) -> torch.Tensor:
    dims = (-3, -2, -1)
    x = torch.fft.ifftshift(x, dim=dims)
    x = torch.fft.fftn(x, dim=dims)
    return torch.fft.fftshift(x, dim=dims)


def _centered_fft_adjoint(x: torch.Tensor) -> torch.Tensor:
    dims = (-3, -2, -1)
    x = torch.fft.ifftshift(x, dim=dims)
    x = torch.fft.ifftn(x, dim=dims, norm="forward")
    return torch.fft.fftshift(x, dim=dims)


def _gather(flat: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """``flat[:, index]`` for a complex ``[B, V]`` tensor through its real view."""
    return torch.view_as_complex(torch.view_as_real(flat)[:, index].contiguous())


def _spread(acc: torch.Tensor, index: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Accumulate complex ``values`` [B, m] into the real-view accumulator ``[B, V, 2]``."""
    return acc.index_add_(1, index, torch.view_as_real(values.contiguous()))


class _Sampler:
    mode = ""

    def __init__(self, grid: Sequence[int]):
        self.grid = tuple(int(n) for n in grid)
        self.scale = 1.0 / math.sqrt(float(np.prod(self.grid)))

    def check(self, img: torch.Tensor):
        if tuple(img.shape[1:]) != self.grid:
            raise ShapeError(f"image grid {tuple(img.shape[1:])} != operator grid {self.grid}")

    def chunk(self, batch: int) -> int:
        """Samples per streamed chunk for a batch of ``batch`` images."""
        return chunk_size(batch)


class NufftSampler(_Sampler):
    """Kaiser-Bessel gridding with analytic deapodization."""

    mode = "nufft"

    def __init__(
        self,
        grid: Sequence[int],
        coords: np.ndarray,
        oversampling: float = KB_OVERSAMPLING,
        width: int = KB_WIDTH,
    ):
        super().__init__(grid)
        self.oversampling = oversampling
        self.width = width
        self.beta = kb_beta(width, oversampling)
        self.big = _oversampled(self.grid, oversampling)
        self.n_samples = coords.shape[0]
        deapod = 1.0
        for axis, (n, m) in enumerate(zip(self.grid, self.big)):
            shape = [1, 1, 1]
            shape[axis] = n
            factor = kb_deapodization(image_coords(n) / m, width, self.beta).reshape(shape)
            deapod = deapod * factor
        self.inv_deapod = torch.as_tensor(1.0 / deapod, dtype=REAL_DTYPE)
        base = []
        weights = []
        for axis, m in enumerate(self.big):
            u = coords[:, axis] * m
            first = np.floor(u).astype(np.int64) - width // 2 + 1
            offsets = first[:, None] + np.arange(width)[None]
            weights.append(kb_kernel(u[:, None] - offsets, width, self.beta))
            base.append(first)
        self.first = torch.as_tensor(np.stack(base, axis=1))
        self.weights = torch.as_tensor(np.stack(weights, axis=1), dtype=REAL_DTYPE)

    def _neighbors(self, sl: slice):
        first = self.first[sl]
        weights = self.weights[sl]
        w = self.width
        mx, my, mz = self.big
        for dx in range(w):
            ix = torch.remainder(first[:, 0] + dx + mx // 2, mx)
            for dy in range(w):
                iy = torch.remainder(first[:, 1] + dy + my // 2, my)
                wxy = weights[:, 0, dx] * weights[:, 1, dy]
                for dz in range(w):
                    iz = torch.remainder(first[:, 2] + dz + mz // 2, mz)
                    yield (ix * my + iy) * mz + iz, wxy * weights[:, 2, dz]

    def prepare(self, img: torch.Tensor) -> torch.Tensor:
        self.check(img)
        pre = img * self.inv_deapod
        spectrum = _centered_fft(_pad_center(pre, self.grid, self.big))
        return spectrum.reshape(img.shape[0], -1)

    def gather(self, state: torch.Tensor, sl: slice) -> torch.Tensor:
        out = None
        for index, weight in self._neighbors(sl):
            term = _gather(state, index) * weight
            out = term if out is None else out + term
        return out * self.scale

    def spread_init(self, batch: int) -> torch.Tensor:
        return torch.zeros((batch, int(np.prod(self.big)), 2), dtype=REAL_DTYPE)

    def spread(self, acc: torch.Tensor, values: torch.Tensor, sl: slice) -> torch.Tensor:
        for index, weight in self._neighbors(sl):
            acc = _spread(acc, index, values * weight)
        return acc

    def finish(self, acc: torch.Tensor) -> torch.Tensor:
        spectrum = torch.view_as_complex(acc).reshape((acc.shape[0],) + self.big)
        img = _crop_center(_centered_fft_adjoint(spectrum), self.grid, self.big)
        return img * self.inv_deapod * self.scale


class ExactDftSampler(_Sampler):
    """Direct evaluation of the non-uniform DFT via separable exponentials."""

    mode = "exact-dft"

    def __init__(self, grid: Sequence[int], coords: np.ndarray):
        super().__init__(grid)
        self.coords = torch.as_tensor(coords, dtype=REAL_DTYPE)
        self.n_samples = coords.shape[0]
        self.axes = [torch.as_tensor(image_coords(n), dtype=REAL_DTYPE) for n in self.grid]

    def chunk(self, batch: int) -> int:
        return max(1, (1 << 22) // (batch * self.grid[0] * self.grid[1]))

    def _phases(self, sl: slice):
        k = self.coords[sl]
        return [
            torch.exp(-2j * math.pi * k[:, a : a + 1] * self.axes[a][None].to(COMPLEX_DTYPE))
            for a in range(3)
        ]

    def prepare(self, img: torch.Tensor) -> torch.Tensor:
        self.check(img)
        return img

    def gather(self, state: torch.Tensor, sl: slice) -> torch.Tensor:
        ex, ey, ez = self._phases(sl)
        t = torch.einsum("bxyz,mz->bmxy", state, ez)
        t = torch.einsum("bmxy,my->bmx", t, ey)
        return torch.einsum("bmx,mx->bm", t, ex) * self.scale

    def spread_init(self, batch: int) -> torch.Tensor:
        return torch.zeros((batch,) + self.grid, dtype=COMPLEX_DTYPE)

    def spread(self, acc: torch.Tensor, values: torch.Tensor, sl: slice) -> torch.Tensor:
        ex, ey, ez = (e.conj() for e in self._phases(sl))
        t = torch.einsum("bm,mx->bmx", values, ex)
        t = torch.einsum("bmx,my->bxym", t, ey)
        return acc + torch.einsum("bxym,mz->bxyz", t, ez)

    def finish(self, acc: torch.Tensor) -> torch.Tensor:
        return acc * self.scale


class CartesianFftSampler(_Sampler):
    """Masked FFT on an oversampled Cartesian grid; samples sit on grid frequencies."""

    mode = "cartesian-fft"

    def __init__(self, grid: Sequence[int], big: Sequence[int], coords: np.ndarray):
        super().__init__(grid)
        self.big = tuple(int(m) for m in big)
        if any(m < n or m % 2 for n, m in zip(self.grid, self.big)):
            raise ValueError(f"oversampled grid {self.big} must be even and >= {self.grid}")
        self.n_samples = coords.shape[0]
        index = np.zeros(coords.shape[0], dtype=np.int64)
        for axis, m in enumerate(self.big):
            j = np.rint(coords[:, axis] * m)
            if np.any(np.abs(j - coords[:, axis] * m) > 1e-6):
                raise ValueError("cartesian-fft samples must lie on the oversampled grid")
            index = index * m + (j.astype(np.int64) + m // 2)
        self.index = torch.as_tensor(index)

    def prepare(self, img: torch.Tensor) -> torch.Tensor:
        self.check(img)
        spectrum = _centered_fft(_pad_center(img, self.grid, self.big))
        return spectrum.reshape(img.shape[0], -1)

    def gather(self, state: torch.Tensor, sl: slice) -> torch.Tensor:
        return _gather(state, self.index[sl]) * self.scale

    def spread_init(self, batch: int) -> torch.Tensor:
        return torch.zeros((batch, int(np.prod(self.big)), 2), dtype=REAL_DTYPE)

    def spread(self, acc: torch.Tensor, values: torch.Tensor, sl: slice) -> torch.Tensor:
        return _spread(acc, self.index[sl], values)

    def finish(self, acc: torch.Tensor) -> torch.Tensor:
        spectrum = torch.view_as_complex(acc).reshape((acc.shape[0],) + self.big)
        return _crop_center(_centered_fft_adjoint(spectrum), self.grid, self.big) * self.scale

    def to_kspace(self, img: torch.Tensor) -> torch.Tensor:
        """Full oversampled spectrum ``[B, *big]`` (scaled like the samples)."""
        return _centered_fft(_pad_center(img, self.grid, self.big)) * self.scale

    def from_kspace(self, spectrum: torch.Tensor) -> torch.Tensor:
        return _crop_center(_centered_fft_adjoint(spectrum), self.grid, self.big) * self.scale


def oversampled_grid(grid: Sequence[int], oversampling: float) -> Tuple[int, ...]:
    """Even oversampled extents, at least ``oversampling`` times ``grid``."""
    return _oversampled(grid, oversampling)
