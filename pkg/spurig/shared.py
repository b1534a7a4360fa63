"""Shared constants, errors and small numerical helpers."""
from typing import Any, List, Optional, Sequence, Union

import numpy as np
import torch

WARNING_TYPE = "spurig"

#: complex [k, X, Y, Z] coefficient maps, as numpy or torch
CoefficientVolume = Union[np.ndarray, torch.Tensor]

ArrayLike = Union[np.ndarray, torch.Tensor]


class SpurigError(Exception):
    """Base class for domain failures raised by this package."""

    details: Any = None


class ShapeError(SpurigError, ValueError):
    """An input does not have the shape an operation requires."""


class DivergenceError(SpurigError):
    """An iterative reconstruction diverged."""

    def __init__(self, message: str, trace: Sequence[Any] = ()):
        super().__init__(message)
        self.trace = list(trace)
        self.details = {"iterations": len(self.trace)}


class NonFiniteError(SpurigError):
    """A non-finite value appeared inside an unrolled reconstruction."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
        self.details = {"iteration": iteration}


class MemoryBudgetError(SpurigError):
    """Training exceeded its activation memory budget."""

    def __init__(self, message: str, peak_bytes: int):
        super().__init__(message)
        self.peak_bytes = peak_bytes
        self.details = {"peak_bytes": peak_bytes}


class MissingArtifactError(SpurigError):
    """A pipeline stage ran before the stage producing its inputs."""

    def __init__(self, path: str, producer: str):
        super().__init__(
            f"missing artifact {path!r}: run the {producer!r} subcommand first"
        )
        self.details = {"path": path, "producer": producer}


class ConfigError(SpurigError):
    """The experiment configuration violates its schema."""

    def __init__(self, diagnostics: List[str]):
        super().__init__("invalid configuration: " + "; ".join(diagnostics))
        self.diagnostics = diagnostics
        self.details = {"fields": diagnostics}


def warning_suffix(subtype: str) -> str:
    """Return the ``[spurig.<subtype>]`` tag appended to warnings."""
    return f"[{WARNING_TYPE}.{subtype}]"


def check_shape(name: str, shape: Sequence[int], expected: Sequence[Optional[int]]):
    """Raise a ``ShapeError`` naming the offending dimensions.

    ``None`` entries in ``expected`` match any extent.
    """
    shape = tuple(shape)
    if len(shape) != len(expected) or any(
        want is not None and have != want for have, want in zip(shape, expected)
    ):
        raise ShapeError(f"{name} has shape {shape}, expected {tuple(expected)}")


def vdot(x: ArrayLike, y: ArrayLike) -> complex:
    """Complex inner product ``<x, y> = sum(conj(x) * y)``."""
    if isinstance(x, torch.Tensor):
        return complex(torch.vdot(x.reshape(-1), y.reshape(-1)).item())
    return complex(np.vdot(x, y))


def relative_error(estimate: ArrayLike, reference: ArrayLike) -> float:
    """``||estimate - reference|| / ||reference||`` (0 when both vanish)."""
    if isinstance(estimate, torch.Tensor):
        num = float(torch.linalg.vector_norm(estimate - reference))
        den = float(torch.linalg.vector_norm(reference))
    else:
        num = float(np.linalg.norm(np.asarray(estimate) - np.asarray(reference)))
        den = float(np.linalg.norm(reference))
    if den == 0.0:
        return num
    return num / den


def centered_indices(n: int) -> np.ndarray:
    """Integer voxel coordinates ``-n//2 ... n - n//2 - 1`` of an axis."""
    return np.arange(n) - n // 2


def default_rng(seed: Optional[int]) -> np.random.Generator:
    """Seeded numpy generator; all randomness in the package flows through here."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.default_rng(seed)
