"""Unrolled reconstruction: learnable-step data consistency alternating with the
iteration-conditioned denoiser."""
from dataclasses import asdict, dataclass
from logging import getLogger
import math
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .autodiff import (
    COMPLEX_DTYPE,
    REAL_DTYPE,
    checkpoint,
    complex_view,
    load_state_arrays,
    parameter_count,
    real_view,
    seeded,
    state_arrays,
)
from .shared import NonFiniteError, ShapeError
from .storage import load_bundle, save_bundle
from .unet import Architecture, IndexLike, UNet

LOGGER = getLogger(__name__)

#: eigenvalue floor of the whitening covariance, relative to its largest eigenvalue
WHITENING_FLOOR = 1e-8


@dataclass(frozen=True)
class UnrollConfig:
    iterations: int = 6
    weight_sharing: bool = True
    dims: int = 3
    base: int = 16
    conditioned: bool = True
    checkpoint: bool = True
    init_scaling: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"unroll count must be >= 1, got {self.iterations}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class DenoiserModel(nn.Module):
    """Denoiser networks (one shared, or one per iteration), the positive step sizes
    ``mu_i = exp(rho_i)`` and frozen whitening statistics."""

    def __init__(self, k: int, cfg: UnrollConfig, step: float = 1.0, seed: int = 0):
        super().__init__()
        if step <= 0:
            raise ValueError(f"initial step size must be > 0, got {step}")
        self.k = int(k)
        self.cfg = cfg
        self.arch = Architecture(
            in_channels=2 * self.k, dims=cfg.dims, base=cfg.base, conditioned=cfg.conditioned
        )
        count = 1 if cfg.weight_sharing else cfg.iterations
        with seeded(seed):
            self.networks = nn.ModuleList([UNet(self.arch) for _ in range(count)])
        self.log_steps = nn.Parameter(
            torch.full((cfg.iterations,), math.log(step), dtype=REAL_DTYPE)
        )
        channels = 2 * self.k
        self.register_buffer("whiten_mean", torch.zeros(channels, dtype=REAL_DTYPE))
        self.register_buffer("whiten_matrix", torch.eye(channels, dtype=REAL_DTYPE))
        self.register_buffer("unwhiten_matrix", torch.eye(channels, dtype=REAL_DTYPE))

    @property
    def iterations(self) -> int:
        return self.cfg.iterations

    @property
    def steps(self) -> torch.Tensor:
        return torch.exp(self.log_steps)

    def network(self, index: int) -> UNet:
        if not 1 <= index <= self.iterations:
            raise IndexError(f"iteration index {index} outside [1, {self.iterations}]")
        return self.networks[0 if self.cfg.weight_sharing else index - 1]

    def condition(self, index: int):
        """Per-block ``(gamma, beta)`` for iteration ``index``."""
        net = self.network(index)
        if net.conditioner is None:
            return []
        return net.conditioner(index)

    def parameter_count(self, conditioning_only: bool = False) -> int:
        if conditioning_only:
            return parameter_count(
                p for net in self.networks for p in net.conditioning_parameters()
            )
        return parameter_count(self.parameters())

    def set_whitening(self, volumes: Sequence[torch.Tensor]):
        """Joint zero-mean, unit-covariance statistics over the real channels of
        training coefficient volumes."""
        columns = torch.cat(
            [
                real_view(torch.as_tensor(v, dtype=COMPLEX_DTYPE)).reshape(2 * self.k, -1)
                for v in volumes
            ],
            dim=1,
        )
        mean = columns.mean(dim=1)
        centered = columns - mean[:, None]
        cov = centered @ centered.T / max(centered.shape[1] - 1, 1)
        values, vectors = torch.linalg.eigh(cov)
        floor = WHITENING_FLOOR * float(values.max().clamp(min=1e-300))
        values = torch.clamp(values, min=floor)
        with torch.no_grad():
            self.whiten_mean.copy_(mean)
            self.whiten_matrix.copy_(vectors @ torch.diag(values**-0.5) @ vectors.T)
            self.unwhiten_matrix.copy_(vectors @ torch.diag(values**0.5) @ vectors.T)
        LOGGER.debug(f"whitening from {columns.shape[1]} samples")

    def _apply_matrix(self, matrix: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("ij,bj...->bi...", matrix, x)

    def _run(self, x: torch.Tensor, indices: List[int]) -> torch.Tensor:
        """Run the real-channel batch ``[B, 2k, *grid]`` through the per-index networks."""
        if self.cfg.weight_sharing:
            return self._network_pass(self.networks[0], x, indices)
        out = torch.empty_like(x)
        for index in sorted(set(indices)):
            rows = [b for b, i in enumerate(indices) if i == index]
            out[rows] = self._network_pass(self.network(index), x[rows], [index] * len(rows))
        return out

    def _network_pass(self, net: UNet, x: torch.Tensor, indices: List[int]) -> torch.Tensor:
        if self.cfg.dims == 3:
            return net(x, indices)
        batch, channels, depth = x.shape[0], x.shape[1], x.shape[-1]
        slices = x.permute(0, 4, 1, 2, 3).reshape(batch * depth, channels, *x.shape[2:4])
        slice_indices = [i for i in indices for _ in range(depth)]
        out = net(slices, slice_indices)
        return out.reshape(batch, depth, channels, *x.shape[2:4]).permute(0, 2, 3, 4, 1)

    def denoise_real(self, x: torch.Tensor, index: IndexLike) -> torch.Tensor:
        """Denoise a real-channel batch ``[B, 2k, X, Y, Z]`` (whitening included)."""
        if x.ndim != 5 or x.shape[1] != 2 * self.k:
            raise ShapeError(f"expected [B, {2 * self.k}, X, Y, Z], got {tuple(x.shape)}")
        indices = torch.as_tensor(index).reshape(-1).tolist()
        if len(indices) == 1:
            indices = indices * x.shape[0]
        for i in indices:
            self.network(int(i))
        shift = self.whiten_mean.reshape(1, -1, 1, 1, 1)
        white = self._apply_matrix(self.whiten_matrix, x - shift)
        out = self._run(white, [int(i) for i in indices])
        return self._apply_matrix(self.unwhiten_matrix, out) + shift

    def denoise(self, coeffs: torch.Tensor, index: int) -> torch.Tensor:
        """Denoise one complex coefficient volume ``[k, X, Y, Z]`` at iteration ``index``."""
        if coeffs.ndim != 4 or coeffs.shape[0] != self.k:
            raise ShapeError(f"expected [{self.k}, X, Y, Z], got {tuple(coeffs.shape)}")
        out = self.denoise_real(real_view(coeffs)[None], index)
        return complex_view(out[0])


def initial_estimate(op, data: torch.Tensor):
    """``s * A^H b`` with ``s = ||b|| / ||A A^H b||``; returns ``(alpha0, s)``."""
    normal_b = op.normal(data)
    projected = torch.linalg.vector_norm(op.apply(normal_b))
    norm_b = torch.linalg.vector_norm(data)
    scale = norm_b / projected if float(projected) > 0 else torch.ones((), dtype=REAL_DTYPE)
    return normal_b * scale, float(scale)


def zero_filled(op, data: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return initial_estimate(op, data)[0]


def dc_step(op, coeffs: torch.Tensor, normal_b: torch.Tensor, step: torch.Tensor):
    """``alpha - mu * (A^H A alpha - A^H b)``."""
    return coeffs - step * (op.gram(coeffs) - normal_b)


def unroll_step(
    model: DenoiserModel,
    op,
    coeffs: torch.Tensor,
    normal_b: torch.Tensor,
    index: int,
    use_checkpoint: bool = False,
) -> torch.Tensor:
    """One unroll iteration (1-based ``index``): DC update then denoising."""
    step = model.steps[index - 1]

    def dc(alpha: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
        return dc_step(op, alpha, normal_b, mu)

    def prior(alpha: torch.Tensor) -> torch.Tensor:
        return model.denoise(alpha, index)

    if use_checkpoint:
        half = checkpoint(dc, coeffs, step)
        out = checkpoint(prior, half)
    else:
        out = prior(dc(coeffs, step))
    if not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"non-finite coefficients after unroll iteration {index}", index)
    return out


class UnrollResult(NamedTuple):
    coeffs: torch.Tensor
    snapshots: List[torch.Tensor]
    scale: float


def unroll(
    model: DenoiserModel,
    op,
    data: torch.Tensor,
    keep_snapshots: bool = False,
    use_checkpoint: Optional[bool] = None,
) -> UnrollResult:
    """Run all ``N`` iterations from the scaled initialization."""
    if use_checkpoint is None:
        use_checkpoint = model.cfg.checkpoint
    data = torch.as_tensor(data, dtype=COMPLEX_DTYPE)
    with torch.no_grad():
        normal_b = op.normal(data)
        if model.cfg.init_scaling:
            alpha, scale = initial_estimate(op, data)
        else:
            alpha, scale = normal_b, 1.0
    snapshots = []
    for index in range(1, model.iterations + 1):
        alpha = unroll_step(model, op, alpha, normal_b, index, use_checkpoint)
        if keep_snapshots:
            snapshots.append(alpha)
    return UnrollResult(alpha, snapshots, scale)


def reconstruct(model: DenoiserModel, op, data) -> np.ndarray:
    """Inference: unroll without autodiff and return a numpy coefficient volume."""
    with torch.no_grad():
        return unroll(model, op, data, use_checkpoint=False).coeffs.numpy()


def save_model(directory: Path, model: DenoiserModel, extra: Optional[Dict[str, Any]] = None):
    manifest = {
        "kind": "model",
        "k": model.k,
        "unroll": model.cfg.to_dict(),
        "architecture": model.arch.to_dict(),
        "parameters": model.parameter_count(),
    }
    manifest.update(extra or {})
    save_bundle(directory, state_arrays(model), manifest)


def load_model(directory: Path) -> DenoiserModel:
    tensors, manifest = load_bundle(directory, "train")
    model = DenoiserModel(manifest["k"], UnrollConfig(**manifest["unroll"]))
    load_state_arrays(model, tensors)
    return model
