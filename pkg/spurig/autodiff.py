"""Tensor plumbing on top of torch: complex views, centered FFTs, checkpointing,
activation accounting and the optimizer schedule.

Complex coefficient volumes cross the autodiff boundary as real tensors with the
real parts in the first ``k`` channels and the imaginary parts in the last ``k``.
"""
from contextlib import contextmanager
from logging import getLogger
import math
from typing import Callable, Dict, Iterable, List, Sequence, Tuple
import weakref

import numpy as np
import torch
from torch.utils import checkpoint as _torch_checkpoint

from .shared import ShapeError, warning_suffix

LOGGER = getLogger(__name__)

REAL_DTYPE = torch.float64
COMPLEX_DTYPE = torch.complex128

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def as_complex_tensor(value) -> torch.Tensor:
    """Convert an array-like to a complex128 tensor (no copy when possible)."""
    if isinstance(value, torch.Tensor):
        return value.to(COMPLEX_DTYPE)
    return torch.as_tensor(np.asarray(value), dtype=COMPLEX_DTYPE)


def real_view(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Split a complex tensor ``[k, ...]`` into a real ``[2k, ...]`` tensor."""
    if not x.is_complex():
        raise ShapeError(f"real_view expects a complex tensor, got {x.dtype}")
    return torch.cat([x.real, x.imag], dim=dim)


def complex_view(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Inverse of :func:`real_view`."""
    if x.is_complex():
        raise ShapeError("complex_view expects a real tensor")
    if x.shape[dim] % 2:
        raise ShapeError(
            f"complex_view needs an even channel count on dim {dim}, got {x.shape[dim]}"
        )
    real, imag = torch.chunk(x, 2, dim=dim)
    return torch.complex(real, imag)


def fftc(x: torch.Tensor, dims: Sequence[int] = (-3, -2, -1)) -> torch.Tensor:
    """Centered unitary FFT along ``dims``."""
    dims = tuple(dims)
    x = torch.fft.ifftshift(x, dim=dims)
    x = torch.fft.fftn(x, dim=dims, norm="ortho")
    return torch.fft.fftshift(x, dim=dims)


def ifftc(x: torch.Tensor, dims: Sequence[int] = (-3, -2, -1)) -> torch.Tensor:
    """Centered unitary inverse FFT along ``dims``."""
    dims = tuple(dims)
    x = torch.fft.ifftshift(x, dim=dims)
    x = torch.fft.ifftn(x, dim=dims, norm="ortho")
    return torch.fft.fftshift(x, dim=dims)


def checkpoint(segment: Callable[..., torch.Tensor], *inputs: torch.Tensor):
    """Run ``segment`` storing only its boundary inputs for the backward pass.

    The segment must be a pure function of its inputs and the parameters it closes over.
    """
    if not torch.is_grad_enabled():
        return segment(*inputs)
    return _torch_checkpoint.checkpoint(segment, *inputs, use_reentrant=False)


def gradients(
    loss: torch.Tensor, leaves: Sequence[torch.Tensor], retain_graph: bool = False
) -> List[torch.Tensor]:
    """Reverse-mode gradients of a real scalar ``loss`` w.r.t. ``leaves``.

    Leaves that do not influence the loss receive zero gradients.
    """
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.is_complex():
        raise ShapeError("loss must be real")
    grads = torch.autograd.grad(
        loss.reshape(()), list(leaves), retain_graph=retain_graph, allow_unused=True
    )
    return [
        torch.zeros_like(leaf) if grad is None else grad
        for leaf, grad in zip(leaves, grads)
    ]


class _SavedTensor:
    __slots__ = ("tensor", "__weakref__")

    def __init__(self, tensor: torch.Tensor):
        self.tensor = tensor


class ActivationCounter:
    """Track the bytes held by autograd for the backward pass.

    Use as a context manager around forward (and backward) passes. Tensors saved inside
    a checkpointed segment are not seen, since the segment does not store them.
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self.current_count = 0
        self.peak_count = 0
        self._hooks = None

    def _release(self, nbytes: int):
        self.current_bytes -= nbytes
        self.current_count -= 1

    def _pack(self, tensor: torch.Tensor):
        holder = _SavedTensor(tensor)
        nbytes = tensor.numel() * tensor.element_size()
        self.current_bytes += nbytes
        self.current_count += 1
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.peak_count = max(self.peak_count, self.current_count)
        weakref.finalize(holder, self._release, nbytes)
        return holder

    @staticmethod
    def _unpack(holder: _SavedTensor) -> torch.Tensor:
        return holder.tensor

    def reset_peak(self):
        self.peak_bytes = self.current_bytes
        self.peak_count = self.current_count

    def __enter__(self) -> "ActivationCounter":
        self._hooks = torch.autograd.graph.saved_tensors_hooks(self._pack, self._unpack)
        self._hooks.__enter__()
        return self

    def __exit__(self, *exc):
        self._hooks.__exit__(*exc)
        self._hooks = None
        return False


def make_optimizer(
    params: Iterable[torch.nn.Parameter], lr: float = 5e-3
) -> torch.optim.Adam:
    """Adam with the package-wide moment and epsilon settings."""
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def make_scheduler(
    optimizer: torch.optim.Optimizer, patience: int = 20, factor: float = 0.5
) -> torch.optim.lr_scheduler.ReduceLROnPlateau:
    """Halve the learning rate after ``patience`` validation epochs without improvement."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=factor, patience=patience
    )


def grads_finite(params: Iterable[torch.Tensor]) -> bool:
    for param in params:
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            return False
    return True


def adam_step(optimizer: torch.optim.Optimizer) -> bool:
    """Apply one optimizer step from the accumulated gradients.

    Returns ``False`` (and discards the gradients) when any gradient is non-finite.
    """
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if not grads_finite(params):
        LOGGER.warning(f"non-finite gradient, step skipped {warning_suffix('autodiff')}")
        optimizer.zero_grad(set_to_none=True)
        return False
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return True


def current_lr(optimizer: torch.optim.Optimizer) -> float:
    return float(optimizer.param_groups[0]["lr"])


def finite_difference_check(
    func: Callable[[], torch.Tensor],
    leaves: Sequence[torch.Tensor],
    n_entries: int = 20,
    step: float = 1e-5,
    seed: int = 0,
) -> List[Tuple[float, float]]:
    """Compare reverse-mode gradients with central differences on random entries.

    ``func`` recomputes the real scalar loss from the current values of ``leaves``.
    Returns ``(autodiff, finite_difference)`` pairs.
    """
    grads = gradients(func(), leaves)
    sizes = [leaf.numel() for leaf in leaves]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_entries, int(offsets[-1])), replace=False)
    pairs = []
    with torch.no_grad():
        for flat in sorted(int(p) for p in picks):
            leaf_index = int(np.searchsorted(offsets, flat, side="right") - 1)
            entry = flat - int(offsets[leaf_index])
            leaf = leaves[leaf_index].view(-1)
            original = leaf[entry].item()
            leaf[entry] = original + step
            plus = float(func())
            leaf[entry] = original - step
            minus = float(func())
            leaf[entry] = original
            fd = (plus - minus) / (2 * step)
            pairs.append((float(grads[leaf_index].reshape(-1)[entry]), fd))
    return pairs


def relative_gradient_gap(first: Sequence[torch.Tensor], second: Sequence[torch.Tensor]):
    """Relative distance between two gradient lists, taken over their concatenation."""
    a = torch.cat([g.reshape(-1) for g in first])
    b = torch.cat([g.reshape(-1) for g in second])
    scale = float(torch.linalg.vector_norm(b))
    diff = float(torch.linalg.vector_norm(a - b))
    return diff / scale if scale else diff


def sinusoidal_embedding(index: int, dim: int = 48) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of a small positive integer."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=REAL_DTYPE) / max(half - 1, 1)
    )
    angles = float(index) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


def parameter_count(params: Iterable[torch.Tensor]) -> int:
    return int(sum(p.numel() for p in params))


def state_arrays(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    """Parameters and buffers of a module as numpy arrays keyed by state-dict name."""
    return {
        name: value.detach().cpu().numpy() for name, value in module.state_dict().items()
    }


def load_state_arrays(module: torch.nn.Module, arrays: Dict[str, np.ndarray]):
    state = {name: torch.as_tensor(value) for name, value in arrays.items()}
    module.load_state_dict(state, strict=True)


@contextmanager
def seeded(seed: int):
    """Seed the global torch generator for module construction, restoring it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
