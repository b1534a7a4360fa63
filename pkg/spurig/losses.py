"""Tissue-weighted L1 and slice-sampled multi-scale SSIM losses."""
from logging import getLogger
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import REAL_DTYPE
from .shared import ShapeError, warning_suffix

LOGGER = getLogger(__name__)

GAUSSIAN_TAPS = 11
GAUSSIAN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
#: standard five-scale MS-SSIM exponents; shorter pyramids renormalize a prefix
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
#: floor applied to contrast-structure terms before exponentiation
CS_FLOOR = 1e-6


class TissueWeights(NamedTuple):
    wm: float = 10.0
    gm: float = 10.0
    csf: float = 1.0

    def check(self) -> "TissueWeights":
        if min(self) < 0:
            raise ValueError(f"tissue weights must be >= 0, got {tuple(self)}")
        return self

    def scaled(self, factor: float) -> "TissueWeights":
        return TissueWeights(*(factor * w for w in self))


def _voxel_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    diff = pred - target
    if diff.is_complex():
        diff = torch.view_as_real(diff).abs().sum(dim=-1)
    else:
        diff = diff.abs()
    return diff.sum(dim=-4)


def spatial_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    masks: Dict[str, torch.Tensor],
    weights: TissueWeights = TissueWeights(),
) -> torch.Tensor:
    """``sum_v lambda_v ||pred_v - target_v||_1`` over the real and imaginary parts.

    ``pred`` and ``target`` are complex ``[..., k, X, Y, Z]`` or real-channel
    ``[..., 2k, X, Y, Z]``; masks broadcast against ``[..., X, Y, Z]``.
    """
    weights.check()
    per_voxel = _voxel_l1(pred, target)
    loss = torch.zeros((), dtype=per_voxel.dtype)
    for name, weight in weights._asdict().items():
        if name not in masks or weight == 0:
            continue
        mask = torch.as_tensor(masks[name]).to(per_voxel.dtype)
        loss = loss + weight * torch.sum(per_voxel * mask)
    return loss


def gaussian_window(taps: int = GAUSSIAN_TAPS, sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    x = np.arange(taps) - (taps - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(images: torch.Tensor) -> torch.Tensor:
    """Separable valid-mode Gaussian filtering of ``[B, 1, H, W]``."""
    g = torch.as_tensor(gaussian_window(), dtype=images.dtype)
    out = F.conv2d(images, g.reshape(1, 1, -1, 1))
    return F.conv2d(out, g.reshape(1, 1, 1, -1))


def ssim_terms(x: torch.Tensor, y: torch.Tensor, data_range: torch.Tensor):
    """Mean luminance-contrast-structure and contrast-structure maps per image.

    ``x`` and ``y`` are ``[B, H, W]``; ``data_range`` is ``[B]``.
    """
    c1 = ((K1 * data_range) ** 2).reshape(-1, 1, 1, 1)
    c2 = ((K2 * data_range) ** 2).reshape(-1, 1, 1, 1)
    x, y = x[:, None], y[:, None]
    mu_x, mu_y = _filter(x), _filter(y)
    var_x = _filter(x * x) - mu_x**2
    var_y = _filter(y * y) - mu_y**2
    cov = _filter(x * y) - mu_x * mu_y
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def usable_scales(height: int, width: int, scales: int) -> int:
    """Largest pyramid depth (<= ``scales``) whose coarsest level fits the filter."""
    usable = 0
    while usable < scales and min(height, width) // 2**usable >= GAUSSIAN_TAPS:
        usable += 1
    return usable


def ms_ssim(x: torch.Tensor, y: torch.Tensor, data_range: torch.Tensor, scales: int = 3):
    """MS-SSIM of image batches ``[B, H, W]``; returns ``[B]``."""
    if scales < 1:
        raise ValueError(f"image {tuple(x.shape[-2:])} is smaller than the SSIM window")
    weights = torch.as_tensor(MS_SSIM_WEIGHTS[:scales], dtype=x.dtype)
    weights = weights / weights.sum()
    value = torch.ones(x.shape[0], dtype=x.dtype)
    for level in range(scales):
        full, cs = ssim_terms(x, y, data_range)
        if level == scales - 1:
            term = full
        else:
            term = cs
            x = F.avg_pool2d(x[:, None], 2)[:, 0]
            y = F.avg_pool2d(y[:, None], 2)[:, 0]
        value = value * torch.clamp(term, min=CS_FLOOR) ** weights[level]
    return value


def pick_slices(depth: int, count: int, seed: int) -> List[int]:
    if depth < 3:
        raise ValueError(f"MS-SSIM needs at least 3 axial slices, got {depth}")
    rng = np.random.default_rng(seed)
    if count >= depth:
        return list(range(depth))
    return sorted(rng.choice(depth, size=count, replace=False).tolist())


def ms_ssim_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    slice_count: int = 30,
    scales: int = 3,
    seed: int = 0,
    slices: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """``1 - MS-SSIM`` averaged over channels and seeded axial slices.

    Complex ``[k, X, Y, Z]`` inputs are compared on their signed real and imaginary
    channels; the SSIM dynamic range is the per-channel range of the target volume.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.is_complex():
        pred = torch.cat([pred.real, pred.imag], dim=0)
        target = torch.cat([target.real, target.imag], dim=0)
    if pred.ndim != 4:
        raise ShapeError(f"expected [channels, X, Y, Z], got {tuple(pred.shape)}")
    pred, target = pred.to(REAL_DTYPE), target.to(REAL_DTYPE)
    if slices is None:
        slices = pick_slices(target.shape[-1], slice_count, seed)
    chosen = list(slices)
    usable = usable_scales(target.shape[1], target.shape[2], scales)
    if usable < scales:
        LOGGER.warning(
            f"MS-SSIM scales reduced from {scales} to {usable} for "
            f"{tuple(target.shape[1:3])} slices {warning_suffix('losses')}"
        )
    channels = target.shape[0]
    flat_t = target.reshape(channels, -1)
    data_range = (flat_t.max(dim=1).values - flat_t.min(dim=1).values).detach()
    data_range = torch.where(data_range > 0, data_range, torch.ones_like(data_range))
    x = pred[..., chosen].permute(0, 3, 1, 2).reshape(-1, *pred.shape[1:3])
    y = target[..., chosen].permute(0, 3, 1, 2).reshape(-1, *target.shape[1:3])
    ranges = data_range.repeat_interleave(len(chosen))
    return 1 - ms_ssim(x, y, ranges, usable).mean()
