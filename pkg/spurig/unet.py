"""Iteration-conditioned residual UNet (3D, or 2D for slice-wise use)."""
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
import torch.nn.functional as F

from .autodiff import REAL_DTYPE, sinusoidal_embedding
from .shared import ShapeError

_LAYERS = {
    2: (nn.Conv2d, nn.ConvTranspose2d),
    3: (nn.Conv3d, nn.ConvTranspose3d),
}

IndexLike = Union[int, Sequence[int], torch.Tensor]


@dataclass(frozen=True)
class Architecture:
    """Shape of a denoiser network; ``in_channels`` is ``2k`` (real then imaginary)."""

    in_channels: int
    dims: int = 3
    base: int = 16
    levels: int = 4
    groups: int = 8
    se_reduction: int = 16
    embed_dim: int = 48
    cond_hidden: int = 32
    conditioned: bool = True

    def __post_init__(self):
        if self.dims not in _LAYERS:
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.in_channels < 2 or self.in_channels % 2:
            raise ValueError(f"in_channels must be a positive even count, got {self.in_channels}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base < self.groups or self.base % self.groups:
            raise ValueError(
                f"base filter count {self.base} must be a multiple of {self.groups} groups"
            )

    @property
    def multiple(self) -> int:
        """Spatial extents are padded to a multiple of this."""
        return 2**self.levels

    @property
    def widths(self) -> List[int]:
        return [self.base * 2 ** min(level, 3) for level in range(self.levels)]

    def block_widths(self) -> List[int]:
        """Channel count of every residual block: encoder, bottleneck, decoder."""
        widths = self.widths
        return widths + [widths[-1]] + widths[::-1]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.mean(dim=tuple(range(2, x.ndim)))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(squeeze))))
        return x * gate.reshape(gate.shape + (1,) * (x.ndim - 2))


def film(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``h' = (1 + gamma) * h + beta`` with per-sample, per-channel modulation."""
    shape = gamma.shape + (1,) * (h.ndim - 2)
    return (1 + gamma.reshape(shape)) * h + beta.reshape(shape)


class ResBlock(nn.Module):
    """Two width-3 convolutions with group normalization, SiLU, FiLM and squeeze-excite."""

    def __init__(self, c_in: int, c_out: int, arch: Architecture):
        super().__init__()
        conv, _ = _LAYERS[arch.dims]
        self.conv1 = conv(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(arch.groups, c_out)
        self.conv2 = conv(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(arch.groups, c_out)
        self.excite = SqueezeExcite(c_out, arch.se_reduction)
        self.skip = conv(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(
        self, x: torch.Tensor, modulation: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    ) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        if modulation is not None:
            h = film(h, *modulation)
        h = self.excite(F.silu(h))
        return h + self.skip(x)


class Conditioner(nn.Module):
    """Sinusoidal iteration embedding, a shared trunk and one zero-initialized
    scale/shift head per residual block."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.embed_dim = arch.embed_dim
        self.trunk = nn.Sequential(nn.Linear(arch.embed_dim, arch.cond_hidden), nn.SiLU())
        self.heads = nn.ModuleList(
            [nn.Linear(arch.cond_hidden, 2 * width) for width in arch.block_widths()]
        )
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def embed(self, index: IndexLike) -> torch.Tensor:
        indices = torch.as_tensor(index).reshape(-1).tolist()
        return torch.stack([sinusoidal_embedding(int(i), self.embed_dim) for i in indices])

    def forward(self, index: IndexLike) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        hidden = self.trunk(self.embed(index).to(self.trunk[0].weight.dtype))
        out = []
        for head in self.heads:
            gamma, beta = head(hidden).chunk(2, dim=1)
            out.append((gamma, beta))
        return out


def pad_to_multiple(x: torch.Tensor, multiple: int, dims: int):
    """Reflect-pad the trailing ``dims`` extents up to ``multiple``; returns the crop."""
    spatial = x.shape[-dims:]
    pads: List[int] = []
    crop = []
    for n in reversed(spatial):
        extra = (-n) % multiple
        pads += [extra // 2, extra - extra // 2]
    for n in spatial:
        extra = (-n) % multiple
        crop.append(slice(extra // 2, extra // 2 + n))
    if any(pads):
        x = F.pad(x, pads, mode="reflect")
    return x, (Ellipsis, *crop)


class UNet(nn.Module):
    """Encoder-decoder with a global residual path; the output convolution starts at zero
    so a fresh network is the identity."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        conv, up = _LAYERS[arch.dims]
        widths = arch.widths
        self.stem = conv(arch.in_channels, widths[0], 3, padding=1)
        self.encoders = nn.ModuleList([ResBlock(w, w, arch) for w in widths])
        downs = []
        for level, w in enumerate(widths):
            nxt = widths[min(level + 1, len(widths) - 1)]
            downs.append(conv(w, nxt, 3, stride=2, padding=1))
        self.downs = nn.ModuleList(downs)
        self.bottleneck = ResBlock(widths[-1], widths[-1], arch)
        ups, decoders = [], []
        previous = widths[-1]
        for w in reversed(widths):
            ups.append(up(previous, w, 2, stride=2))
            decoders.append(ResBlock(2 * w, w, arch))
            previous = w
        self.ups = nn.ModuleList(ups)
        self.decoders = nn.ModuleList(decoders)
        self.head = conv(widths[0], arch.in_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.conditioner = Conditioner(arch) if arch.conditioned else None
        self.to(REAL_DTYPE)

    def forward(self, x: torch.Tensor, index: IndexLike = 1) -> torch.Tensor:
        if x.ndim != self.arch.dims + 2 or x.shape[1] != self.arch.in_channels:
            raise ShapeError(
                f"expected [B, {self.arch.in_channels}, ...] with {self.arch.dims} spatial "
                f"axes, got {tuple(x.shape)}"
            )
        padded, crop = pad_to_multiple(x, self.arch.multiple, self.arch.dims)
        if self.conditioner is not None:
            mods: List[Optional[Tuple[torch.Tensor, torch.Tensor]]] = list(
                self.conditioner(index)
            )
            if mods[0][0].shape[0] == 1 and x.shape[0] > 1:
                mods = [(g.expand(x.shape[0], -1), b.expand(x.shape[0], -1)) for g, b in mods]
        else:
            mods = [None] * len(self.arch.block_widths())
        h = self.stem(padded)
        skips = []
        block = 0
        for encoder, down in zip(self.encoders, self.downs):
            h = encoder(h, mods[block])
            block += 1
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h, mods[block])
        block += 1
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            h = decoder(torch.cat([up(h), skip], dim=1), mods[block])
            block += 1
        return x + self.head(h)[crop]

    def conditioning_parameters(self) -> List[nn.Parameter]:
        return [] if self.conditioner is None else list(self.conditioner.parameters())
