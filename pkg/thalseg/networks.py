"""PyTorch modules for every network in the workflow.

- ConvBlock: 3x3x3 conv (bias) -> ReLU -> BatchNorm
- DPN: decoder-only pyramid starting from the 1/8 pooled input
- UNet3D: encoder-decoder baseline with doubling filters
- SynthesisNet: space-to-depth UNet regressing WMn, optional deep supervision
- SuperResNet: x2 trilinear upsampling plus a learned residual
- ConvAutoencoder: fixed-length latent code for any input size
- RegistrationNet / SpatialTransformer: dense displacement field and warp

All decoders upsample with trilinear interpolation (no transposed convs).
"""
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import VolumeError


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, padding_mode: str = "zeros"):
        super().__init__(
            nn.Conv3d(cin, cout, kernel_size=3, padding=1, padding_mode=padding_mode),
            nn.ReLU(inplace=True),
            nn.BatchNorm3d(cout),
        )


def conv_block_parameters(cin: int, cout: int) -> int:
    """27 weights per channel pair, conv bias, BN scale and shift."""
    return 27 * cin * cout + 3 * cout


def _stack(cin: int, cout: int, n: int, padding_mode: str = "zeros") -> nn.Sequential:
    layers = [ConvBlock(cin, cout, padding_mode)]
    layers += [ConvBlock(cout, cout, padding_mode) for _ in range(n - 1)]
    return nn.Sequential(*layers)


def _upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


def check_divisible(x: torch.Tensor, multiple: int) -> None:
    dims = tuple(x.shape[2:])
    if any(d % multiple for d in dims):
        raise VolumeError(f"input dims {dims} are not divisible by {multiple}; pad_to_multiple first")


def _head(activation: str, x: torch.Tensor) -> torch.Tensor:
    if activation == "softmax":
        return torch.softmax(x, dim=1)
    return x


class DPN(nn.Module):
    """Decoder-only pyramidal network.

    The input is average-pooled to every pyramid level. The coarsest level
    runs `coarse_blocks` conv blocks then dropout; each finer level
    upsamples, concatenates a conv-block view of the pooled input and
    applies `refine_blocks[i]` blocks. No dropout at full resolution.
    """

    def __init__(self, in_channels: int, out_channels: int, width: int = 56, levels: int = 4,
                 dropout: float = 0.2, coarse_blocks: int = 3, refine_blocks: Sequence[int] = (2, 2, 3),
                 head: str = "softmax"):
        super().__init__()
        if len(refine_blocks) != levels - 1:
            raise ValueError(f"refine_blocks needs {levels - 1} entries, got {len(refine_blocks)}")
        self.levels = levels
        self.head = head
        self.coarse = _stack(in_channels, width, coarse_blocks)
        self.coarse_dropout = nn.Dropout3d(dropout)
        self.input_convs = nn.ModuleList([ConvBlock(in_channels, width) for _ in refine_blocks])
        self.refines = nn.ModuleList([_stack(2 * width, width, n) for n in refine_blocks])
        self.dropouts = nn.ModuleList(
            [nn.Dropout3d(dropout) if i < levels - 2 else nn.Identity() for i in range(levels - 1)]
        )
        self.out = nn.Conv3d(width, out_channels, kernel_size=1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x, self.multiple)
        pyramid = [x]
        for _ in range(self.levels - 1):
            pyramid.append(F.avg_pool3d(pyramid[-1], 2))
        feat = self.coarse_dropout(self.coarse(pyramid[-1]))
        for i in range(self.levels - 1):
            level_input = pyramid[self.levels - 2 - i]
            up = _upsample(feat, level_input.shape[2:])
            feat = torch.cat([self.input_convs[i](level_input), up], dim=1)
            feat = self.dropouts[i](self.refines[i](feat))
        return _head(self.head, self.out(feat))


class UNet3D(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, width: int = 56, levels: int = 4,
                 dropout: float = 0.2, convs_per_level: int = 1, head: str = "softmax"):
        super().__init__()
        self.levels = levels
        self.head = head
        filters = [width * 2 ** i for i in range(levels)]
        self.encoders = nn.ModuleList()
        cin = in_channels
        for f in filters:
            self.encoders.append(_stack(cin, f, convs_per_level))
            cin = f
        self.bottleneck_dropout = nn.Dropout3d(dropout)
        self.decoders = nn.ModuleList(
            [_stack(filters[i] + filters[i + 1], filters[i], convs_per_level) for i in reversed(range(levels - 1))]
        )
        self.out = nn.Conv3d(filters[0], out_channels, kernel_size=1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x, self.multiple)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        x = self.bottleneck_dropout(skips.pop())
        for dec in self.decoders:
            skip = skips.pop()
            x = dec(torch.cat([skip, _upsample(x, skip.shape[2:])], dim=1))
        return _head(self.head, self.out(x))


def space_to_depth(x: torch.Tensor, block: int = 2) -> torch.Tensor:
    """(N, C, bX, bY, bZ) -> (N, b^3 C, X, Y, Z)."""
    n, c, dx, dy, dz = x.shape
    if dx % block or dy % block or dz % block:
        raise VolumeError(f"space_to_depth needs dims divisible by {block}, got {(dx, dy, dz)}")
    x = x.reshape(n, c, dx // block, block, dy // block, block, dz // block, block)
    x = x.permute(0, 1, 3, 5, 7, 2, 4, 6)
    return x.reshape(n, c * block ** 3, dx // block, dy // block, dz // block)


def depth_to_space(x: torch.Tensor, block: int = 2) -> torch.Tensor:
    """Inverse of space_to_depth."""
    n, c, dx, dy, dz = x.shape
    if c % block ** 3:
        raise VolumeError(f"depth_to_space needs channels divisible by {block ** 3}, got {c}")
    out_c = c // block ** 3
    x = x.reshape(n, out_c, block, block, block, dx, dy, dz)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(n, out_c, dx * block, dy * block, dz * block)


class SynthesisNet(nn.Module):
    """UNet on space-to-depth features; linear heads regress intensities.

    With deep supervision every coarser decoder level gets its own linear
    head; `forward_with_aux` returns those predictions finest first.
    """

    def __init__(self, in_channels: int = 1, out_channels: int = 1, width: int = 16, levels: int = 3,
                 deeply_supervised: bool = True):
        super().__init__()
        self.levels = levels
        self.deeply_supervised = deeply_supervised
        filters = [width * 2 ** i for i in range(levels)]
        self.encoders = nn.ModuleList()
        cin = in_channels * 8
        for f in filters:
            self.encoders.append(_stack(cin, f, 2))
            cin = f
        self.decoders = nn.ModuleList(
            [_stack(filters[i] + filters[i + 1], filters[i], 2) for i in reversed(range(levels - 1))]
        )
        self.out = nn.Conv3d(filters[0], out_channels * 8, kernel_size=1)
        self.aux_heads = nn.ModuleList()
        if deeply_supervised:
            self.aux_heads = nn.ModuleList(
                [nn.Conv3d(filters[i], out_channels * 8, kernel_size=1) for i in reversed(range(1, levels))]
            )

    @property
    def multiple(self) -> int:
        return 2 ** self.levels

    def forward_with_aux(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        check_divisible(x, self.multiple)
        x = space_to_depth(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        aux = []
        for j, dec in enumerate(self.decoders):
            if self.deeply_supervised:
                aux.append(depth_to_space(self.aux_heads[j](x)))
            skip = skips.pop()
            x = dec(torch.cat([skip, _upsample(x, skip.shape[2:])], dim=1))
        return depth_to_space(self.out(x)), aux[::-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_aux(x)[0]


class SuperResNet(nn.Module):
    """x2 superresolution; replicate padding keeps constant inputs constant."""

    def __init__(self, in_channels: int = 1, width: int = 16, n_blocks: int = 3, factor: int = 2):
        super().__init__()
        if factor != 2:
            raise ValueError("only factor 2 superresolution is supported")
        self.factor = factor
        self.body = _stack(in_channels, width, n_blocks, padding_mode="replicate")
        self.out = nn.Conv3d(width, in_channels, kernel_size=3, padding=1, padding_mode="replicate")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = tuple(self.factor * s for s in x.shape[2:])
        base = _upsample(x, size)
        return base + self.out(self.body(base))


class ConvAutoencoder(nn.Module):
    def __init__(self, in_channels: int = 1, width: int = 8, latent_dim: int = 32):
        super().__init__()
        self.latent_dim = latent_dim
        w = [width, 2 * width, 4 * width]
        self.encoder = nn.Sequential(
            nn.Conv3d(in_channels, w[0], 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv3d(w[0], w[1], 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv3d(w[1], w[2], 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool3d(4),
        )
        self.to_latent = nn.Linear(w[2] * 64, latent_dim)
        self.from_latent = nn.Linear(latent_dim, w[2] * 64)
        self.dec = nn.ModuleList([
            nn.Conv3d(w[2], w[1], 3, padding=1),
            nn.Conv3d(w[1], w[0], 3, padding=1),
            nn.Conv3d(w[0], in_channels, 3, padding=1),
        ])
        self._w = w

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.encoder(x).flatten(1))

    def decode(self, z: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
        x = self.from_latent(z).reshape(z.shape[0], self._w[2], 4, 4, 4)
        for i, conv in enumerate(self.dec):
            scale = 2 ** (len(self.dec) - 1 - i)
            x = _upsample(x, tuple(max(1, s // scale) for s in shape))
            x = conv(x)
            if i < len(self.dec) - 1:
                x = F.relu(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x), x.shape[2:])


class SpatialTransformer(nn.Module):
    """Warp `src` by a displacement field given in voxel units (N, 3, X, Y, Z)."""

    def __init__(self, mode: str = "bilinear"):
        super().__init__()
        self.mode = mode

    def forward(self, src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        if src.shape[2:] != flow.shape[2:]:
            raise VolumeError(f"image {tuple(src.shape[2:])} and field {tuple(flow.shape[2:])} differ in shape")
        shape = flow.shape[2:]
        vectors = [torch.arange(0, s, dtype=flow.dtype, device=flow.device) for s in shape]
        grid = torch.stack(torch.meshgrid(vectors, indexing="ij")).unsqueeze(0)
        new_locs = grid + flow
        scaled = [2.0 * (new_locs[:, i] / max(shape[i] - 1, 1) - 0.5) for i in range(3)]
        new_locs = torch.stack(scaled, dim=-1)[..., [2, 1, 0]]
        return F.grid_sample(src.to(flow.dtype), new_locs, align_corners=True, mode=self.mode,
                             padding_mode="border")


def smoothness_loss(flow: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference of the field along each axis."""
    dx = flow[:, :, 1:] - flow[:, :, :-1]
    dy = flow[:, :, :, 1:] - flow[:, :, :, :-1]
    dz = flow[:, :, :, :, 1:] - flow[:, :, :, :, :-1]
    return (dx.pow(2).mean() + dy.pow(2).mean() + dz.pow(2).mean()) / 3.0


class RegistrationNet(nn.Module):
    """Small voxelmorph-style UNet: (moving, fixed) -> displacement field.

    The flow head starts at zero so an untrained net is the identity warp.
    """

    def __init__(self, width: int = 8, levels: int = 3):
        super().__init__()
        self.levels = levels
        filters = [width * 2 ** min(i, 1) for i in range(levels)]
        self.encoders = nn.ModuleList()
        cin = 2
        for f in filters:
            self.encoders.append(nn.Sequential(nn.Conv3d(cin, f, 3, padding=1), nn.LeakyReLU(0.2)))
            cin = f
        self.decoders = nn.ModuleList([
            nn.Sequential(nn.Conv3d(filters[i] + filters[i + 1], filters[i], 3, padding=1), nn.LeakyReLU(0.2))
            for i in reversed(range(levels - 1))
        ])
        self.flow = nn.Conv3d(filters[0], 3, kernel_size=3, padding=1)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)
        self.transformer = SpatialTransformer("bilinear")

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        if moving.shape != fixed.shape:
            raise VolumeError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ in shape")
        check_divisible(moving, self.multiple)
        x = torch.cat([moving, fixed], dim=1)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        for dec in self.decoders:
            skip = skips.pop()
            x = dec(torch.cat([skip, _upsample(x, skip.shape[2:])], dim=1))
        return self.flow(x)

    def register(self, moving: torch.Tensor, fixed: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        flow = self.forward(moving, fixed)
        return self.transformer(moving, flow), flow
