"""Stage-1 network pieces: reference encoder, voxel feature volume and the radiance MLP."""

import torch
import torch.nn.functional as F
from torch import nn

from posesynth._validation import InvalidArgumentError


def positional_encoding(x, n_bands):
    """``[x, sin(2^k x), cos(2^k x)]`` for k < n_bands."""
    if n_bands == 0:
        return x
    freqs = 2.0 ** torch.arange(n_bands, dtype=x.dtype, device=x.device)
    xb = x[..., None, :] * freqs[:, None]
    return torch.cat([x, torch.sin(xb).flatten(-2), torch.cos(xb).flatten(-2)], dim=-1)


def encoded_size(n_bands, dims=3):
    return dims * (1 + 2 * n_bands)


class ReferenceEncoder(nn.Module):
    """Strided conv encoder; stride 4 by default, ``channels`` output features."""

    def __init__(self, channels=32, width=32, stride=4, zero_init_output=False):
        super().__init__()
        if stride not in (1, 2, 4, 8):
            raise InvalidArgumentError("encoder stride must be a power of two <= 8")
        n_down = {1: 0, 2: 1, 4: 2, 8: 3}[stride]
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        self.stride = stride
        self.channels = channels
        if zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, image):
        """(B, 3, H, W) in [0, 1] -> (B, C, H / stride, W / stride)."""
        if not torch.isfinite(image).all():
            raise InvalidArgumentError("reference image contains non-finite values")
        return self.out(self.body(image * 2.0 - 1.0))


class VoxelFeatureNet(nn.Module):
    """Dense 3D conv stack over a feature grid spanning the canonical bounding box."""

    def __init__(self, in_channels=32, channels=32, n_layers=3):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(n_layers):
            layers.append(nn.Conv3d(c, channels, 3, padding=1))
            if i < n_layers - 1:
                layers.append(nn.SiLU())
            c = channels
        self.net = nn.Sequential(*layers)
        self.channels = channels

    def forward(self, grid):
        return self.net(grid)


def splat_to_grid(points, features, lo, hi, size):
    """Trilinear splat of per-point features into a (C, G, G, G) grid, averaged per cell.

    Grid axes are ordered (z, y, x) to match ``grid_sample``.
    """
    C = features.shape[1]
    g = (points - lo) / (hi - lo) * (size - 1)
    base = torch.floor(g).clamp(0, size - 2)
    frac = (g - base).clamp(0.0, 1.0)
    base = base.long()
    acc = features.new_zeros(size * size * size, C)
    wsum = features.new_zeros(size * size * size)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                w = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                idx = ((base[:, 2] + dz) * size + (base[:, 1] + dy)) * size + (base[:, 0] + dx)
                acc.index_add_(0, idx, features * w[:, None])
                wsum.index_add_(0, idx, w)
    grid = acc / wsum.clamp_min(1e-8)[:, None]
    return grid.t().reshape(C, size, size, size)


def sample_grid(grid, points, lo, hi):
    """Trilinear lookup of a (C, G, G, G) grid; exactly zero outside the box."""
    norm = (points - lo) / (hi - lo) * 2.0 - 1.0
    inside = (norm.abs() <= 1.0).all(dim=1)
    out = F.grid_sample(
        grid[None], norm.view(1, -1, 1, 1, 3).to(grid.dtype), mode="bilinear", align_corners=True
    )
    out = out.view(grid.shape[0], -1).t()
    return out * inside[:, None].to(out.dtype)


def sample_feature_map(fmap, pix, stride):
    """Bilinear lookup of a (C, Hf, Wf) map at image pixel coordinates (N, 2).

    Feature cell ``i`` covers image pixels ``stride*i .. stride*i + stride - 1``,
    so its centre sits at image coordinate ``stride*i + (stride - 1) / 2``.
    Points that project outside the map get zeros.
    """
    C, Hf, Wf = fmap.shape
    f = (pix - (stride - 1) / 2.0) / stride
    gx = f[:, 0] / max(Wf - 1, 1) * 2.0 - 1.0
    gy = f[:, 1] / max(Hf - 1, 1) * 2.0 - 1.0
    grid = torch.stack([gx, gy], dim=-1).view(1, -1, 1, 2).to(fmap.dtype)
    out = F.grid_sample(fmap[None], grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    return out.view(C, -1).t()


class NeRFMLP(nn.Module):
    """Density and colour from position, view direction and point features.

    ``sigma = softplus(raw)`` and ``color = sigmoid(raw)``.
    """

    def __init__(self, feature_dim, hidden=128, depth=4, pe_x=6, pe_d=4, zero_heads=False):
        super().__init__()
        self.pe_x, self.pe_d = pe_x, pe_d
        self.feature_dim = feature_dim
        in_dim = encoded_size(pe_x) + feature_dim
        layers = []
        for i in range(depth):
            layers.append(nn.Linear(in_dim if i == 0 else hidden, hidden))
        self.trunk = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(hidden, 1)
        self.bottleneck = nn.Linear(hidden, hidden)
        self.color_hidden = nn.Linear(hidden + encoded_size(pe_d), hidden // 2)
        self.color_head = nn.Linear(hidden // 2, 3)
        if zero_heads:
            for head in (self.sigma_head, self.color_head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def forward(self, x, d, rho):
        if rho.shape[-1] != self.feature_dim:
            raise InvalidArgumentError(f"point features have {rho.shape[-1]} dims, expected {self.feature_dim}")
        h = torch.cat([positional_encoding(x, self.pe_x), rho], dim=-1)
        for layer in self.trunk:
            h = F.relu(layer(h))
        sigma = F.softplus(self.sigma_head(h)[..., 0])
        h = torch.cat([self.bottleneck(h), positional_encoding(d, self.pe_d)], dim=-1)
        color = torch.sigmoid(self.color_head(F.relu(self.color_hidden(h))))
        return sigma, color
