"""Image quality metrics: PSNR, SSIM and a pluggable perceptual distance."""

from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F

from posesynth._validation import InvalidArgumentError, check_finite

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = (0.299, 0.587, 0.114)


def psnr(a, b, peak=1.0):
    """PSNR in dB; identical inputs report the cap value ``99.0``."""
    a = check_finite(np.asarray(a, dtype=np.float64), "a")
    b = check_finite(np.asarray(b, dtype=np.float64), "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(peak**2 / mse)), PSNR_CAP)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def to_luma(img):
    """(..., 3, H, W) -> (..., 1, H, W)."""
    w = torch.tensor(LUMA, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img * w).sum(dim=-3, keepdim=True)


def ssim_torch(a, b, data_range=1.0, luma=True):
    """Mean SSIM of (B, C, H, W) tensors over the valid window region.

    Differentiable; used both as a metric and as a training loss term.
    """
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InvalidArgumentError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if luma and a.shape[-3] == 3:
        a, b = to_luma(a), to_luma(b)
    C = a.shape[-3]
    g = gaussian_window(dtype=a.dtype).to(a.device)
    kx = g.view(1, 1, 1, -1).repeat(C, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(C, 1, 1, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kx, groups=C), ky, groups=C)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a**2
    s_bb = blur(b * b) - mu_b**2
    s_ab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return (num / den).mean()


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]


def ssim(a, b, data_range=1.0):
    """Mean local SSIM over luma for H x W x 3 (or H x W) images."""
    a = check_finite(np.asarray(a, dtype=np.float64), "a")
    b = check_finite(np.asarray(b, dtype=np.float64), "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    with torch.no_grad():
        return float(ssim_torch(_as_chw(a), _as_chw(b), data_range))


class PerceptualDistance(Protocol):
    """Distance between (B, 3, H, W) image batches; lower is more similar."""

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


class RandomConvPerceptual(torch.nn.Module):
    """Frozen, randomly initialised 4-layer conv net used as a feature-space distance.

    Stands in for a pretrained network so nothing has to be downloaded.
    """

    def __init__(self, seed=0, channels=(16, 32, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c in channels:
            conv = torch.nn.Conv2d(c_in, c, 3, stride=2 if c_in != 3 else 1, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * c_in)) ** 0.5, generator=gen)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c
        self.layers = torch.nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, a, b):
        total = 0.0
        x, y = a * 2 - 1, b * 2 - 1
        for conv in self.layers:
            x, y = F.relu(conv(x.to(conv.weight.dtype))), F.relu(conv(y.to(conv.weight.dtype)))
            nx = x / (x.pow(2).sum(1, keepdim=True).sqrt() + 1e-8)
            ny = y / (y.pow(2).sum(1, keepdim=True).sqrt() + 1e-8)
            total = total + (nx - ny).pow(2).sum(1).mean()
        return total / len(self.layers)
