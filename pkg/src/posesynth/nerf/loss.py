"""Composite stage-1 objective: reconstruction, mask BCE, SSIM and perceptual terms."""

from dataclasses import dataclass

import torch

from posesynth._validation import InvalidArgumentError
from posesynth.metrics import ssim_torch

BCE_EPS = 1e-6


@dataclass
class LossWeights:
    mask: float = 0.1
    ssim: float = 0.1
    lpips: float = 0.1


def nerf_loss(render, gt_image, gt_mask, weights=None, perceptual=None):
    """Return ``(total, components)``; every component is non-negative.

    ``render`` carries ``rgb`` (H, W, 3) and ``alpha`` (H, W) tensors. The
    perceptual term is skipped when ``perceptual`` is None or its weight is 0.
    """
    weights = weights or LossWeights()
    rgb, alpha = render.rgb, render.alpha
    gt_image = torch.as_tensor(gt_image, dtype=rgb.dtype)
    gt_mask = torch.as_tensor(gt_mask, dtype=rgb.dtype)
    if rgb.shape != gt_image.shape or alpha.shape != gt_mask.shape:
        raise InvalidArgumentError("render and ground truth shapes differ")
    if bool((alpha < 0).any()) or bool((alpha > 1).any()):
        raise InvalidArgumentError("alpha must lie in [0, 1]")

    recon = torch.mean((rgb - gt_image) ** 2)
    a = alpha.clamp(BCE_EPS, 1.0 - BCE_EPS)
    bce = -(gt_mask * torch.log(a) + (1 - gt_mask) * torch.log(1 - a)).mean()
    pred = rgb.permute(2, 0, 1)[None]
    target = gt_image.permute(2, 0, 1)[None]
    ssim_term = (1.0 - ssim_torch(pred, target)).clamp_min(0.0)
    comps = {"recon": recon, "mask": weights.mask * bce, "ssim": weights.ssim * ssim_term}
    if perceptual is not None and weights.lpips > 0:
        comps["lpips"] = weights.lpips * perceptual(pred, target).clamp_min(0.0)
    total = sum(comps.values())
    return total, comps
