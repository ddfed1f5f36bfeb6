"""Image <-> 4-channel latent codec at 8x spatial reduction."""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from posesynth._validation import InvalidArgumentError

LATENT_CHANNELS = 4
FACTOR = 8


def _check_images(images):
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvalidArgumentError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    if images.shape[2] % FACTOR or images.shape[3] % FACTOR:
        raise InvalidArgumentError(f"image dims {tuple(images.shape[2:])} are not divisible by {FACTOR}")


def _projection_rows():
    """Four orthonormal rows over a 3x8x8 block (pixel_unshuffle order: c, dy, dx)."""
    c, y, x = np.meshgrid(np.arange(3), np.arange(FACTOR), np.arange(FACTOR), indexing="ij")
    centred = lambda a: (a - (FACTOR - 1) / 2.0) / FACTOR
    rows = [
        (c == 0).astype(np.float64),
        (c == 1).astype(np.float64),
        (c == 2).astype(np.float64),
        centred(y) + centred(x),
    ]
    P = np.stack([r.ravel() for r in rows])
    q, _ = np.linalg.qr(P.T)
    # fix signs so the colour rows stay positive block means
    q = q * np.sign(np.diag(q.T @ P.T))[None]
    return q.T


class LinearLatentCodec(nn.Module):
    """Space-to-depth packing to 192 channels, then a fixed projection to 4.

    ``decode`` applies the pseudo-inverse, so ``encode`` is exactly linear and
    ``encode(decode(z)) == z``. With ``anchored=True`` the codec works on the
    difference to an anchor image (the coarse render): ``decode(encode(x, a), a)``
    is ``a`` plus the orthogonal projection of ``x - a``, which is never
    farther from ``x`` than ``a`` itself. ``scale`` multiplies latents so the
    diffusion model sees roughly unit variance; see ``calibrate``.
    """

    def __init__(self, anchored=False):
        super().__init__()
        self.anchored = anchored
        # scale orthonormal rows so colour channels read as block means
        P = _projection_rows() / FACTOR
        self.register_buffer("proj", torch.tensor(P, dtype=torch.float32))
        self.register_buffer("proj_pinv", torch.tensor(np.linalg.pinv(P), dtype=torch.float32))
        self.register_buffer("scale", torch.tensor(1.0))

    @property
    def kind(self):
        return "residual" if self.anchored else "linear"

    def _anchor(self, images, anchor):
        if not self.anchored or anchor is None:
            return images
        if anchor.shape != images.shape:
            raise InvalidArgumentError(f"anchor shape {tuple(anchor.shape)} differs from {tuple(images.shape)}")
        return images - anchor

    def project(self, images):
        """Unscaled, unanchored projection of (B, 3, H, W) images."""
        _check_images(images)
        packed = F.pixel_unshuffle(images, FACTOR)
        return torch.einsum("kc,bchw->bkhw", self.proj.to(images.dtype), packed)

    def encode(self, images, anchor=None):
        _check_images(images)
        return self.project(self._anchor(images, anchor)) * self.scale.to(images.dtype)

    def decode(self, latents, anchor=None):
        z = latents / self.scale.to(latents.dtype)
        packed = torch.einsum("ck,bkhw->bchw", self.proj_pinv.to(latents.dtype), z)
        out = F.pixel_shuffle(packed, FACTOR)
        if self.anchored and anchor is not None:
            out = out + anchor
        return out

    def calibrate(self, images, anchors=None):
        """Set ``scale`` so the latents of ``images`` have unit standard deviation."""
        with torch.no_grad():
            z = self.project(self._anchor(images, anchors))
            std = float(z.std())
        self.scale.fill_(1.0 / std if std > 0 else 1.0)
        return float(self.scale)


def make_codec(kind="linear"):
    if kind == "linear":
        return LinearLatentCodec()
    if kind == "residual":
        return LinearLatentCodec(anchored=True)
    raise InvalidArgumentError(f"unknown codec {kind!r}; expected 'linear' or 'residual'")
