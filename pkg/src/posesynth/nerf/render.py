"""Ray sampling and volume-rendering quadrature."""

from dataclasses import dataclass

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError

DEPTH_EPS = 1e-10
JITTER_MARGIN = 0.05


@dataclass
class RaySampleBatch:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3) unit
    depths: np.ndarray  # (N, S) strictly increasing
    far: np.ndarray  # (N,)

    @property
    def positions(self):
        return self.origins[:, None] + self.depths[..., None] * self.directions[:, None]


@dataclass
class CoarseRender:
    """Stage-1 output for one view. ``mask`` is always ``alpha > 0.5``."""

    rgb: object  # (H, W, 3)
    alpha: object  # (H, W)
    depth: object  # (H, W)
    mask: object = None

    def __post_init__(self):
        self.mask = self.alpha > 0.5

    def numpy(self):
        conv = lambda x: x.detach().cpu().numpy().astype(np.float64) if torch.is_tensor(x) else np.asarray(x)
        return CoarseRender(conv(self.rgb), conv(self.alpha), conv(self.depth))


def ray_box(origins, directions, lo, hi, min_length=1e-3):
    """Slab intersection; returns ``near, far, hit`` with ``near >= 0``.

    Rays whose chord through the box is shorter than ``min_length`` count as
    misses, which keeps float32 sample depths strictly increasing.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(tmin, 0.0)
    hit = tmax > near + min_length
    return near, tmax, hit


def sample_depths(near, far, n_samples, rng=None):
    """Stratified samples: bin midpoints when ``rng`` is None, jittered otherwise.

    Jitter stays ``JITTER_MARGIN`` of a bin away from its edges so neighbouring
    samples remain strictly ordered after a cast to float32.
    """
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    i = np.arange(n_samples, dtype=np.float64)
    u = np.full((near.shape[0], n_samples), 0.5) if rng is None else rng.uniform(JITTER_MARGIN, 1.0 - JITTER_MARGIN, (near.shape[0], n_samples))
    return near + (i + u) / n_samples * (far - near)


def volume_render(sigma, color, depths, far):
    """Alpha-composite samples along rays.

    ``sigma`` (N, S), ``color`` (N, S, 3), ``depths`` (N, S) strictly
    increasing, ``far`` (N,) closes the last interval. Returns ``rgb`` (N, 3),
    ``alpha`` (N,), ``depth`` (N,) and the per-sample ``weights``.
    """
    sigma = torch.as_tensor(sigma)
    color = torch.as_tensor(color)
    depths = torch.as_tensor(depths, dtype=sigma.dtype)
    far = torch.as_tensor(far, dtype=sigma.dtype).reshape(-1, 1).expand(depths.shape[0], 1)
    if depths.shape[1] > 1 and not bool((depths[:, 1:] > depths[:, :-1]).all()):
        raise InvalidArgumentError("sample depths must be strictly increasing along each ray")
    if bool((far[:, 0] < depths[:, -1]).any()):
        raise InvalidArgumentError("far bound lies before the last sample")
    delta = torch.cat([depths[:, 1:] - depths[:, :-1], far - depths[:, -1:]], dim=1)
    tau = sigma * delta
    # exclusive cumulative optical depth
    acc = torch.cat([torch.zeros_like(tau[:, :1]), torch.cumsum(tau, dim=1)[:, :-1]], dim=1)
    weights = torch.exp(-acc) * (1.0 - torch.exp(-tau))
    # the weights telescope to 1 - exp(-sum tau); clamp float roundoff above 1
    alpha = weights.sum(dim=1).clamp(0.0, 1.0)
    rgb = (weights[..., None] * color).sum(dim=1)
    depth = (weights * depths).sum(dim=1) / alpha.clamp_min(DEPTH_EPS)
    return rgb, alpha, depth, weights
