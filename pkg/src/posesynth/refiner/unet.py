"""Dual-branch (rgb + normal) multi-view denoising UNet and its reference twin.

Layout at the default two resolution levels::

    conv_in[d] (+ projected conditioning) -> res/attn[d] -> down[d]      domain-specific
    mean over domains -> res/attn -> mid -> res/attn + up                 shared
    res/attn[d] (+ domain skips) -> out[d]                                domain-specific

Every attention site runs 1D view attention, sparse multi-view attention and
reference attention, in that order. The reference network mirrors this with
a single branch, plain spatial self-attention at each site, and records the
feature map entering each site.
"""

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from posesynth._validation import InvalidArgumentError
from posesynth.refiner.blocks import (
    EMBED_DIM,
    MultiViewAttention,
    ReferenceAttention,
    SpatialSelfAttention,
    ViewAttention1D,
)
from posesynth.refiner.codec import LATENT_CHANNELS

DOMAINS = ("rgb", "normal")
COND_STRATEGIES = ("conv_add", "concat")


@dataclass
class UNetConfig:
    base_channels: int = 64
    channel_mult: tuple = (1, 2)
    n_views: int = 4
    sparse_stride: int = 2
    cond_strategy: str = "conv_add"
    cond_channels: int = 320
    embed_dim: int = EMBED_DIM
    groups: int = 8
    use_normal_branch: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.n_views < 1:
            raise InvalidArgumentError("n_views must be >= 1")
        if len(self.channel_mult) != 2 or any(m <= 0 for m in self.channel_mult):
            raise InvalidArgumentError("channel_mult must hold two positive multipliers")
        if self.cond_strategy not in COND_STRATEGIES:
            raise InvalidArgumentError(f"cond_strategy must be one of {COND_STRATEGIES}")

    @property
    def channels(self):
        return tuple(self.base_channels * m for m in self.channel_mult)

    @property
    def domains(self):
        return DOMAINS if self.use_normal_branch else DOMAINS[:1]

    @property
    def in_channels(self):
        return 2 * LATENT_CHANNELS if self.cond_strategy == "concat" else LATENT_CHANNELS

    def to_dict(self):
        return asdict(self)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionSite(nn.Module):
    def __init__(self, channels, sparse_stride):
        super().__init__()
        self.view_1d = ViewAttention1D(channels)
        self.multiview = MultiViewAttention(channels, sparse_stride)
        self.reference = ReferenceAttention(channels)

    def forward(self, h, ref, view_attention):
        if view_attention:
            h = self.multiview(self.view_1d(h))
        return self.reference(h, ref)


def _main_sites(domains):
    return [f"down0.{d}" for d in domains] + ["down1", "mid", "up1"] + [f"up0.{d}" for d in domains]


REF_SITES = ("down0", "down1", "mid", "up1", "up0")


class _BranchHead(nn.Module):
    """Domain-specific input conv, first down level and last up level."""

    def __init__(self, cfg, site):
        super().__init__()
        c0, c1 = cfg.channels
        e = cfg.embed_dim
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        # no bias, so zero conditioning adds exactly zero
        self.cond_proj = nn.Conv2d(cfg.cond_channels, c0, 1, bias=False)
        self.res_down = ResBlock(c0, c0, e, cfg.groups)
        self.site_down = site(c0)
        self.down = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.res_up = ResBlock(c1 + c0, c0, e, cfg.groups)
        self.site_up = site(c0)
        self.res_out = ResBlock(2 * c0, c0, e, cfg.groups)
        self.norm_out = nn.GroupNorm(min(cfg.groups, c0), c0)
        self.conv_out = nn.Conv2d(c0, LATENT_CHANNELS, 3, padding=1)


class _SharedCore(nn.Module):
    def __init__(self, cfg, site):
        super().__init__()
        c0, c1 = cfg.channels
        e = cfg.embed_dim
        self.res_down = ResBlock(c0, c1, e, cfg.groups)
        self.site_down = site(c1)
        self.res_mid1 = ResBlock(c1, c1, e, cfg.groups)
        self.site_mid = site(c1)
        self.res_mid2 = ResBlock(c1, c1, e, cfg.groups)
        self.res_up = ResBlock(2 * c1, c1, e, cfg.groups)
        self.site_up = site(c1)


def _upsample(h):
    return F.interpolate(h, scale_factor=2, mode="nearest")


class DualBranchUNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        site = lambda c: AttentionSite(c, cfg.sparse_stride)
        self.branches = nn.ModuleDict({d: _BranchHead(cfg, site) for d in cfg.domains})
        self.core = _SharedCore(cfg, site)
        self.up_conv = nn.Conv2d(cfg.channels[1], cfg.channels[1], 3, padding=1)

    @property
    def site_names(self):
        return _main_sites(self.cfg.domains)

    def forward(self, latents, cond, emb, ref_cache=None, view_attention=True):
        """``latents``/``cond`` map domain -> (V, C, h, w); ``emb`` is (V, E).

        ``cond[d]`` is the projected-in conditioning (V, 320, h, w) for
        ``conv_add`` or the extra latent channels for ``concat``. Returns a
        dict of per-domain velocity predictions.
        """
        ref_cache = ref_cache or {}
        cfg = self.cfg
        skips, downs = {}, []
        for d in cfg.domains:
            br = self.branches[d]
            x = latents[d]
            if cfg.cond_strategy == "concat":
                h = br.conv_in(torch.cat([x, cond["latent_" + d]], dim=1)) + br.cond_proj(cond["geo"])
            else:
                h = br.conv_in(x) + br.cond_proj(cond[d] + cond["geo"])
            a = h
            h = br.site_down(br.res_down(h, emb), ref_cache.get(f"down0.{d}"), view_attention)
            skips[d] = (a, h)
            downs.append(br.down(h))
        # fuse domains before the shared levels
        h = torch.stack(downs).mean(0)
        core = self.core
        h = core.site_down(core.res_down(h, emb), ref_cache.get("down1"), view_attention)
        c = h
        h = core.res_mid1(h, emb)
        h = core.site_mid(h, ref_cache.get("mid"), view_attention)
        h = core.res_mid2(h, emb)
        h = core.site_up(core.res_up(torch.cat([h, c], 1), emb), ref_cache.get("up1"), view_attention)
        shared = self.up_conv(_upsample(h))
        out = {}
        for d in cfg.domains:
            br = self.branches[d]
            a, b = skips[d]
            h = br.site_up(br.res_up(torch.cat([shared, b], 1), emb), ref_cache.get(f"up0.{d}"), view_attention)
            h = br.res_out(torch.cat([h, a], 1), emb)
            out[d] = br.conv_out(F.silu(br.norm_out(h)))
        return out


class ReferenceUNet(nn.Module):
    """Single-branch mirror of the denoiser without view mixing.

    ``forward`` returns the feature map entering every attention site.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.channels
        e = cfg.embed_dim
        g = cfg.groups
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c0, 3, padding=1)
        self.res_down0 = ResBlock(c0, c0, e, g)
        self.site_down0 = SpatialSelfAttention(c0)
        self.down = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.res_down1 = ResBlock(c0, c1, e, g)
        self.site_down1 = SpatialSelfAttention(c1)
        self.res_mid1 = ResBlock(c1, c1, e, g)
        self.site_mid = SpatialSelfAttention(c1)
        self.res_mid2 = ResBlock(c1, c1, e, g)
        self.res_up1 = ResBlock(2 * c1, c1, e, g)
        self.site_up1 = SpatialSelfAttention(c1)
        self.up_conv = nn.Conv2d(c1, c1, 3, padding=1)
        self.res_up0 = ResBlock(c1 + c0, c0, e, g)

    def forward(self, latent, emb):
        if latent.ndim != 4 or latent.shape[0] != 1 or latent.shape[1] != LATENT_CHANNELS:
            raise InvalidArgumentError(f"reference latent must be (1, 4, h, w), got {tuple(latent.shape)}")
        cache = {}
        h = self.conv_in(latent)
        h = self.res_down0(h, emb)
        cache["down0"] = h
        h = self.site_down0(h)
        b = h
        h = self.res_down1(self.down(h), emb)
        cache["down1"] = h
        h = self.site_down1(h)
        c = h
        h = self.res_mid1(h, emb)
        cache["mid"] = h
        h = self.res_mid2(self.site_mid(h), emb)
        h = self.res_up1(torch.cat([h, c], 1), emb)
        cache["up1"] = h
        h = self.up_conv(_upsample(self.site_up1(h)))
        cache["up0"] = self.res_up0(torch.cat([h, b], 1), emb)
        return cache


def route_reference_cache(caches, domains):
    """Map per-domain reference caches onto the denoiser's attention sites.

    Domain-specific sites read their own domain; shared sites read the mean
    of the domains' caches.
    """
    out = {}
    for d in domains:
        out[f"down0.{d}"] = caches[d]["down0"]
        out[f"up0.{d}"] = caches[d]["up0"]
    for site in ("down1", "mid", "up1"):
        out[site] = torch.stack([caches[d][site] for d in domains]).mean(0)
    return out
