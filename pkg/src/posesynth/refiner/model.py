"""The full stage-2 refiner: conditioning encoders, geometry fusion, embeddings and both UNets."""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from posesynth._validation import InvalidArgumentError
from posesynth.refiner.blocks import (
    GEO_KINDS,
    CameraEmbedding,
    ConditionEncoder,
    MultiLayerGeometryFusion,
    TimeEmbedding,
    combine_embeddings,
)
from posesynth.refiner.codec import LATENT_CHANNELS
from posesynth.refiner.unet import DualBranchUNet, ReferenceUNet, UNetConfig, route_reference_cache

MLGF_INPUTS = {
    "full": GEO_KINDS,
    "no_texture": ("normal", "semantic"),
    "no_normal_semantic": ("texture",),
}


@dataclass
class MultiViewLatent:
    data: torch.Tensor  # (V, 4, h, w)
    domain: str

    def __post_init__(self):
        if self.domain not in ("rgb", "normal"):
            raise InvalidArgumentError(f"unknown latent domain {self.domain!r}")
        if self.data.ndim != 4 or self.data.shape[1] != LATENT_CHANNELS:
            raise InvalidArgumentError(f"latents must be (V, 4, h, w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise InvalidArgumentError("latents contain non-finite values")


@dataclass
class ConditioningBundle:
    """Everything the denoiser sees besides the noisy latents.

    ``features`` maps ``rgb``/``normal``/``geo`` to (V, 320, h, w) maps, plus
    ``latent_rgb``/``latent_normal`` for the concat strategy. ``ref_cache``
    maps attention-site names to reference-network features.
    """

    features: dict
    f_cam: torch.Tensor  # (V, 1024)
    ref_cache: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return self.f_cam.shape[0]

    def zeroed(self):
        z = lambda t: torch.zeros_like(t)
        return ConditioningBundle(
            {k: z(v) for k, v in self.features.items()},
            self.f_cam,
            {k: z(v) for k, v in self.ref_cache.items()},
        )

    def without_reference(self):
        return ConditioningBundle(dict(self.features), self.f_cam, {k: torch.zeros_like(v) for k, v in self.ref_cache.items()})


@dataclass
class RefinerConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    camera_inputs: int = 12
    mlgf_inputs: str = "full"
    reference_dropout: float = 0.1
    guidance_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if self.camera_inputs not in (9, 12):
            raise InvalidArgumentError("camera_inputs must be 9 or 12")
        if self.mlgf_inputs not in MLGF_INPUTS:
            raise InvalidArgumentError(f"mlgf_inputs must be one of {sorted(MLGF_INPUTS)}")

    def to_dict(self):
        return asdict(self)


class DualBranchRefiner(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or RefinerConfig()
        cfg = self.config.unet
        self.cond_encoders = nn.ModuleDict({d: ConditionEncoder() for d in cfg.domains})
        self.mlgf = MultiLayerGeometryFusion(cfg.cond_channels, kinds=MLGF_INPUTS[self.config.mlgf_inputs])
        self.camera_embed = CameraEmbedding(self.config.camera_inputs, cfg.embed_dim)
        self.time_embed = TimeEmbedding(cfg.embed_dim)
        self.unet = DualBranchUNet(cfg)
        self.reference_net = ReferenceUNet(cfg)
        self.ref_time_embed = TimeEmbedding(cfg.embed_dim)

    @property
    def domains(self):
        return self.config.unet.domains

    def frozen_modules(self):
        """Modules that phase 2 keeps fixed."""
        return {"mlgf": self.mlgf, "cond_encoders": self.cond_encoders,
                "reference_net": self.reference_net, "ref_time_embed": self.ref_time_embed}

    def denoiser_parameters(self):
        for m in (self.unet, self.camera_embed, self.time_embed):
            yield from m.parameters()

    def reference_network_forward(self, ref_latent, f_time=None):
        """Reference feature cache for one (1, 4, h, w) latent at the fixed t = 0 embedding."""
        if f_time is None:
            f_time = self.ref_time_embed(torch.zeros(1))
        return self.reference_net(ref_latent, f_time)

    def build_bundle(self, coarse_latents, geo_maps, cameras, ref_latents):
        """Assemble conditioning from coarse-render latents, condition maps and cameras.

        ``coarse_latents`` and ``ref_latents`` map domain -> latents; ``geo_maps``
        maps texture/normal/semantic -> (V, 3, H, W) images.
        """
        feats = {}
        cfg = self.config.unet
        for d in self.domains:
            lat = coarse_latents[d]
            if cfg.cond_strategy == "concat":
                feats["latent_" + d] = lat
                feats[d] = lat.new_zeros(lat.shape[0], cfg.cond_channels, *lat.shape[-2:])
            else:
                feats[d] = self.cond_encoders[d](lat)
        feats["geo"] = self.mlgf(geo_maps)
        f_cam = self.camera_embed.embed_cameras(cameras)
        caches = {d: self.reference_network_forward(ref_latents[d]) for d in self.domains}
        return ConditioningBundle(feats, f_cam, route_reference_cache(caches, self.domains))

    def unet_forward(self, noisy, bundle, t, view_attention=True):
        """Velocity predictions for each domain. ``noisy`` maps domain -> (V, 4, h, w)."""
        missing = [d for d in self.domains if d not in noisy]
        if missing:
            raise InvalidArgumentError(f"missing noisy latents for {missing}")
        need = list(self.domains) + ["geo"]
        if self.config.unet.cond_strategy == "concat":
            need += ["latent_" + d for d in self.domains]
        absent = [k for k in need if k not in bundle.features]
        if absent:
            raise InvalidArgumentError(f"conditioning bundle lacks {absent}")
        V = noisy[self.domains[0]].shape[0]
        if bundle.f_cam.shape[0] != V:
            raise InvalidArgumentError(f"camera embeddings for {bundle.f_cam.shape[0]} views, latents for {V}")
        f_time = self.time_embed(torch.as_tensor(np.asarray(t, dtype=np.float64).reshape(-1)[:1]))
        emb = combine_embeddings(bundle.f_cam, f_time.expand(V, -1))
        return self.unet(noisy, bundle.features, emb, bundle.ref_cache, view_attention)

    def forward(self, noisy, bundle, t, view_attention=True):
        return self.unet_forward(noisy, bundle, t, view_attention)
