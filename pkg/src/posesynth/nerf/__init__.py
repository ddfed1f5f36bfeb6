"""Coarse stage: a single-reference articulated radiance field."""

from posesynth.nerf.loss import LossWeights, nerf_loss
from posesynth.nerf.model import CoarseHumanNeRF, NeRFConfig, ReferenceFeatureMap
from posesynth.nerf.networks import NeRFMLP, ReferenceEncoder, positional_encoding
from posesynth.nerf.render import CoarseRender, RaySampleBatch, ray_box, sample_depths, volume_render
from posesynth.nerf.train import (
    NeRFTrainConfig,
    NumericFailure,
    fit_nerf,
    load_nerf,
    render_record,
    save_nerf,
)

__all__ = [
    "CoarseHumanNeRF",
    "CoarseRender",
    "LossWeights",
    "NeRFConfig",
    "NeRFMLP",
    "NeRFTrainConfig",
    "NumericFailure",
    "RaySampleBatch",
    "ReferenceEncoder",
    "ReferenceFeatureMap",
    "fit_nerf",
    "load_nerf",
    "nerf_loss",
    "positional_encoding",
    "ray_box",
    "render_record",
    "sample_depths",
    "save_nerf",
    "volume_render",
]
