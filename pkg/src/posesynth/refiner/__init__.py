"""Refinement stage: a dual-branch rgb/normal multi-view latent diffusion model."""

from posesynth.refiner.blocks import (
    CallCounter,
    CameraEmbedding,
    ConditionEncoder,
    MultiLayerGeometryFusion,
    MultiViewAttention,
    ReferenceAttention,
    TimeEmbedding,
    ViewAttention1D,
    attention,
    camera_vector,
    combine_embeddings,
)
from posesynth.refiner.codec import LinearLatentCodec, make_codec
from posesynth.refiner.diffusion import sample, vpred_loss
from posesynth.refiner.model import (
    ConditioningBundle,
    DualBranchRefiner,
    MultiViewLatent,
    RefinerConfig,
)
from posesynth.refiner.schedule import (
    DiffusionSchedule,
    add_noise,
    ddim_step,
    make_schedule,
    predict_clean,
    sampling_times,
    v_target,
)
from posesynth.refiner.train import (
    FreezeViolation,
    LatentExample,
    RefinerExample,
    RefinerTrainConfig,
    build_examples,
    calibrate_codec,
    encode_examples,
    load_refiner,
    refine,
    save_refiner,
    train_refiner,
)
from posesynth.refiner.unet import DualBranchUNet, ReferenceUNet, UNetConfig


def unet_forward(model, rgb_t, normal_t, bundle, t, view_attention=True):
    """Tuple form of the denoiser call: ``(v_rgb, v_normal)``."""
    out = model.unet_forward({"rgb": rgb_t, "normal": normal_t}, bundle, t, view_attention)
    return out["rgb"], out.get("normal")


__all__ = [
    "CallCounter",
    "CameraEmbedding",
    "ConditionEncoder",
    "ConditioningBundle",
    "DiffusionSchedule",
    "DualBranchRefiner",
    "DualBranchUNet",
    "FreezeViolation",
    "LatentExample",
    "LinearLatentCodec",
    "MultiLayerGeometryFusion",
    "MultiViewAttention",
    "MultiViewLatent",
    "ReferenceAttention",
    "ReferenceUNet",
    "RefinerConfig",
    "RefinerExample",
    "RefinerTrainConfig",
    "TimeEmbedding",
    "UNetConfig",
    "ViewAttention1D",
    "add_noise",
    "attention",
    "build_examples",
    "calibrate_codec",
    "camera_vector",
    "combine_embeddings",
    "ddim_step",
    "encode_examples",
    "load_refiner",
    "make_codec",
    "make_schedule",
    "predict_clean",
    "refine",
    "sample",
    "sampling_times",
    "save_refiner",
    "train_refiner",
    "unet_forward",
    "v_target",
    "vpred_loss",
]
