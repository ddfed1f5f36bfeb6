"""Stage-2 data assembly, two-phase training, checkpoints and inference."""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError, NumericFailure
from posesynth.body import complete_texture, correspondence_map, project_to_uv, rasterize_condition_maps
from posesynth.checkpoint import (
    load_checkpoint,
    load_module_arrays,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    params_digest,
    save_checkpoint,
)
from posesynth.refiner.blocks import CallCounter
from posesynth.refiner.codec import make_codec
from posesynth.refiner.diffusion import sample, vpred_loss
from posesynth.refiner.model import DualBranchRefiner, RefinerConfig
from posesynth.refiner.schedule import make_schedule

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "refiner"


def _chw(images):
    """(V, H, W, 3) numpy -> (V, 3, H, W) float32 tensor."""
    return torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


@dataclass
class RefinerExample:
    """One subject/frame seen from ``len(views)`` target cameras, images as (V, 3, H, W)."""

    subject: int
    frame: int
    views: list
    cameras: list
    target_rgb: torch.Tensor
    target_normal: torch.Tensor
    coarse_rgb: torch.Tensor
    coarse_normal: torch.Tensor
    geo: dict
    ref_rgb: torch.Tensor
    ref_normal: torch.Tensor


@dataclass
class LatentExample:
    example: RefinerExample
    latents: dict
    coarse: dict
    ref: dict


def reference_texture(sequence, tex_size=64):
    """Completed UV texture unwrapped from the reference view."""
    ref = sequence.reference
    uv, mask, depth = correspondence_map(sequence.template, ref.pose, ref.shape, ref.camera)
    partial = project_to_uv(ref.image, uv, mask & ref.mask, tex_size=tex_size, depth=depth)
    return complete_texture(partial)


def build_examples(sequence, coarse, use_nerf_coarse=True, views=None, tex_size=64):
    """Group a sequence's targets by frame into multi-view refiner examples.

    ``coarse`` maps (view, frame) -> {"rgb": (H, W, 3), "normal": (H, W, 3)};
    with ``use_nerf_coarse`` off the coarse inputs are all zero.
    """
    uv_inpaint = reference_texture(sequence, tex_size)
    frames = sorted({r.frame for r in sequence.targets})
    examples = []
    for frame in frames:
        recs = sorted((r for r in sequence.targets if r.frame == frame), key=lambda r: r.view)
        if views is not None:
            recs = [r for r in recs if r.view in views]
        if not recs:
            continue
        geo = {"texture": [], "normal": [], "semantic": []}
        c_rgb, c_nrm = [], []
        for r in recs:
            maps = rasterize_condition_maps(sequence.template, r.pose, r.shape, r.camera, uv_inpaint)
            geo["texture"].append(maps.texture)
            geo["normal"].append(maps.normal)
            geo["semantic"].append(maps.semantic)
            if use_nerf_coarse:
                key = (r.view, r.frame)
                if key not in coarse:
                    raise InvalidArgumentError(f"no coarse render for view {r.view} frame {r.frame}")
                c_rgb.append(coarse[key]["rgb"])
                c_nrm.append(coarse[key]["normal"])
            else:
                c_rgb.append(np.zeros_like(r.image))
                c_nrm.append(np.zeros_like(r.image))
        ref = sequence.reference
        examples.append(RefinerExample(
            subject=sequence.subject,
            frame=frame,
            views=[r.view for r in recs],
            cameras=[r.camera for r in recs],
            target_rgb=_chw([r.image for r in recs]),
            target_normal=_chw([r.normal for r in recs]),
            coarse_rgb=_chw(c_rgb),
            coarse_normal=_chw(c_nrm),
            geo={k: _chw(v) for k, v in geo.items()},
            ref_rgb=_chw([ref.image]),
            ref_normal=_chw([ref.normal]),
        ))
    return examples


def encode_examples(codec, examples):
    out = []
    with torch.no_grad():
        for ex in examples:
            out.append(LatentExample(
                ex,
                latents={"rgb": codec.encode(ex.target_rgb, ex.coarse_rgb),
                         "normal": codec.encode(ex.target_normal, ex.coarse_normal)},
                coarse={"rgb": codec.encode(ex.coarse_rgb), "normal": codec.encode(ex.coarse_normal)},
                ref={"rgb": codec.encode(ex.ref_rgb), "normal": codec.encode(ex.ref_normal)},
            ))
    return out


def calibrate_codec(codec, examples):
    """Fit the codec's latent scale on the rgb and normal training targets."""
    targets = torch.cat([torch.cat([ex.target_rgb, ex.target_normal]) for ex in examples])
    anchors = torch.cat([torch.cat([ex.coarse_rgb, ex.coarse_normal]) for ex in examples])
    return codec.calibrate(targets, anchors)


@dataclass
class RefinerTrainConfig:
    steps: int = 500
    lr: float = 3e-4
    T: int = 1000
    seed: int = 0
    log_every: int = 50
    verify_freeze: bool = True
    grad_clip: float = 1.0

    def to_dict(self):
        return asdict(self)


class FreezeViolation(RuntimeError):
    pass


def _bundle(model, lat):
    dom = model.domains
    return model.build_bundle(
        {d: lat.coarse[d] for d in dom}, lat.example.geo, lat.example.cameras, {d: lat.ref[d] for d in dom}
    )


def frozen_digests(model):
    return {name: params_digest(m) for name, m in model.frozen_modules().items()}


def train_refiner(model, examples, phase, config=None, optimizer=None, start_step=0, phase1_done=False, callback=None):
    """Run phase 1 or phase 2 on encoded examples; returns ``(optimizer, history)``.

    Phase 1 updates every module with view attention switched off. Phase 2
    needs a finished phase 1 (``phase1_done``), freezes the geometry fusion,
    both condition encoders and the reference network, and trains only the
    denoiser with all attention on.
    """
    config = config or RefinerTrainConfig()
    if phase not in (1, 2):
        raise InvalidArgumentError(f"phase must be 1 or 2, got {phase}")
    if phase == 2 and not phase1_done:
        raise InvalidArgumentError("phase 2 needs a phase 1 checkpoint; run phase 1 first")
    if not examples:
        raise InvalidArgumentError("no training examples")
    sched = make_schedule(config.T)
    view_attention = phase == 2
    frozen = model.frozen_modules()
    for m in frozen.values():
        m.requires_grad_(phase == 1)
    params = list(model.parameters()) if phase == 1 else list(model.denoiser_parameters())
    optimizer = optimizer or torch.optim.Adam(params, lr=config.lr)
    before = frozen_digests(model) if phase == 2 and config.verify_freeze else None
    p_drop = model.config.reference_dropout
    history = []
    model.train()
    for step in range(start_step, config.steps):
        gen = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        lat = examples[int(torch.randint(len(examples), (1,), generator=gen))]
        if phase == 2:
            with torch.no_grad():
                bundle = _bundle(model, lat)
            # the camera embedding belongs to the denoiser and keeps training
            bundle.f_cam = model.camera_embed.embed_cameras(lat.example.cameras)
        else:
            bundle = _bundle(model, lat)
        if p_drop > 0 and float(torch.rand(1, generator=gen)) < p_drop:
            bundle = bundle.without_reference()
        batch = {"latents": {d: lat.latents[d] for d in model.domains}, "bundle": bundle}
        loss = vpred_loss(batch, model, sched, generator=gen, view_attention=view_attention)
        if not torch.isfinite(loss):
            raise NumericFailure(f"non-finite refiner loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        optimizer.step()
        if before is not None and frozen_digests(model) != before:
            raise FreezeViolation(f"frozen parameters changed at phase-2 step {step}")
        rec = {"step": step, "loss": float(loss.detach())}
        history.append(rec)
        if step % config.log_every == 0:
            log.info("refiner phase %d step %d loss %.4f", phase, step, rec["loss"])
        if callback is not None:
            callback(step, model, optimizer)
    model.eval()
    return optimizer, history


def refine(model, codec, lat, n_steps=50, seed=0, T=1000, view_attention=True):
    """Sample refined latents for one example and decode them to (V, H, W, 3) images."""
    sched = make_schedule(T)
    model.eval()
    with torch.no_grad():
        bundle = _bundle(model, lat)
        shape = tuple(lat.coarse["rgb"].shape)
        out = sample(model, bundle, sched, n_steps=n_steps, seed=seed, shape=shape, domains=model.domains,
                     guidance_scale=model.config.guidance_scale, view_attention=view_attention)
        anchor = {"rgb": lat.example.coarse_rgb, "normal": lat.example.coarse_normal}
        return {d: codec.decode(out[d], anchor[d]).clamp(0, 1).permute(0, 2, 3, 1).numpy() for d in out}


def save_refiner(path, model, phase, step, config_hash, optimizer=None, codec=None, T=1000, **extra):
    arrays = module_arrays(model, "model")
    if optimizer is not None:
        arrays.update(optimizer_arrays(optimizer))
    if codec is not None:
        arrays.update(module_arrays(codec, "codec"))
        extra["codec"] = {"kind": codec.kind}
    save_checkpoint(path, arrays, CHECKPOINT_KIND, step, config_hash, phase=int(phase),
                    refiner_config=model.config.to_dict(), schedule={"T": T, "kind": "cosine"}, **extra)


def load_refiner(path, config_hash=None, with_optimizer=False, phase=None):
    """Returns ``(model, codec or None, manifest, optimizer or None)``."""
    arrays, manifest = load_checkpoint(path, CHECKPOINT_KIND, config_hash)
    model = DualBranchRefiner(RefinerConfig(**manifest["refiner_config"]))
    load_module_arrays(model, arrays, "model")
    model.eval()
    codec = None
    if "codec" in manifest:
        spec = manifest["codec"]
        codec = make_codec(spec["kind"])
        load_module_arrays(codec, arrays, "codec")
        codec.eval()
    optimizer = None
    if with_optimizer:
        ph = manifest["phase"] if phase is None else phase
        params = list(model.parameters()) if ph == 1 else list(model.denoiser_parameters())
        optimizer = torch.optim.Adam(params)
        # moments only carry over within the same phase
        if ph == manifest["phase"] and any(k.startswith("optim/") for k in arrays):
            load_optimizer_arrays(optimizer, arrays)
    return model, codec, manifest, optimizer


__all__ = [
    "CallCounter",
    "FreezeViolation",
    "LatentExample",
    "RefinerExample",
    "RefinerTrainConfig",
    "build_examples",
    "calibrate_codec",
    "encode_examples",
    "frozen_digests",
    "load_refiner",
    "reference_texture",
    "refine",
    "save_refiner",
    "train_refiner",
]
