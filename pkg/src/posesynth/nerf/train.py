"""Stage-1 optimisation loop and checkpoint I/O."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError, NumericFailure
from posesynth.body import PosedBody
from posesynth.checkpoint import (
    load_checkpoint,
    load_module_arrays,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    save_checkpoint,
)
from posesynth.metrics import RandomConvPerceptual, psnr
from posesynth.nerf.loss import LossWeights, nerf_loss
from posesynth.nerf.model import CoarseHumanNeRF, NeRFConfig

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "nerf"


@dataclass
class NeRFTrainConfig:
    iterations: int = 2000
    lr: float = 2e-3
    lr_final: float = 1e-4
    warmup: int = 50
    samples: int = 64
    perceptual: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 100

    def to_dict(self):
        return asdict(self)


def learning_rate(step, config):
    """Linear warmup then exponential decay from ``lr`` to ``lr_final``."""
    if step < config.warmup:
        return config.lr * (step + 1) / config.warmup
    frac = min(1.0, (step - config.warmup) / max(config.iterations - config.warmup, 1))
    return config.lr * math.exp(frac * math.log(config.lr_final / config.lr))


class _BodyCache(dict):
    def get_body(self, template, key, pose, shape):
        if key not in self:
            self[key] = PosedBody(template, pose, shape)
        return self[key]


def fit_nerf(model, sequences, config=None, optimizer=None, start_step=0, callback=None):
    """Train ``model`` on whole target views of ``sequences``.

    Each step draws one (sequence, target) pair, re-encodes that sequence's
    reference, renders the full target with jittered samples and takes one
    Adam step. Returns ``(optimizer, history)``; ``history`` holds one dict
    per logged step. ``callback(step, model, optimizer)`` runs after every step.
    """
    config = config or NeRFTrainConfig()
    if not sequences:
        raise InvalidArgumentError("fit_nerf needs at least one sequence")
    torch.manual_seed(config.seed)
    optimizer = optimizer or torch.optim.Adam(model.parameters(), lr=config.lr)
    perceptual = RandomConvPerceptual() if config.perceptual else None
    if perceptual is not None:
        perceptual.to(model.dtype)
    bodies = _BodyCache()
    history = []
    model.train()
    for step in range(start_step, config.iterations):
        # every step derives its randomness from (seed, step) so resumption is exact
        rng = np.random.default_rng([config.seed, step])
        si = int(rng.integers(len(sequences)))
        seq = sequences[si]
        target = seq.targets[int(rng.integers(len(seq.targets)))]
        ref = seq.reference
        ref_body = bodies.get_body(model.template, (si, "ref"), ref.pose, ref.shape)
        tgt_body = bodies.get_body(model.template, (si, target.frame), target.pose, target.shape)

        refmap = model.encode_reference(ref.image, ref.camera, ref_body, None)
        out = model.render_view(refmap, tgt_body, None, target.camera, n_samples=config.samples, seed=int(rng.integers(1 << 31)))
        loss, comps = nerf_loss(out, target.image, target.mask, config.weights, perceptual)
        if not torch.isfinite(loss):
            raise NumericFailure(f"non-finite stage-1 loss at step {step}")
        for group in optimizer.param_groups:
            group["lr"] = learning_rate(step, config)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step % config.log_every == 0 or step == config.iterations - 1:
            rec = {"step": step, "loss": float(loss.detach())}
            rec.update({k: float(v.detach()) for k, v in comps.items()})
            rec["psnr"] = psnr(out.rgb.detach().numpy(), target.image)
            history.append(rec)
            log.info("nerf step %d loss %.4f psnr %.2f", step, rec["loss"], rec["psnr"])
        if callback is not None:
            callback(step, model, optimizer)
    model.eval()
    return optimizer, history


def render_record(model, sequence, record, n_samples=None, seed=0):
    """Evaluation render of one target record of ``sequence``."""
    ref = sequence.reference
    with torch.no_grad():
        refmap = model.encode_reference(ref.image, ref.camera, ref.pose, ref.shape)
        return model.render_view(refmap, record.pose, record.shape, record.camera, n_samples=n_samples, seed=seed)


def save_nerf(path, model, step, config_hash, optimizer=None, **extra):
    arrays = module_arrays(model, "model")
    if optimizer is not None:
        arrays.update(optimizer_arrays(optimizer))
    save_checkpoint(path, arrays, CHECKPOINT_KIND, step, config_hash, nerf_config=model.config.to_dict(), **extra)


def load_nerf(path, template, config_hash=None, with_optimizer=False):
    """Rebuild a model from a checkpoint; returns ``(model, step, optimizer or None)``."""
    arrays, manifest = load_checkpoint(path, CHECKPOINT_KIND, config_hash)
    model = CoarseHumanNeRF(template, NeRFConfig(**manifest["nerf_config"]))
    load_module_arrays(model, arrays, "model")
    model.eval()
    optimizer = None
    if with_optimizer:
        optimizer = torch.optim.Adam(model.parameters())
        if any(k.startswith("optim/") for k in arrays):
            load_optimizer_arrays(optimizer, arrays)
    return model, manifest["step"], optimizer
