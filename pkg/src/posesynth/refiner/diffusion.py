"""Velocity-prediction loss and the deterministic sampler."""

import torch

from posesynth._validation import InvalidArgumentError
from posesynth.refiner.schedule import add_noise, ddim_step, sampling_times, v_target


def vpred_loss(batch, model, sched, t=None, generator=None, **model_kwargs):
    """Mean over domains of the mean squared velocity error.

    ``batch`` holds ``latents`` (domain -> clean (V, 4, h, w)) and ``bundle``.
    One timestep is shared by all views and domains of the sample; it is drawn
    uniformly from [1, T] unless given. ``model(noisy, bundle, t, **kw)``
    returns domain -> predicted velocity.
    """
    latents = batch["latents"]
    if t is None:
        t = int(torch.randint(1, sched.T + 1, (1,), generator=generator))
    noisy, targets = {}, {}
    for d, x in latents.items():
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        noisy[d] = add_noise(x, eps, t, sched)
        targets[d] = v_target(x, eps, t, sched)
    pred = model(noisy, batch["bundle"], t, **model_kwargs)
    losses = [torch.mean((pred[d] - targets[d]) ** 2) for d in latents]
    return torch.stack(losses).mean()


def _guided(model, noisy, bundle, t, guidance_scale, **kw):
    v = model(noisy, bundle, t, **kw)
    if guidance_scale == 1.0:
        return v
    v_null = model(noisy, bundle.without_reference(), t, **kw)
    return {d: v_null[d] + guidance_scale * (v[d] - v_null[d]) for d in v}


def sample(model, bundle, sched, n_steps=50, seed=0, shape=None, domains=("rgb", "normal"), guidance_scale=1.0, **model_kwargs):
    """Deterministic sampling from pure noise at t = T down to clean latents.

    ``shape`` is the per-domain latent shape (V, 4, h, w); the initial noise
    comes from a generator seeded with ``seed``. Returns domain -> latents.
    """
    if n_steps < 1:
        raise InvalidArgumentError(f"need at least one sampling step, got {n_steps}")
    if shape is None:
        ref = next(iter(bundle.features.values()))
        shape = (ref.shape[0], 4, *ref.shape[-2:])
    gen = torch.Generator().manual_seed(int(seed))
    x = {d: torch.randn(shape, generator=gen) for d in domains}
    times = sampling_times(sched.T, n_steps)
    with torch.no_grad():
        for t, t_next in zip(times[:-1], times[1:]):
            v = _guided(model, x, bundle, int(t), guidance_scale, **model_kwargs)
            x = {d: ddim_step(x[d], v[d], int(t), int(t_next), sched) for d in domains}
    return x
