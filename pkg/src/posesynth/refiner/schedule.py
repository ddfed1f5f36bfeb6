"""Variance-preserving noise schedule and the velocity parameterisation."""

from dataclasses import dataclass

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError


@dataclass(frozen=True)
class DiffusionSchedule:
    """``alpha[t - 1]``, ``sigma[t - 1]`` for t = 1..T. t = 0 means clean data."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T) or np.any(t != np.round(t)):
            raise InvalidArgumentError(f"timestep must be an integer in [1, {self.T}], got {t}")
        return t.astype(np.int64)

    def coefficients(self, t, allow_zero=False):
        """``(alpha_t, sigma_t)`` as float64 arrays; ``t = 0`` gives (1, 0) when allowed."""
        t = np.asarray(t)
        if allow_zero and np.all(t == 0):
            return np.ones(t.shape), np.zeros(t.shape)
        t = self.check_t(t)
        return self.alpha[t - 1], self.sigma[t - 1]

    def to_dict(self):
        return {"T": self.T, "kind": self.kind}


def make_schedule(T=1000, kind="cosine"):
    if int(T) != T or T < 2:
        raise InvalidArgumentError(f"schedule needs T >= 2, got {T}")
    if kind != "cosine":
        raise InvalidArgumentError(f"unknown schedule kind {kind!r}")
    t = np.arange(1, T + 1, dtype=np.float64)
    phase = 0.5 * np.pi * t / T
    # cos/sin of the same angle already satisfy alpha^2 + sigma^2 = 1
    return DiffusionSchedule(int(T), np.cos(phase), np.sin(phase), kind)


def _broadcast(coef, like):
    c = torch.as_tensor(np.asarray(coef, dtype=np.float64), dtype=like.dtype)
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def add_noise(x, eps, t, sched):
    """``alpha_t x + sigma_t eps``; ``t`` is a scalar or one value per leading index."""
    if x.shape != eps.shape:
        raise InvalidArgumentError("latent and noise shapes differ")
    a, s = sched.coefficients(t)
    return _broadcast(a, x) * x + _broadcast(s, x) * eps


def v_target(x, eps, t, sched):
    """Velocity ``alpha_t eps - sigma_t x``."""
    if x.shape != eps.shape:
        raise InvalidArgumentError("latent and noise shapes differ")
    a, s = sched.coefficients(t)
    return _broadcast(a, x) * eps - _broadcast(s, x) * x


def predict_clean(x_t, v, t, sched):
    """Clean latent and noise implied by a velocity prediction."""
    a, s = sched.coefficients(t)
    a, s = _broadcast(a, x_t), _broadcast(s, x_t)
    return a * x_t - s * v, s * x_t + a * v


def sampling_times(T, n_steps):
    """Decreasing integer grid from T down to 1, ``n_steps`` long, followed by 0."""
    if n_steps < 1:
        raise InvalidArgumentError(f"need at least one sampling step, got {n_steps}")
    if n_steps > T:
        raise InvalidArgumentError(f"n_steps {n_steps} exceeds T={T}")
    grid = np.round(np.linspace(T, 1, n_steps)).astype(np.int64) if n_steps > 1 else np.array([T])
    return np.append(grid, 0)


def ddim_step(x_t, v, t, t_next, sched):
    """Deterministic move from ``t`` to ``t_next`` under the velocity parameterisation."""
    x0, eps = predict_clean(x_t, v, t, sched)
    a, s = sched.coefficients(t_next, allow_zero=True) if t_next == 0 else sched.coefficients(t_next)
    return _broadcast(a, x_t) * x0 + _broadcast(s, x_t) * eps
