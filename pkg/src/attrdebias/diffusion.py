"""DDPM schedule, forward noising, training loss, guidance and sampler.

Timesteps are model indices ``t in [0, T)``. The latent fed to the model
at index ``t`` has noise level ``alpha_bar[t]``; a reverse step at ``t``
produces the latent for ``t - 1`` (the clean sample after ``t = 0``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalDivergenceError
from .nn import backward


@dataclass(frozen=True)
class NoiseSchedule:
    T_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def sigma(self, t):
        """Ancestral-step standard deviation at index ``t`` (zero at ``t = 0``)."""
        if t == 0:
            return 0.0
        ab, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        return float(np.sqrt(self.beta[t] * (1.0 - ab_prev) / (1.0 - ab)))

    def to_dict(self):
        return {"T_steps": self.T_steps, "beta": self.beta.tolist()}


def make_schedule(T_steps=100, beta_min=1e-4, beta_max=0.2):
    if not isinstance(T_steps, (int, np.integer)) or T_steps < 2:
        raise ConfigError("T_steps", f"must be an integer >= 2, got {T_steps!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError("beta_min/beta_max", f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T_steps)
    alpha = 1.0 - beta
    return NoiseSchedule(int(T_steps), beta, alpha, np.cumprod(alpha))


def schedule_from_betas(beta):
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(len(beta), beta, alpha, np.cumprod(alpha))


def _check_t(t, sched):
    t = np.asarray(t)
    if np.any((t < 0) | (t >= sched.T_steps)):
        raise ValueError(f"timestep {t} outside [0, {sched.T_steps})")


def q_sample(x0, t, eps, sched):
    """Noise clean samples to index ``t``: ``sqrt(ab) x0 + sqrt(1 - ab) eps``."""
    _check_t(t, sched)
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ldm_loss(model, x0, cond, t, eps, sched, tape_mode="pretrain"):
    """Batch-mean squared error between ``eps`` and the model prediction.

    Returns ``(loss, grads)``; gradients are for every model parameter in
    ``pretrain`` mode.
    """
    x0 = np.atleast_2d(x0)
    eps = np.atleast_2d(eps)
    zt = q_sample(x0, np.broadcast_to(t, (len(x0),)), eps, sched)
    pred, tape = model.forward(zt, t, cond, tape_mode=tape_mode)
    diff = pred - eps
    B = len(x0)
    loss = float((diff ** 2).sum() / B)
    grads = backward(tape, 2.0 * diff / B)
    return loss, grads


def cfg_epsilon(model, z_t, cond, t, guidance_scale, adapters=None, uncond_id=0):
    """Classifier-free guided noise ``eps_u + s * (eps_c - eps_u)``."""
    eps_c = model.forward(z_t, t, cond, adapters=adapters)
    if guidance_scale == 1.0:
        return eps_c
    eps_u = model.forward(z_t, t, uncond_id, adapters=adapters)
    return eps_u + guidance_scale * (eps_c - eps_u)


@dataclass
class SampleTrajectory:
    latents: np.ndarray  # (T + 1, B, D): z_T ... z_0
    cond: object
    guidance_scale: float

    @property
    def z0(self):
        return self.latents[-1]


def reverse_step(z, t, eps, sched, noise):
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    mean = (z - coef * eps) / np.sqrt(sched.alpha[t])
    return mean + sched.sigma(t) * noise


def sample_from_noise(model, cond, sched, guidance_scale, noise, adapters=None, stop_at=None, keep=True):
    """Ancestral sampling driven by pre-drawn ``noise`` of shape ``(T + 1, B, D)``.

    ``noise[0]`` is the starting latent, ``noise[k]`` the ancestral noise for
    the ``k``-th reverse step. Sampling stops once the latent for index
    ``stop_at`` has been produced (default: run to the clean sample).
    """
    T = sched.T_steps
    z = noise[0]
    traj = [z] if keep else None
    last = -1 if stop_at is None else stop_at
    for k, t in enumerate(range(T - 1, last, -1), start=1):
        eps = cfg_epsilon(model, z, cond, t, guidance_scale, adapters=adapters)
        z = reverse_step(z, t, eps, sched, noise[k])
        if not np.all(np.isfinite(z)):
            raise NumericalDivergenceError(f"non-finite latent after reverse step t={t}", step=t)
        if keep:
            traj.append(z)
    return SampleTrajectory(np.stack(traj) if keep else z[None], cond, guidance_scale)


def draw_noise(rng, sched, n, dim):
    return rng.standard_normal((sched.T_steps + 1, n, dim))


def sample(model, cond, sched, guidance_scale=3.0, adapters=None, rng=None, n=1):
    """Draw ``n`` trajectories conditioned on ``cond`` (deterministic given ``rng``)."""
    rng = np.random.default_rng(rng)
    noise = draw_noise(rng, sched, n, model.spec.dim)
    return sample_from_noise(model, cond, sched, guidance_scale, noise, adapters=adapters)
