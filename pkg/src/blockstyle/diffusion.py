"""Deterministic DDIM (eta = 0) sampling and inversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import istn
from .attention import NO_INJECTION, InjectionConfig
from .errors import ConfigError, ImageIOError, NumericError, StepOrderError
from .kernel import as_tensor
from .unet import CTX_DIM, T_MAX, UNetTopology, unet_forward


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar[t]`` for t = 0..T with alpha_bar[0] = 1."""

    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if not 1 <= self.T <= T_MAX:
            raise ConfigError(f"schedule length must be in [1, {T_MAX}], got {self.T}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def timesteps(self, steps: int) -> list[int]:
        """Uniform descending subsequence T = t_0 > t_1 > ... > t_steps = 0."""
        if not 1 <= steps <= self.T:
            raise ConfigError(f"steps must be in [1, {self.T}], got {steps}")
        return [(i * self.T) // steps for i in range(steps, -1, -1)]


@dataclass(frozen=True)
class DiffusionTrajectory:
    latents: tuple
    timesteps: tuple

    @property
    def start(self) -> np.ndarray:
        return self.latents[0]

    @property
    def end(self) -> np.ndarray:
        return self.latents[-1]

    def to_bytes(self) -> bytes:
        rows, cols = self.latents[0].shape
        header = [len(self.latents), rows, cols, *self.timesteps]
        return istn.pack(np.concatenate([np.asarray(header, dtype=np.float64)] + [np.ravel(x) for x in self.latents]))

    @classmethod
    def from_bytes(cls, data: bytes) -> "DiffusionTrajectory":
        flat = istn.unpack(data)
        if flat.size < 3:
            raise ImageIOError("ISTN trajectory stream is truncated")
        count, rows, cols = (int(v) for v in flat[:3])
        need = 3 + count + count * rows * cols
        if flat.size != need:
            raise ImageIOError(f"ISTN trajectory stream has {flat.size} values, expected {need}")
        steps = tuple(int(v) for v in flat[3 : 3 + count])
        body = flat[3 + count :].reshape(count, rows, cols)
        return cls(tuple(body[i].copy() for i in range(count)), steps)


def _check_pair(t: int, t_prev: int, sched: NoiseSchedule):
    if not t > t_prev:
        raise StepOrderError(f"need t > t_prev, got t={t}, t_prev={t_prev}")
    if t_prev < 0 or t > sched.T:
        raise StepOrderError(f"timesteps ({t}, {t_prev}) outside [0, {sched.T}]")


def _finite(x: np.ndarray, t: int) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite latent at timestep {t}")
    return x


def ddim_step(x_t, eps, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    _check_pair(t, t_prev, sched)
    a_t, a_p = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0 = (x_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_p) * x0 + np.sqrt(1.0 - a_p) * eps


def ddim_invert_step(x_tprev, eps, t_prev: int, t: int, sched: NoiseSchedule) -> np.ndarray:
    _check_pair(t, t_prev, sched)
    a_t, a_p = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0 = (x_tprev - np.sqrt(1.0 - a_p) * eps) / np.sqrt(a_p)
    return np.sqrt(a_t) * x0 + np.sqrt(1.0 - a_t) * eps


_NULL_TEXT = np.zeros((1, CTX_DIM))


def noise_predictor(net, text_ctx=None, img_ctx=None, inj: InjectionConfig = NO_INJECTION, guidance: float = 1.0):
    """Wrap a denoiser into ``eps(x, t)``.

    ``net`` is a UNetTopology or any callable ``f(x, t)``. With ``guidance``
    other than 1 the prediction is ``uncond + g * (cond - uncond)``, where the
    unconditional pass sees a single zero text token and no image.
    """
    if not isinstance(net, UNetTopology):
        if not callable(net):
            raise ConfigError("net must be a UNetTopology or a callable eps(x, t)")
        return net
    if text_ctx is None:
        text_ctx = _NULL_TEXT

    def eps(x, t):
        cond = unet_forward(net, x, t, text_ctx, img_ctx, inj)
        if guidance == 1.0:
            return cond
        uncond = unet_forward(net, x, t, _NULL_TEXT)
        return uncond + guidance * (cond - uncond)

    return eps


def ddim_sample(net, sched: NoiseSchedule, x_T, text_ctx=None, img_ctx=None, inj: InjectionConfig = NO_INJECTION, steps: int | None = None, guidance: float = 1.0) -> DiffusionTrajectory:
    """Run the deterministic sampler from ``x_T`` down to timestep 0."""
    ts = sched.timesteps(sched.T if steps is None else steps)
    eps_fn = noise_predictor(net, text_ctx, img_ctx, inj, guidance)
    x = as_tensor(x_T)
    latents = [x]
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x = _finite(ddim_step(x, eps_fn(x, t), t, t_prev, sched), t_prev)
        latents.append(x)
    return DiffusionTrajectory(tuple(latents), tuple(ts))


def ddim_invert(net, sched: NoiseSchedule, x_0, text_ctx=None, steps: int | None = None, img_ctx=None, inj: InjectionConfig = NO_INJECTION, guidance: float = 1.0) -> DiffusionTrajectory:
    """Map ``x_0`` up to timestep T, evaluating eps at each step's source latent."""
    ts = sched.timesteps(sched.T if steps is None else steps)[::-1]
    eps_fn = noise_predictor(net, text_ctx, img_ctx, inj, guidance)
    x = as_tensor(x_0)
    latents = [x]
    for t_prev, t in zip(ts[:-1], ts[1:]):
        x = _finite(ddim_invert_step(x, eps_fn(x, t_prev), t_prev, t, sched), t)
        latents.append(x)
    return DiffusionTrajectory(tuple(latents), tuple(ts))


def round_trip_error(net, sched: NoiseSchedule, x_0, text_ctx=None, steps: int | None = None, guidance: float = 1.0) -> float:
    """Relative error ||sample(invert(x_0)) - x_0|| / ||x_0||."""
    x_0 = as_tensor(x_0)
    inv = ddim_invert(net, sched, x_0, text_ctx, steps, guidance=guidance)
    rec = ddim_sample(net, sched, inv.end, text_ctx, steps=steps, guidance=guidance).end
    return float(np.linalg.norm(rec - x_0) / np.linalg.norm(x_0))
