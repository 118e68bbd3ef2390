"""Reverse-process samplers under the x0-prediction parameterization.

``model`` is any callable ``model(x_t, t, **conditions) -> x0_hat`` where
``t`` is a ``LongTensor`` holding one timestep per batch element.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .schedule import NoiseSchedule

DEFAULT_CLAMP = (-0.1, 1.1)


class NonFiniteOutputError(RuntimeError):
    pass


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform-stride descending subsequence ``T = t_0 > ... > t_steps = 0``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    if np.any(np.diff(ts) >= 0):
        raise ValueError(f"steps={steps} does not give a strictly decreasing subsequence of T={T}")
    return ts


def _initial_noise(shape, seed: int, dtype, device) -> torch.Tensor:
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=dtype).to(device)


def _predict(model, x, t: int, conditions, clamp):
    tt = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
    x0 = model(x, tt, **conditions)
    if not torch.isfinite(x0).all():
        raise NonFiniteOutputError(f"model produced non-finite output at timestep {t}")
    if x0.shape != x.shape:
        raise ValueError(f"model output shape {tuple(x0.shape)} != input shape {tuple(x.shape)}")
    if clamp is not None:
        x0 = x0.clamp(*clamp)
    return x0


@torch.no_grad()
def ddim_sample(
    model: Callable,
    schedule: NoiseSchedule,
    steps: int,
    shape,
    conditions: dict | None = None,
    seed: int = 0,
    clamp: tuple[float, float] | None = DEFAULT_CLAMP,
    x_T: torch.Tensor | None = None,
    dtype=torch.float32,
    device="cpu",
    return_trajectory: bool = False,
):
    """Deterministic (eta = 0) DDIM sampling from ``x_T ~ N(0, I)``.

    Each step maps ``x_t`` to
    ``x_s = alpha[s] * x0_hat + sigma[s] * (x_t - alpha[t] * x0_hat) / sigma[t]``.
    """
    conditions = conditions or {}
    ts = ddim_timesteps(schedule.T, steps)
    x = x_T.clone() if x_T is not None else _initial_noise(shape, seed, dtype, device)
    traj = [x]
    for t, s in zip(ts[:-1], ts[1:]):
        x0 = _predict(model, x, int(t), conditions, clamp)
        a_t, s_t = schedule.alpha[t], schedule.sigma[t]
        a_s, s_s = schedule.alpha[s], schedule.sigma[s]
        eps_hat = (x - a_t * x0) / s_t
        x = a_s * x0 + s_s * eps_hat
        if not torch.isfinite(x).all():
            raise NonFiniteOutputError(f"non-finite state after step {t} -> {s}")
        traj.append(x)
    return (x, traj) if return_trajectory else x


@torch.no_grad()
def ddpm_ancestral_sample(
    model: Callable,
    schedule: NoiseSchedule,
    shape,
    conditions: dict | None = None,
    seed: int = 0,
    clamp: tuple[float, float] | None = DEFAULT_CLAMP,
    variance: str = "posterior",
    x_T: torch.Tensor | None = None,
    dtype=torch.float32,
    device="cpu",
    return_trajectory: bool = False,
):
    """Full-length ancestral sampling with a fixed reverse variance.

    ``variance="posterior"`` uses the true posterior variance of
    ``q(x_{t-1} | x_t, x0)`` (lower bound); ``"beta"`` uses the forward step
    variance (upper bound).
    """
    if variance not in ("posterior", "beta"):
        raise ValueError(f"unknown variance kind {variance!r}")
    conditions = conditions or {}
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    if x_T is not None:
        x = x_T.clone()
        torch.randn(shape, generator=gen, dtype=dtype)  # keep the noise stream aligned with the x_T=None path
    else:
        x = torch.randn(shape, generator=gen, dtype=dtype).to(device)
    traj = [x]
    for t in range(schedule.T, 0, -1):
        s = t - 1
        x0 = _predict(model, x, t, conditions, clamp)
        a_t, s_t = schedule.alpha[t], schedule.sigma[t]
        a_s, s_s = schedule.alpha[s], schedule.sigma[s]
        a_ts = a_t / a_s
        var_ts = max(s_t**2 - a_ts**2 * s_s**2, 0.0)
        mean = (a_ts * s_s**2 / s_t**2) * x + (a_s * var_ts / s_t**2) * x0
        var = var_ts * s_s**2 / s_t**2 if variance == "posterior" else var_ts
        noise = torch.randn(x.shape, generator=gen, dtype=dtype).to(x.device)
        x = mean + (np.sqrt(var) if s > 0 else 0.0) * noise
        if not torch.isfinite(x).all():
            raise NonFiniteOutputError(f"non-finite state after step {t} -> {s}")
        traj.append(x)
    return (x, traj) if return_trajectory else x
