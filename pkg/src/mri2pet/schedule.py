"""Variance-preserving noise schedules and the closed-form forward process.

Tables are indexed by integer timestep ``t = 0..T``. ``alpha[t]`` is the
signal coefficient and ``sigma[t]`` the noise coefficient of
``x_t = alpha[t] * x0 + sigma[t] * eps``, with ``alpha**2 + sigma**2 == 1``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

COSINE_OFFSET = 0.008
MIN_RETENTION = 0.001


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"
    _torch_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if alpha.shape != (self.T + 1,) or sigma.shape != (self.T + 1,):
            raise ValueError(f"tables must have T+1={self.T + 1} entries")
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)

    def validate(self) -> None:
        """Raise ``ValueError`` if any schedule invariant is violated."""
        if not np.allclose(self.alpha**2 + self.sigma**2, 1.0, atol=1e-6, rtol=0):
            raise ValueError("alpha^2 + sigma^2 != 1")
        if np.any(np.diff(self.sigma) < 0):
            raise ValueError("sigma must be nondecreasing")
        if self.sigma[0] > 1e-3:
            raise ValueError(f"sigma[0]={self.sigma[0]:.3g} exceeds 1e-3")
        if self.alpha[-1] > 0.05:
            raise ValueError(f"alpha[T]={self.alpha[-1]:.3g} exceeds 0.05")
        if np.any(self.alpha <= 0) or np.any(self.alpha > 1):
            raise ValueError("alpha must lie in (0, 1]")

    def coefficients(self, t, like: torch.Tensor):
        """(alpha_t, sigma_t) as tensors broadcastable against ``like``."""
        key = (like.dtype, like.device)
        if key not in self._torch_cache:
            self._torch_cache[key] = (
                torch.tensor(np.array(self.alpha), dtype=like.dtype, device=like.device),
                torch.tensor(np.array(self.sigma), dtype=like.dtype, device=like.device),
            )
        a_tab, s_tab = self._torch_cache[key]
        t = torch.as_tensor(t, device=like.device, dtype=torch.long)
        shape = (-1,) + (1,) * (like.dim() - 1) if t.dim() == 1 else ()
        return a_tab[t].reshape(shape), s_tab[t].reshape(shape)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(T=int(d["T"]), alpha=np.array(d["alpha"]), sigma=np.array(d["sigma"]), kind=d["kind"])

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        return cls.from_dict(json.loads(text))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _cosine_alpha_bar(T: int, s: float = COSINE_OFFSET) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    return f / f[0]


def build_schedule(kind: str = "cosine", T: int = 1000) -> NoiseSchedule:
    """Build a validated schedule of the given kind with ``T`` steps.

    The cosine schedule follows ``f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)``
    with ``s = 0.008``; the per-step retention ratio
    ``alpha_bar[t] / alpha_bar[t-1]`` is clipped below at 0.001 so the last
    step stays non-singular. ``linear`` is the DDPM beta ramp, rescaled to T.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "cosine":
        target = _cosine_alpha_bar(T)
        ratios = np.clip(target[1:] / target[:-1], MIN_RETENTION, 1.0)
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
        ratios = np.clip(1.0 - betas, MIN_RETENTION, 1.0)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(ratios)])
    sched = NoiseSchedule(T=T, alpha=np.sqrt(alpha_bar), sigma=np.sqrt(1.0 - alpha_bar), kind=kind)
    sched.validate()
    return sched


@dataclass
class DiffusionState:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor | None = None


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> DiffusionState:
    """Draw ``x_t ~ q(x_t | x0)`` using the supplied noise realization.

    ``t`` is either a scalar or a per-batch-element vector of timesteps.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long, device=x0.device)
    if torch.any(t < 0) or torch.any(t > schedule.T):
        raise ValueError(f"timesteps must lie in [0, {schedule.T}]")
    if t.dim() == 1 and t.shape[0] != x0.shape[0]:
        raise ValueError("per-element timesteps must match batch size")
    a, s = schedule.coefficients(t, x0)
    return DiffusionState(x_t=a * x0 + s * eps, t=t, eps=eps)
