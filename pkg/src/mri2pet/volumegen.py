"""2.5D volumetric generation: N-slice windows in, fused 3D volume out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataio import Volume3D
from .sampler import NonFiniteOutputError, ddim_sample

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ValueError(f"unknown axis {axis!r}")
        return AXES[axis]
    return int(axis)


def _check_width(N: int):
    if N < 1 or N % 2 == 0:
        raise ValueError(f"window width N must be a positive odd integer, got {N}")


def stack_indices(k: int, N: int, depth: int) -> np.ndarray:
    """Source slice held by each channel: ``clamp(k + j - (N-1)/2, 0, depth-1)``."""
    _check_width(N)
    if not 0 <= k < depth:
        raise IndexError(f"slice index {k} outside [0, {depth})")
    return np.clip(np.arange(N) + k - (N - 1) // 2, 0, depth - 1)


@dataclass
class SliceStack:
    data: np.ndarray  # (N, H, W)
    target_index: int
    axis: str = "axial"

    @property
    def N(self) -> int:
        return self.data.shape[0]


def extract_stack(volume: Volume3D | np.ndarray, k: int, N: int, axis="axial") -> SliceStack:
    data = volume.data if isinstance(volume, Volume3D) else np.asarray(volume)
    ax = _axis_index(axis)
    moved = np.moveaxis(data, ax, 0)
    idx = stack_indices(k, N, moved.shape[0])
    name = axis if isinstance(axis, str) else {v: k_ for k_, v in AXES.items()}[ax]
    return SliceStack(moved[idx].copy(), int(k), name)


def all_stacks(volume, N: int, axis="axial") -> np.ndarray:
    """Every window of ``volume`` along ``axis`` as one ``(depth, N, H, W)`` array."""
    data = volume.data if isinstance(volume, Volume3D) else np.asarray(volume)
    moved = np.moveaxis(data, _axis_index(axis), 0)
    depth = moved.shape[0]
    idx = np.stack([stack_indices(k, N, depth) for k in range(depth)])
    return moved[idx]


@dataclass(frozen=True)
class FusionWeights:
    w: np.ndarray


def fusion_weights(N: int) -> FusionWeights:
    """Triangular weights ``(N+1)/2 - |j - (N-1)/2|``, peaking at the centre."""
    _check_width(N)
    j = np.arange(N)
    return FusionWeights(((N + 1) / 2 - np.abs(j - (N - 1) / 2)).astype(np.float64))


def fuse_stacks(stacks, weights: FusionWeights, depth: int) -> Volume3D:
    """Weighted average of overlapping predicted windows.

    Channels whose offset falls outside ``[0, depth)`` are boundary padding
    and do not contribute. Every slice receives its own window's centre
    channel, so no denominator is zero.
    """
    stacks = list(stacks)
    positions = sorted(s.target_index for s in stacks)
    if positions != list(range(depth)):
        missing = sorted(set(range(depth)) - set(positions))
        raise ValueError(f"need exactly one stack per slice position; missing {missing[:10]}")
    N = len(weights.w)
    shape = stacks[0].data.shape
    if shape[0] != N or any(s.data.shape != shape for s in stacks):
        raise ValueError("inconsistent stack shapes")
    if len({s.axis for s in stacks}) != 1:
        raise ValueError("stacks mix different axes")
    acc = np.zeros((depth,) + shape[1:], dtype=np.float64)
    den = np.zeros(depth, dtype=np.float64)
    half = (N - 1) // 2
    for s in stacks:
        for j in range(N):
            z = s.target_index + j - half
            if 0 <= z < depth:
                acc[z] += weights.w[j] * s.data[j]
                den[z] += weights.w[j]
    out = acc / den[:, None, None]
    ax = _axis_index(stacks[0].axis)
    return Volume3D(np.moveaxis(out, 0, ax).astype(np.float32), modality="PET")


@dataclass
class SamplerConfig:
    steps: int = 100
    seed: int = 0
    N: int = 5
    axis: str = "axial"
    clamp: tuple | None = (-0.1, 1.1)
    batch_size: int = 32
    slice_position: bool = False


def slice_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


@torch.no_grad()
def generate_volume(model, mri_volume: Volume3D, clinical, sampler_config: SamplerConfig | None = None,
                    schedule=None) -> Volume3D:
    """Translate a whole MRI volume slice-window by slice-window and fuse.

    ``model`` is a ``DualArmModel`` in M2P mode (or a dict ``axis -> model``
    when ``axis == "average3"``). ``clinical`` is the standardized clinical
    tensor (9,) or ``None``.
    """
    cfg = sampler_config or SamplerConfig()
    if cfg.axis == "average3":
        vols = []
        for axis in ("axial", "coronal", "sagittal"):
            m = model[axis] if isinstance(model, dict) else model
            sub = SamplerConfig(**{**cfg.__dict__, "axis": axis})
            vols.append(generate_volume(m, mri_volume, clinical, sub, schedule).data)
        return Volume3D(np.mean(vols, axis=0), voxel_size_mm=mri_volume.voxel_size_mm, modality="PET")
    if schedule is None:
        raise ValueError("a noise schedule is required")
    data = np.asarray(mri_volume.data, dtype=np.float32)
    stacks = torch.from_numpy(all_stacks(data, cfg.N, cfg.axis))
    depth = stacks.shape[0]
    dtype = next(model.parameters()).dtype
    preds = []
    for start in range(0, depth, cfg.batch_size):
        ks = list(range(start, min(start + cfg.batch_size, depth)))
        src = stacks[ks].to(dtype)
        clin = None if clinical is None else torch.as_tensor(clinical, dtype=dtype).reshape(1, -1).expand(len(ks), -1)
        z = torch.tensor([k / max(depth - 1, 1) for k in ks], dtype=dtype) if cfg.slice_position else None
        x_T = torch.cat([
            torch.randn((1,) + tuple(src.shape[1:]), generator=torch.Generator().manual_seed(slice_seed(cfg.seed, k)),
                        dtype=dtype)
            for k in ks
        ])
        fn = model.denoise_fn(src, clin, z)
        try:
            out = ddim_sample(fn, schedule, cfg.steps, src.shape, x_T=x_T, clamp=cfg.clamp)
        except NonFiniteOutputError as err:
            raise NonFiniteOutputError(f"slices {ks[0]}..{ks[-1]}: {err}") from err
        preds.append(out.float().numpy())
    preds = np.concatenate(preds)
    fused = fuse_stacks([SliceStack(preds[k], k, cfg.axis) for k in range(depth)], fusion_weights(cfg.N), depth)
    return Volume3D(np.clip(fused.data, 0.0, 1.0), voxel_size_mm=mri_volume.voxel_size_mm, modality="PET",
                    intensity_range=(0.0, 1.0))
