"""Conditioning machinery: timestep encoding, adaptive group normalization,
clinical-vector construction and the ROI loss-weight map."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import Volume3D

CLINICAL_VARIABLES = ("age", "gender", "education", "mmse", "adas13", "apoe4")
MANDATORY_VARIABLES = ("age", "gender", "education")
OPTIONAL_VARIABLES = ("mmse", "adas13", "apoe4")
CLINICAL_FEATURES = (
    "age", "gender", "education",
    "mmse", "mmse_missing",
    "adas13", "adas13_missing",
    "apoe4", "apoe4_missing",
)
CLINICAL_DIM = len(CLINICAL_FEATURES)
GN_EPS = 1e-5


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal encoding ``[sin(t*f_i), cos(t*f_i)]``.

    Frequencies run geometrically from 1 down to 1/10000 (both endpoints
    included). ``t`` may be a scalar or a 1-D tensor; the result has a
    trailing dimension of size ``dim``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    t = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t < 0):
        raise ValueError("timesteps must be nonnegative")
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).float()


def group_count(channels: int, groups: int = 32) -> int:
    return math.gcd(channels, groups)


def group_norm(h: torch.Tensor, groups: int, eps: float = GN_EPS) -> torch.Tensor:
    """Affine-free group normalization (biased variance)."""
    return F.group_norm(h, groups, eps=eps)


def _as_channel(v, h: torch.Tensor):
    if v is None:
        return None
    v = torch.as_tensor(v, dtype=h.dtype, device=h.device)
    spatial = (1,) * (h.dim() - 2)
    if v.dim() == 0:
        return v
    if v.dim() == 1:
        return v.reshape((1, -1) + spatial)
    if v.dim() == 2:
        return v.reshape(tuple(v.shape) + spatial)
    return v


def adagn(h, t_s, t_b, c_s, h_m, groups: int) -> torch.Tensor:
    """``c_s * (h_m * (t_s * GroupNorm(h) + t_b))``, all products elementwise.

    ``t_s``, ``t_b`` and ``c_s`` are per-channel vectors of shape ``(C,)`` or
    ``(B, C)``; ``h_m`` is a feature map with the spatial size of ``h``.
    Passing ``None`` for any factor treats it as neutral.
    """
    if h_m is not None and torch.is_tensor(h_m) and h_m.dim() == h.dim() and h_m.shape[2:] != h.shape[2:]:
        raise ValueError(f"h_m spatial shape {tuple(h_m.shape[2:])} != h spatial shape {tuple(h.shape[2:])}")
    out = group_norm(h, groups)
    if t_s is not None:
        out = _as_channel(t_s, h) * out
    if t_b is not None:
        out = out + _as_channel(t_b, h)
    if h_m is not None:
        out = torch.as_tensor(h_m, dtype=h.dtype, device=h.device) * out
    if c_s is not None:
        out = _as_channel(c_s, h) * out
    return out


def sa_adagn(h, t_s, t_b, c_s, h_m, z_s, z_b, groups: int) -> torch.Tensor:
    """Slice-aware variant: ``z_s * adagn(...) + z_b``."""
    out = adagn(h, t_s, t_b, c_s, h_m, groups)
    if z_s is not None:
        out = _as_channel(z_s, h) * out
    if z_b is not None:
        out = out + _as_channel(z_b, h)
    return out


@dataclass
class ConditionBundle:
    """Conditions routed to a UNet arm.

    ``None`` entries are neutral: no timestep gives ``t_s = 1, t_b = 0``, no
    clinical vector gives ``c_s = 1``, no feature pyramid gives ``h_m = 1``
    and no slice position disables the slice-aware modulation.
    """

    t: torch.Tensor | None = None
    clinical: torch.Tensor | None = None
    h_m: list | None = None
    z: torch.Tensor | None = None


# ---------------------------------------------------------------------------
# Clinical vector


@dataclass(frozen=True)
class ClinicalStats:
    mean: dict
    std: dict

    @classmethod
    def fit(cls, records) -> "ClinicalStats":
        """Training-set mean/std of each variable over its present values."""
        mean, std = {}, {}
        for name in CLINICAL_VARIABLES:
            vals = np.array([r[name] for r in records if r.get(name) is not None], dtype=np.float64)
            if vals.size == 0:
                raise ValueError(f"no observed values for {name!r}")
            mean[name] = float(vals.mean())
            std[name] = float(vals.std())
        return cls(mean, std)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClinicalStats":
        d = json.loads(text)
        return cls(d["mean"], d["std"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ClinicalStats":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class ClinicalVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (CLINICAL_DIM,):
            raise ValueError(f"clinical vector must have {CLINICAL_DIM} entries")
        for name in OPTIONAL_VARIABLES:
            i = CLINICAL_FEATURES.index(name)
            ind = v[i + 1]
            if ind not in (0.0, 1.0):
                raise ValueError(f"missing indicator for {name} must be binary")
            if ind == 1.0 and v[i] != 0.0:
                raise ValueError(f"{name} flagged missing but value is {v[i]}")
        object.__setattr__(self, "values", v)

    def __getitem__(self, name: str) -> float:
        return float(self.values[CLINICAL_FEATURES.index(name)])

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.values, dtype=torch.float32)


def build_clinical_vector(raw: dict, stats: ClinicalStats) -> ClinicalVector:
    """Standardize a raw record and append missingness indicators.

    Missing optional variables become ``0`` (the standardized mean) with
    indicator ``1``.
    """
    out = []
    for name in CLINICAL_VARIABLES:
        value = raw.get(name)
        if stats.std[name] == 0:
            raise ValueError(f"zero standard deviation for {name!r}")
        if name in MANDATORY_VARIABLES:
            if value is None:
                raise ValueError(f"mandatory clinical variable {name!r} is missing")
            out.append((float(value) - stats.mean[name]) / stats.std[name])
        elif value is None:
            out.extend([0.0, 1.0])
        else:
            out.extend([(float(value) - stats.mean[name]) / stats.std[name], 0.0])
    return ClinicalVector(np.array(out))


CSV_HEADER = ("subject_id", "age", "gender", "education", "mmse", "adas13", "apoe4", "diagnosis")


def read_clinical_csv(path) -> dict:
    """Map subject id to its raw record; empty cells become ``None``."""
    records = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected clinical CSV header {reader.fieldnames}")
        for row in reader:
            rec = {k: (float(row[k]) if row[k] != "" else None) for k in CLINICAL_VARIABLES}
            rec["diagnosis"] = row["diagnosis"] or None
            records[row["subject_id"]] = rec
    return records


def write_clinical_csv(path, records: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for sid, rec in records.items():
            row = [sid] + ["" if rec.get(k) is None else rec[k] for k in CLINICAL_VARIABLES]
            row.append(rec.get("diagnosis") or "")
            w.writerow(row)


# ---------------------------------------------------------------------------
# ROI weighting


@dataclass(frozen=True)
class ROIWeightMap:
    weights: Volume3D
    roi_mask: Volume3D
    lambda_R: float


def build_roi_weight_map(mask: Volume3D, lambda_R: float = 2.0) -> ROIWeightMap:
    """Weights equal to 1 outside the mask and ``lambda_R`` inside."""
    data = np.asarray(mask.data)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("ROI mask must be binary")
    if lambda_R < 1:
        raise ValueError(f"lambda_R must be >= 1, got {lambda_R}")
    weights = np.where(data == 1, np.float32(lambda_R), np.float32(1.0)).astype(np.float32)
    wvol = Volume3D(weights, voxel_size_mm=mask.voxel_size_mm, modality="WEIGHT",
                    intensity_range=(1.0, float(lambda_R)))
    return ROIWeightMap(weights=wvol, roi_mask=mask, lambda_R=float(lambda_R))


def roi_weights(mask: torch.Tensor, lambda_R) -> torch.Tensor:
    """Tensor form of the weight map; ``lambda_R`` may be a learnable tensor."""
    return 1.0 + (lambda_R - 1.0) * mask
