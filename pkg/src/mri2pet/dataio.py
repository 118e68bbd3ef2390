"""Volumes, the paired phantom cohort, volume files and balanced splitting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MODALITIES = ("MRI", "PET", "MASK", "WEIGHT")
DIAGNOSES = ("CN", "MCI", "AD")


@dataclass
class Volume3D:
    """A 3D scalar field stored as ``(H, W, D)``; axis 2 is axial."""

    data: np.ndarray
    voxel_size_mm: tuple = (1.5, 1.5, 1.5)
    modality: str = "MRI"
    intensity_range: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if self.intensity_range is None:
            self.intensity_range = (float(self.data.min()), float(self.data.max()))
        else:
            self.intensity_range = tuple(float(v) for v in self.intensity_range)

    @property
    def shape(self):
        return self.data.shape

    def replace(self, data, **kw) -> "Volume3D":
        kw.setdefault("voxel_size_mm", self.voxel_size_mm)
        kw.setdefault("modality", self.modality)
        return Volume3D(data, **kw)


def minmax_normalize(volume: Volume3D) -> Volume3D:
    data = np.asarray(volume.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if not hi > lo:
        raise ValueError("cannot min-max normalize a constant volume")
    out = ((data - lo) / (hi - lo)).astype(np.float32)
    return volume.replace(out, intensity_range=(0.0, 1.0))


# ---------------------------------------------------------------------------
# Volume files: little-endian float32 raw array in (H, W, D) C order plus a
# JSON sidecar carrying the metadata and a checksum of the raw bytes.


class VolumeFormatError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".f32"), p.with_suffix(".json")


def write_volume(volume: Volume3D, path) -> Path:
    raw_path, meta_path = _paths(path)
    raw = np.ascontiguousarray(volume.data, dtype="<f4").tobytes(order="C")
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(raw)
    meta = {
        "shape": list(volume.shape),
        "voxel_size_mm": list(volume.voxel_size_mm),
        "modality": volume.modality,
        "intensity_range": list(volume.intensity_range),
        "sha256": hashlib.sha256(raw).hexdigest(),
    }
    meta_path.write_text(json.dumps(meta, indent=1))
    return raw_path


def read_volume(path) -> Volume3D:
    raw_path, meta_path = _paths(path)
    meta = json.loads(meta_path.read_text())
    raw = raw_path.read_bytes()
    shape = tuple(int(s) for s in meta["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise VolumeFormatError(f"{raw_path}: {len(raw)} bytes inconsistent with shape {shape}")
    digest = hashlib.sha256(raw).hexdigest()
    if digest != meta["sha256"]:
        raise VolumeFormatError(f"{raw_path}: sha256 mismatch")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume3D(data, voxel_size_mm=meta["voxel_size_mm"], modality=meta["modality"],
                    intensity_range=meta["intensity_range"])


# ---------------------------------------------------------------------------
# Phantom cohort


@dataclass
class SubjectRecord:
    id: str
    mri: Volume3D
    pet: Volume3D
    clinical: dict
    diagnosis: str

    def __post_init__(self):
        if self.mri.shape != self.pet.shape:
            raise ValueError(f"{self.id}: MRI shape {self.mri.shape} != PET shape {self.pet.shape}")
        if self.diagnosis not in DIAGNOSES:
            raise ValueError(f"unknown diagnosis {self.diagnosis!r}")

    @property
    def diseased(self) -> bool:
        return self.diagnosis != "CN"


@dataclass(frozen=True)
class PhantomConfig:
    brain_radii: tuple = (0.80, 0.85, 0.75)
    brain_scale: tuple = (0.95, 1.05)
    ventricle_radius: float = 0.35
    wm_radius: tuple = (0.66, 0.74)  # per-subject gray/white boundary
    edge_width: float = 0.03
    mri_levels: tuple = (0.15, 0.90, 0.60)  # csf, wm, gm
    pet_levels: tuple = (0.10, 0.45, 0.90)
    pet_gm_jitter: float = 0.04
    pet_blur: float = 1.0
    ad_dip: tuple = (0.60, 0.85)
    mci_dip: tuple = (0.75, 0.90)
    ad_erosion: tuple = (0.02, 0.06)
    noise_sigma: float = 0.01
    roi_centers: tuple = ((0.48, -0.38, 0.15), (-0.48, -0.38, 0.15))
    roi_radii: tuple = (0.24, 0.24, 0.24)
    missing_rate: float = 0.15
    voxel_size_mm: tuple = (1.5, 1.5, 1.5)


def _grid(shape):
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def phantom_roi_mask(shape=(32, 32, 32), config: PhantomConfig | None = None) -> Volume3D:
    """The fixed two-ellipsoid ROI of the phantom template space."""
    cfg = config or PhantomConfig()
    u, v, w = _grid(shape)
    mask = np.zeros(shape, dtype=bool)
    ru, rv, rw = cfg.roi_radii
    for cu, cv, cw in cfg.roi_centers:
        mask |= ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 + ((w - cw) / rw) ** 2 <= 1.0
    return Volume3D(mask.astype(np.float32), voxel_size_mm=cfg.voxel_size_mm, modality="MASK",
                    intensity_range=(0.0, 1.0))


def _clinical_record(rng: np.random.Generator, diagnosis: str, missing_rate: float) -> dict:
    sev = {"CN": 0.0, "MCI": 0.5, "AD": 1.0}[diagnosis]
    rec = {
        "age": float(np.clip(rng.normal(73.0, 7.0), 55, 92)),
        "gender": float(rng.integers(0, 2)),
        "education": float(np.clip(np.round(rng.normal(16.0, 2.8)), 6, 22)),
        # one pooled standard deviation of separation between CN and AD
        "mmse": float(np.clip(rng.normal(28.0 - 2.0 * sev, 2.0), 0, 30)),
        "adas13": float(np.clip(rng.normal(10.0 + 5.0 * sev, 5.0), 0, 85)),
        "apoe4": float(rng.choice(3, p=[0.70 - 0.35 * sev, 0.25 + 0.20 * sev, 0.05 + 0.15 * sev])),
    }
    for name in ("mmse", "adas13", "apoe4"):
        if rng.random() < missing_rate:
            rec[name] = None
    rec["diagnosis"] = diagnosis
    return rec


def _soft_step(x, edge):
    return 0.5 * (1.0 + np.tanh(x / edge))


def _phantom_subject(rng, shape, diagnosis, cfg: PhantomConfig, roi: np.ndarray):
    u, v, w = _grid(shape)
    scale = rng.uniform(*cfg.brain_scale)
    a, b, c = (r * scale for r in cfg.brain_radii)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2 + (w / c) ** 2)

    outer = 1.0
    dip = 1.0
    if diagnosis != "CN":
        frac = 1.0 if diagnosis == "AD" else 0.5
        outer = 1.0 - frac * rng.uniform(*cfg.ad_erosion)
        dip = rng.uniform(*(cfg.ad_dip if diagnosis == "AD" else cfg.mci_dip))
    wm_r = rng.uniform(*cfg.wm_radius)

    brain = _soft_step(outer - r, cfg.edge_width)
    not_csf = _soft_step(r - cfg.ventricle_radius, cfg.edge_width)
    gm_frac = _soft_step(r - wm_r, cfg.edge_width)
    csf_m = brain * (1 - not_csf)
    wm_m = brain * not_csf * (1 - gm_frac)
    gm_m = brain * not_csf * gm_frac

    mri = csf_m * cfg.mri_levels[0] + wm_m * cfg.mri_levels[1] + gm_m * cfg.mri_levels[2]
    gm_uptake = cfg.pet_levels[2] + rng.uniform(-cfg.pet_gm_jitter, cfg.pet_gm_jitter)
    pet = csf_m * cfg.pet_levels[0] + wm_m * cfg.pet_levels[1] + gm_m * gm_uptake
    pet = gaussian_filter(pet, cfg.pet_blur, mode="constant")
    if dip != 1.0:
        pet = np.where(roi, pet * dip, pet)

    mri = np.clip(mri + rng.normal(0.0, cfg.noise_sigma, shape), 0.0, 1.0)
    pet = np.clip(pet + rng.normal(0.0, cfg.noise_sigma, shape), 0.0, 1.0)
    return mri, pet, dip


def generate_phantom(
    count: int,
    shape=(32, 32, 32),
    class_mix: dict | None = None,
    seed: int = 0,
    config: PhantomConfig | None = None,
) -> list[SubjectRecord]:
    """Seed-deterministic paired MRI/PET phantom cohort.

    Each subject gets a soft three-band ellipsoidal brain. Diseased subjects
    carry a multiplicative PET dip inside the fixed ROI and a mild erosion of
    the MRI brain boundary; their cognitive scores shift by about one
    standard deviation while demographics are class-independent.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 4:
        raise ValueError(f"degenerate phantom shape {shape}")
    cfg = config or PhantomConfig()
    class_mix = class_mix or {"CN": 0.5, "AD": 0.5}
    names = [k for k in DIAGNOSES if class_mix.get(k, 0) > 0]
    if set(class_mix) - set(DIAGNOSES):
        raise ValueError(f"unknown diagnoses in class_mix: {set(class_mix) - set(DIAGNOSES)}")
    probs = np.array([class_mix[k] for k in names], dtype=np.float64)
    probs /= probs.sum()

    roi = phantom_roi_mask(shape, cfg).data.astype(bool)
    root = np.random.SeedSequence(seed)
    records = []
    for i, child in enumerate(root.spawn(count)):
        rng = np.random.default_rng(child)
        diagnosis = names[rng.choice(len(names), p=probs)]
        mri, pet, dip = _phantom_subject(rng, shape, diagnosis, cfg, roi)
        clinical = _clinical_record(rng, diagnosis, cfg.missing_rate)
        sid = f"sub-{i:04d}"
        records.append(SubjectRecord(
            id=sid,
            mri=minmax_normalize(Volume3D(mri, cfg.voxel_size_mm, "MRI")),
            pet=minmax_normalize(Volume3D(pet, cfg.voxel_size_mm, "PET")),
            clinical=clinical,
            diagnosis=diagnosis,
        ))
    return records


def save_cohort(records, out_dir) -> Path:
    """Write volumes, the clinical CSV and the shared ROI mask to ``out_dir``."""
    from .conditioning import write_clinical_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_volume(rec.mri, out / f"{rec.id}_mri")
        write_volume(rec.pet, out / f"{rec.id}_pet")
    write_clinical_csv(out / "clinical.csv", {r.id: r.clinical for r in records})
    write_volume(phantom_roi_mask(records[0].mri.shape), out / "roi_mask")
    return out


def load_cohort(in_dir) -> list[SubjectRecord]:
    from .conditioning import read_clinical_csv

    d = Path(in_dir)
    clinical = read_clinical_csv(d / "clinical.csv")
    return [
        SubjectRecord(sid, read_volume(d / f"{sid}_mri"), read_volume(d / f"{sid}_pet"), rec, rec["diagnosis"])
        for sid, rec in clinical.items()
    ]


# ---------------------------------------------------------------------------
# Propensity-score-balanced splitting


@dataclass
class SplitAssignment:
    train: list
    val: list
    test: list
    imbalance: float
    seed: int
    trial_imbalances: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(len(s) for s in sets) != len(self.train) + len(self.val) + len(self.test):
            raise ValueError("duplicate ids within a split")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("splits are not disjoint")

    def to_json(self) -> str:
        return json.dumps({
            "train": self.train, "val": self.val, "test": self.test,
            "imbalance": self.imbalance, "seed": self.seed,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], d["imbalance"], d["seed"])


_CONFOUNDERS = ("diagnosis", "age", "gender")


def _confounder_matrix(records, confounders) -> np.ndarray:
    cols = []
    for name in confounders:
        if name not in _CONFOUNDERS:
            raise ValueError(f"unsupported confounder {name!r}")
        if name == "diagnosis":
            cols.append([DIAGNOSES.index(r.diagnosis) for r in records])
        else:
            cols.append([r.clinical[name] for r in records])
    X = np.asarray(cols, dtype=np.float64).T
    mu, sd = X.mean(0), X.std(0)
    X = np.where(sd > 0, (X - mu) / np.where(sd > 0, sd, 1.0), 0.0)
    return X


def fit_logistic_gd(X: np.ndarray, Y: np.ndarray, iterations: int = 500, lr: float = 0.1) -> np.ndarray:
    """Batched logistic regression by full-batch gradient descent.

    ``X`` is ``(n, f)``; ``Y`` is ``(trials, n)`` with one label vector per
    problem. Returns weights ``(trials, f + 1)`` with the intercept last.
    """
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    W = np.zeros((Y.shape[0], Xb.shape[1]))
    n = X.shape[0]
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(W @ Xb.T)))
        W -= lr * ((p - Y) @ Xb) / n
    return W


def propensity_imbalance(scores: np.ndarray, groups: np.ndarray, percentiles=None) -> float:
    """Largest spread, over the percentile grid, of per-split score percentiles."""
    percentiles = np.arange(10, 100, 10) if percentiles is None else percentiles
    per_split = np.stack([np.percentile(scores[groups == g], percentiles) for g in np.unique(groups)])
    return float((per_split.max(0) - per_split.min(0)).max())


def propensity_split(
    records,
    ratios=(0.6, 0.2, 0.2),
    confounders=_CONFOUNDERS,
    trials: int = 1000,
    seed: int = 0,
    iterations: int = 500,
    lr: float = 0.1,
) -> SplitAssignment:
    """Pick, among ``trials`` random partitions, the one whose propensity
    scores (probability of training-set membership given the confounders)
    are most evenly distributed across the three splits."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or abs(ratios.sum() - 1.0) > 1e-6 or np.any(ratios < 0):
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = len(records)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"ratios {ratios.tolist()} leave an empty split for {n} records")

    X = _confounder_matrix(records, confounders)
    rng = np.random.default_rng(seed)
    groups = np.empty((trials, n), dtype=np.int64)
    base = np.repeat([0, 1, 2], [n_train, n_val, n_test])
    for k in range(trials):
        groups[k] = rng.permutation(base)
    W = fit_logistic_gd(X, (groups == 0).astype(np.float64), iterations, lr)
    Xb = np.hstack([X, np.ones((n, 1))])
    scores = 1.0 / (1.0 + np.exp(-(W @ Xb.T)))
    imb = np.array([propensity_imbalance(scores[k], groups[k]) for k in range(trials)])
    best = int(np.argmin(imb))
    ids = np.array([r.id for r in records])
    return SplitAssignment(
        train=ids[groups[best] == 0].tolist(),
        val=ids[groups[best] == 1].tolist(),
        test=ids[groups[best] == 2].tolist(),
        imbalance=float(imb[best]),
        seed=seed,
        trial_imbalances=imb,
    )
