"""Joint objective, EMA and the optimization loop for the dual-arm model."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import DualArmModel, UNetConfig, swap_arms
from .conditioning import ClinicalStats, build_clinical_vector, roi_weights
from .schedule import NoiseSchedule, build_schedule, q_sample
from .volumegen import all_stacks


@dataclass
class TrainConfig:
    lambda_task: float = 0.1
    lambda_diff: float = 1.0
    lambda_cycle: float = 1.0
    lambda_cls: float = 0.001
    learning_rate: float = 5e-4
    weight_decay: float = 1e-6
    betas: tuple = (0.9, 0.999)
    batch_size: int = 6
    iterations: int = 5000
    ema_rate: float = 0.999
    predefined_task: str = "M2P"
    cycle_enabled: bool = True
    ccl_enabled: bool = False
    sa_adagn_enabled: bool = False
    lambda_R: float = 2.0
    lambda_R_learnable: bool = False
    roi_normalize: bool = True
    ccl_warmup_iters: int | None = None
    num_classes: int = 2
    grad_clip: float = 1.0
    use_clinical: bool = True
    condition_on: str = "denoiser"
    timesteps: int = 1000
    schedule: str = "cosine"
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("lambda_task", "lambda_diff", "lambda_cycle", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.predefined_task not in ("M2P", "M2M"):
            raise ValueError(f"unknown predefined task {self.predefined_task!r}")
        if self.lambda_R < 1:
            raise ValueError("lambda_R must be >= 1")
        if self.ccl_warmup_iters is None:
            self.ccl_warmup_iters = self.iterations // 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path_or_text) -> "TrainConfig":
        text = Path(path_or_text).read_text() if Path(str(path_or_text)).exists() else path_or_text
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# Loss terms


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def task_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_shapes(prediction, target)
    return (prediction - target).abs().mean()


def diffusion_loss(x0_pred, x0_true, weights=None, normalize: bool = True) -> torch.Tensor:
    """ROI-weighted L1; divided by the mean weight when ``normalize``."""
    _check_shapes(x0_pred, x0_true)
    err = (x0_true - x0_pred).abs()
    if weights is None:
        return err.mean()
    _check_shapes(weights, err)
    loss = (weights * err).mean()
    return loss / weights.mean() if normalize else loss


def _cycle_terms(model: DualArmModel, mri, pet, mri_t, pet_t, t, clinical=None, z=None, pet_x0=None):
    swapped = swap_arms(model)
    if pet_x0 is None:
        _, h_m = model.conditioner_forward(mri, clinical, z)
        pet_x0 = model.denoiser_forward(pet_t, t, h_m, clinical, z)
    # M -> P -> M: the PET arm now conditions on its own prediction
    _, h_p = swapped.conditioner_forward(pet_x0, clinical, z)
    mri_cycle = swapped.denoiser_forward(mri_t, t, h_p, clinical, z)
    # P -> M -> P
    _, h_p = swapped.conditioner_forward(pet, clinical, z)
    mri_x0 = swapped.denoiser_forward(mri_t, t, h_p, clinical, z)
    _, h_m = model.conditioner_forward(mri_x0, clinical, z)
    pet_cycle = model.denoiser_forward(pet_t, t, h_m, clinical, z)
    return task_loss(mri_cycle, mri), task_loss(pet_cycle, pet)


def cycle_loss(model: DualArmModel, mri, pet, mri_t, pet_t, t, clinical=None, z=None, pet_x0=None):
    """Cycle-exchange consistency with one-step x0 predictions.

    ``pet_x0`` may carry the denoiser's prediction from the main diffusion
    pass, in which case only the three additional translations run.
    """
    if model.mode != "M2P":
        raise ValueError("cycle_loss expects the model in M2P mode")
    fwd, bwd = _cycle_terms(model, mri, pet, mri_t, pet_t, t, clinical, z, pet_x0)
    return fwd + bwd


class StackClassifier(nn.Module):
    """Small residual CNN classifying a predicted PET slice stack."""

    def __init__(self, in_channels: int, num_classes: int = 2, width: int = 16):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.blocks = nn.ModuleList()
        ch = width
        for out in (width, 2 * width, 4 * width):
            self.blocks.append(nn.ModuleDict({
                "conv1": nn.Conv2d(ch, out, 3, stride=2, padding=1),
                "norm1": nn.GroupNorm(math.gcd(out, 8), out),
                "conv2": nn.Conv2d(out, out, 3, padding=1),
                "norm2": nn.GroupNorm(math.gcd(out, 8), out),
                "skip": nn.Conv2d(ch, out, 1, stride=2),
            }))
            ch = out
        self.head = nn.Linear(ch, num_classes)

    def forward(self, x):
        h = self.stem(x)
        for b in self.blocks:
            r = F.silu(b["norm1"](b["conv1"](h)))
            h = F.silu(b["skip"](h) + b["norm2"](b["conv2"](r)))
        return self.head(h.mean(dim=(2, 3)))


def classifier_consistency_loss(x0_pred, label, classifier, num_classes: int | None = None) -> torch.Tensor:
    logits = classifier(x0_pred)
    num_classes = num_classes or logits.shape[1]
    label = torch.as_tensor(label, dtype=torch.long, device=logits.device)
    if torch.any(label < 0) or torch.any(label >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return F.cross_entropy(logits, label)


# ---------------------------------------------------------------------------
# EMA


class EmaState:
    """Shadow copy of the model parameters, ``shadow <- r*shadow + (1-r)*param``."""

    def __init__(self, model: nn.Module, rate: float = 0.999):
        if not 0 < rate < 1:
            raise ValueError("EMA rate must lie in (0, 1)")
        self.rate = rate
        self.shadow = {k: p.detach().clone() for k, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: nn.Module):
        for k, p in model.named_parameters():
            self.shadow[k].mul_(self.rate).add_(p.detach(), alpha=1 - self.rate)

    @torch.no_grad()
    def copy_to(self, model: nn.Module):
        for k, p in model.named_parameters():
            p.copy_(self.shadow[k])

    def ema_model(self, model: nn.Module) -> nn.Module:
        clone = copy.deepcopy(model)
        self.copy_to(clone)
        return clone

    def state_dict(self):
        return {"rate": self.rate, "shadow": self.shadow}

    def load_state_dict(self, state):
        self.rate = state["rate"]
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}


# ---------------------------------------------------------------------------
# Training state and step


LOSS_TERMS = ("L_task", "L_diff", "L_cycle", "L_cls")


class NonFiniteLossError(RuntimeError):
    pass


class Trainer:
    """Owns the model, optional auxiliary classifier, optimizer and EMA."""

    def __init__(self, unet_config: UNetConfig, config: TrainConfig | None = None,
                 model: DualArmModel | None = None):
        self.config = cfg = config or TrainConfig()
        torch.manual_seed(cfg.seed)
        if cfg.sa_adagn_enabled and not unet_config.slice_aware:
            unet_config = UNetConfig(**{**unet_config.to_dict(), "slice_aware": True})
        self.unet_config = unet_config
        self.model = model or DualArmModel(unet_config, condition_on=cfg.condition_on)
        self.schedule = build_schedule(cfg.schedule, cfg.timesteps)
        self.classifier = StackClassifier(unet_config.in_channels, cfg.num_classes) if cfg.ccl_enabled else None
        self.lambda_R_raw = None
        if cfg.lambda_R_learnable:
            # lambda_R = 1 + softplus(raw) stays >= 1
            init = math.log(math.expm1(max(cfg.lambda_R - 1.0, 1e-3)))
            self.lambda_R_raw = nn.Parameter(torch.tensor(init))
        params = list(self.model.parameters())
        if self.classifier is not None:
            params += list(self.classifier.parameters())
        groups = [{"params": params}]
        if self.lambda_R_raw is not None:
            groups.append({"params": [self.lambda_R_raw], "weight_decay": 0.0})
        self.optimizer = torch.optim.AdamW(groups, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                                           betas=cfg.betas)
        self.ema = EmaState(self.model, cfg.ema_rate)
        self.iteration = 0

    @property
    def lambda_R(self):
        if self.lambda_R_raw is not None:
            return 1.0 + F.softplus(self.lambda_R_raw)
        return self.config.lambda_R

    def lambdas(self) -> dict:
        c = self.config
        return {"L_task": c.lambda_task, "L_diff": c.lambda_diff, "L_cycle": c.lambda_cycle, "L_cls": c.lambda_cls}

    def compute_losses(self, batch: dict, generator: torch.Generator) -> dict:
        """Every active loss term for one batch (graph attached)."""
        cfg = self.config
        mri, pet = batch["mri"], batch["pet"]
        B = mri.shape[0]
        clinical = batch.get("clinical") if cfg.use_clinical else None
        z = batch.get("z") if cfg.sa_adagn_enabled else None
        t = torch.randint(1, self.schedule.T + 1, (B,), generator=generator)
        eps_pet = torch.randn(pet.shape, generator=generator, dtype=pet.dtype)
        pet_t = q_sample(self.schedule, pet, t, eps_pet).x_t

        task_pred, h_m = self.model.conditioner_forward(mri, clinical, z)
        pet_x0 = self.model.denoiser_forward(pet_t, t, h_m, clinical, z)
        losses = {"L_task": task_loss(task_pred, pet if cfg.predefined_task == "M2P" else mri)}
        weights = roi_weights(batch["roi"], self.lambda_R) if "roi" in batch else None
        losses["L_diff"] = diffusion_loss(pet_x0, pet, weights, cfg.roi_normalize)
        if cfg.cycle_enabled:
            eps_mri = torch.randn(mri.shape, generator=generator, dtype=mri.dtype)
            mri_t = q_sample(self.schedule, mri, t, eps_mri).x_t
            losses["L_cycle"] = cycle_loss(self.model, mri, pet, mri_t, pet_t, t, clinical, z, pet_x0=pet_x0)
        if self.classifier is not None and self.iteration >= cfg.ccl_warmup_iters:
            losses["L_cls"] = classifier_consistency_loss(pet_x0, batch["label"], self.classifier, cfg.num_classes)
        return losses

    def total_loss(self, losses: dict) -> torch.Tensor:
        lam = self.lambdas()
        return sum(lam[k] * v for k, v in losses.items())

    def train_step(self, batch: dict, generator: torch.Generator) -> dict:
        self.model.train()
        losses = self.compute_losses(batch, generator)
        for k, v in losses.items():
            if not torch.isfinite(v):
                raise NonFiniteLossError(f"{k} is non-finite at iteration {self.iteration}")
        total = self.total_loss(losses)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip:
            params = [p for g in self.optimizer.param_groups for p in g["params"]]
            torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)
        self.optimizer.step()
        self.ema.update(self.model)
        report = {"iter": self.iteration}
        report.update({k: losses[k].item() if k in losses else 0.0 for k in LOSS_TERMS})
        report["total"] = total.item()
        report["lr"] = self.optimizer.param_groups[0]["lr"]
        if self.lambda_R_raw is not None:
            report["lambda_R"] = float(self.lambda_R)
        self.iteration += 1
        return report

    # -- checkpoints --------------------------------------------------------

    def checkpoint_payload(self, clinical_stats: ClinicalStats | None = None) -> dict:
        return {
            "unet_config": self.unet_config.to_dict(),
            "condition_on": self.model.condition_on,
            "train_config": self.config.to_dict(),
            "model": self.model.state_dict(),
            "ema": self.ema.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "classifier": None if self.classifier is None else self.classifier.state_dict(),
            "lambda_R_raw": None if self.lambda_R_raw is None else self.lambda_R_raw.detach(),
            "schedule": self.schedule.to_json(),
            "clinical_stats": None if clinical_stats is None else clinical_stats.to_json(),
            "iteration": self.iteration,
        }


def save_checkpoint(payload: dict, path) -> str:
    """Write a checkpoint archive and return the sha256 of its bytes."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


@dataclass
class LoadedCheckpoint:
    model: DualArmModel
    schedule: NoiseSchedule
    clinical_stats: ClinicalStats | None
    train_config: TrainConfig
    sha256: str
    payload: dict = field(repr=False)


def load_checkpoint(path, use_ema: bool = True) -> LoadedCheckpoint:
    data = Path(path).read_bytes()
    payload = torch.load(io.BytesIO(data), weights_only=False)
    cfg = UNetConfig(**payload["unet_config"])
    model = DualArmModel(cfg, condition_on=payload["condition_on"])
    model.load_state_dict(payload["model"])
    if use_ema:
        with torch.no_grad():
            for k, p in model.named_parameters():
                p.copy_(payload["ema"]["shadow"][k])
    model.eval()
    stats = payload["clinical_stats"]
    return LoadedCheckpoint(
        model=model,
        schedule=NoiseSchedule.from_json(payload["schedule"]),
        clinical_stats=None if stats is None else ClinicalStats.from_json(stats),
        train_config=TrainConfig(**payload["train_config"]),
        sha256=hashlib.sha256(data).hexdigest(),
        payload=payload,
    )


# ---------------------------------------------------------------------------
# Data feeding


class PairedSliceSampler:
    """Draws random (subject, slice position) training windows from a cohort."""

    def __init__(self, records, clinical_stats: ClinicalStats, roi_mask, N: int = 5, axis="axial",
                 num_classes: int = 2):
        self.N = N
        self.ids = [r.id for r in records]
        self.mri = np.stack([np.moveaxis(r.mri.data, {"sagittal": 0, "coronal": 1, "axial": 2}[axis], 0)
                             for r in records]).astype(np.float32)
        self.pet = np.stack([np.moveaxis(r.pet.data, {"sagittal": 0, "coronal": 1, "axial": 2}[axis], 0)
                             for r in records]).astype(np.float32)
        mask = roi_mask.data if hasattr(roi_mask, "data") else roi_mask
        self.roi = all_stacks(mask, N, axis).astype(np.float32)  # (depth, N, H, W)
        self.clinical = np.stack([build_clinical_vector(r.clinical, clinical_stats).values
                                  for r in records]).astype(np.float32)
        if num_classes == 2:
            self.labels = np.array([int(r.diagnosis != "CN") for r in records])
        else:
            from .dataio import DIAGNOSES
            self.labels = np.array([DIAGNOSES.index(r.diagnosis) for r in records])
        self.depth = self.mri.shape[1]
        half = (N - 1) // 2
        self._offsets = np.arange(N) - half

    def __len__(self):
        return len(self.ids) * self.depth

    def batch(self, subjects, positions) -> dict:
        subjects = np.asarray(subjects)
        positions = np.asarray(positions)
        idx = np.clip(positions[:, None] + self._offsets[None, :], 0, self.depth - 1)
        return {
            "mri": torch.from_numpy(self.mri[subjects[:, None], idx]),
            "pet": torch.from_numpy(self.pet[subjects[:, None], idx]),
            "roi": torch.from_numpy(self.roi[positions]),
            "clinical": torch.from_numpy(self.clinical[subjects]),
            "label": torch.from_numpy(self.labels[subjects]),
            "z": torch.from_numpy((positions / max(self.depth - 1, 1)).astype(np.float32)),
        }

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        s = rng.integers(0, len(self.ids), batch_size)
        k = rng.integers(0, self.depth, batch_size)
        return self.batch(s, k)


def train(trainer: Trainer, sampler: PairedSliceSampler, iterations: int | None = None,
          log_path=None, checkpoint_path=None, clinical_stats=None, callback=None) -> list[dict]:
    """Run the optimization loop; writes one JSON line per iteration if asked."""
    cfg = trainer.config
    iterations = cfg.iterations if iterations is None else iterations
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = open(log_path, "a") if log_path else None
    history = []
    try:
        for _ in range(iterations):
            start = time.perf_counter()
            report = trainer.train_step(sampler.sample(rng, cfg.batch_size), gen)
            report["seconds"] = time.perf_counter() - start
            history.append(report)
            if log and trainer.iteration % cfg.log_every == 0:
                log.write(json.dumps(report) + "\n")
                log.flush()
            if checkpoint_path and cfg.checkpoint_every and trainer.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(trainer.checkpoint_payload(clinical_stats), checkpoint_path)
            if callback:
                callback(report)
    finally:
        if log:
            log.close()
    if checkpoint_path:
        save_checkpoint(trainer.checkpoint_payload(clinical_stats), checkpoint_path)
    return history
