"""End-to-end phantom study: train the full and ablated models on a phantom
cohort, synthesize held-out PET and probe whether the disease signal survives.

The run is expensive (hours on one CPU core), so ``run_study`` writes a JSON
report keyed by a hash of its config and ``load_or_run`` reuses it.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import desk_config
from .conditioning import ClinicalStats, build_clinical_vector
from .dataio import generate_phantom, phantom_roi_mask, propensity_split
from .downstream import ClassifierConfig, crossval
from .evalmetrics import (age_bin, clinical_group_means, fairness_report, roi_metrics, sensitivity_analysis,
                          slicewise_ssim, volume_metrics)
from .training import PairedSliceSampler, TrainConfig, Trainer, save_checkpoint, train
from .volumegen import SamplerConfig, generate_volume


@dataclass
class StudyConfig:
    subjects: int = 200
    shape: tuple = (32, 32, 32)
    data_seed: int = 0
    split_trials: int = 1000
    split_seed: int = 0
    iterations: int = 5000
    batch_size: int = 6
    train_seed: int = 0
    sampler_steps: int = 50
    sampler_seed: int = 0
    N: int = 5
    cv_folds: int = 5
    classifier_epochs: int = 75
    sensitivity_variables: tuple = ("adas13", "age")
    ablation: dict = field(default_factory=lambda: {"lambda_R": 1.0, "cycle_enabled": False})

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def make_generator(model, schedule, stats: ClinicalStats, sampler_config: SamplerConfig):
    """``(record, raw_clinical) -> Volume3D`` closure over a trained M2P model."""
    model.eval()

    def generate(record, raw_clinical):
        clinical = build_clinical_vector(raw_clinical, stats).tensor()
        return generate_volume(model, record.mri, clinical, sampler_config, schedule)
    return generate


def roi_class_threshold(records, roi) -> float:
    """Midpoint between the healthy and diseased mean ROI intensity of GT PET."""
    means = {0: [], 1: []}
    for r in records:
        means[int(r.diseased)].append(float(r.pet.data[roi].mean()))
    return 0.5 * (np.mean(means[0]) + np.mean(means[1]))


def _train_model(records, stats, roi_mask, cfg: StudyConfig, out: Path, name: str, overrides: dict, log):
    tcfg = TrainConfig(iterations=cfg.iterations, batch_size=cfg.batch_size, seed=cfg.train_seed, log_every=50,
                       **overrides)
    trainer = Trainer(desk_config(), tcfg)
    sampler = PairedSliceSampler(records, stats, roi_mask, N=cfg.N)
    start = time.perf_counter()
    log_path = out / f"{name}_train.jsonl"
    log_path.unlink(missing_ok=True)

    def progress(report):
        if report["iter"] % 250 == 0:
            log(f"[{name}] iter {report['iter']} total {report['total']:.4f}")
    history = train(trainer, sampler, log_path=log_path, callback=progress)
    sha = save_checkpoint(trainer.checkpoint_payload(stats), out / f"{name}.pt")
    model = trainer.ema.ema_model(trainer.model).eval()
    losses = [h["total"] for h in history]
    return model, trainer.schedule, {
        "seconds": time.perf_counter() - start,
        "checkpoint_sha256": sha,
        "loss_first50": float(np.mean(losses[:50])),
        "loss_last50": float(np.mean(losses[-50:])),
    }


def run_study(out_dir, cfg: StudyConfig | None = None, log=print) -> dict:
    cfg = cfg or StudyConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    timings = {}

    records = generate_phantom(cfg.subjects, cfg.shape, {"CN": 0.5, "AD": 0.5}, seed=cfg.data_seed)
    split = propensity_split(records, trials=cfg.split_trials, seed=cfg.split_seed)
    (out / "split.json").write_text(split.to_json())
    by_id = {r.id: r for r in records}
    train_recs = [by_id[i] for i in split.train]
    val_recs = [by_id[i] for i in split.val]
    test_recs = [by_id[i] for i in split.test]
    stats = ClinicalStats.fit([r.clinical for r in train_recs])
    stats.save(out / "clinical_stats.json")
    roi_vol = phantom_roi_mask(cfg.shape)
    roi = roi_vol.data.astype(bool)
    log(f"cohort: {len(train_recs)} train / {len(val_recs)} val / {len(test_recs)} test")

    full, schedule, full_info = _train_model(train_recs, stats, roi_vol, cfg, out, "full", {}, log)
    ablated, _, abl_info = _train_model(train_recs, stats, roi_vol, cfg, out, "ablated", dict(cfg.ablation), log)
    timings["train_full"], timings["train_ablated"] = full_info["seconds"], abl_info["seconds"]

    scfg = SamplerConfig(steps=cfg.sampler_steps, seed=cfg.sampler_seed, N=cfg.N)
    gen_full = make_generator(full, schedule, stats, scfg)
    gen_abl = make_generator(ablated, schedule, stats, scfg)
    start = time.perf_counter()
    eval_recs = val_recs + test_recs
    syn = {r.id: gen_full(r, r.clinical).data for r in eval_recs}
    syn_abl = {r.id: gen_abl(r, r.clinical).data for r in test_recs}
    timings["synthesis"] = time.perf_counter() - start
    log(f"synthesized {len(syn) + len(syn_abl)} volumes in {timings['synthesis']:.0f}s")

    per_subject = {}
    for r in eval_recs:
        vm = volume_metrics(syn[r.id], r.pet)
        rm = roi_metrics(syn[r.id], r.pet, roi)
        per_subject[r.id] = {"diagnosis": r.diagnosis, "split": "val" if r in val_recs else "test",
                             **vm, "mae_roi_A": rm["A"]["mae_roi"], "mae_roi_B": rm["B"]["mae_roi"],
                             "ssim_roi": rm["A"]["ssim_roi"],
                             "roi_mean_syn": float(syn[r.id][roi].mean()),
                             "roi_mean_gt": float(r.pet.data[roi].mean())}
        if r.id in syn_abl:
            ra = roi_metrics(syn_abl[r.id], r.pet, roi)
            per_subject[r.id]["ablated_mae_roi_A"] = ra["A"]["mae_roi"]
            per_subject[r.id]["ablated_mae_roi_B"] = ra["B"]["mae_roi"]
            per_subject[r.id]["ablated_mae"] = volume_metrics(syn_abl[r.id], r.pet)["mae"]
    test_rows = [per_subject[r.id] for r in test_recs]

    # (a) ROI hypometabolism survives synthesis
    thr = roi_class_threshold(train_recs, roi)
    correct = [(row["roi_mean_syn"] < thr) == (row["diagnosis"] != "CN") for row in test_rows]
    roi_means = {dx: float(np.mean([row["roi_mean_syn"] for row in test_rows if row["diagnosis"] == dx]))
                 for dx in ("CN", "AD")}
    crit_a = {"threshold": thr, "fraction_correct": float(np.mean(correct)), "syn_roi_mean": roi_means,
              "passed": bool(np.mean(correct) >= 0.8 and roi_means["AD"] < roi_means["CN"])}

    # (b) downstream classifier ordering
    start = time.perf_counter()
    labels = np.array([int(r.diseased) for r in eval_recs])
    ids = [r.id for r in eval_recs]
    ccfg = ClassifierConfig(epochs=cfg.classifier_epochs, seed=cfg.train_seed)
    sources = {"gt_pet": [r.pet.data for r in eval_recs], "syn_pet": [syn[i] for i in ids],
               "mri": [r.mri.data for r in eval_recs]}
    cls = {k: crossval(v, labels, ids, cfg.cv_folds, ccfg, seed=cfg.train_seed) for k, v in sources.items()}
    timings["classifiers"] = time.perf_counter() - start
    bacc = {k: v["summary"]["bacc"]["mean"] for k, v in cls.items()}
    crit_b = {"bacc": bacc, "passed": bool(bacc["gt_pet"] >= bacc["syn_pet"] >= bacc["mri"]
                                           and (bacc["gt_pet"] < 0.95 or bacc["syn_pet"] >= 0.8))}

    # (c) ablation raises ROI error
    full_roi = float(np.mean([row["mae_roi_A"] for row in test_rows]))
    abl_roi = float(np.mean([row["ablated_mae_roi_A"] for row in test_rows]))
    crit_c = {"full_mae_roi": full_roi, "ablated_mae_roi": abl_roi, "passed": bool(abl_roi > full_roi)}

    # secondary probes measured on the same run
    val_mae = float(np.mean([per_subject[r.id]["mae"] for r in val_recs]))
    healthy_test_mae = float(np.mean([row["mae"] for row in test_rows if row["diagnosis"] == "CN"]))
    axis_ssim = {ax: slicewise_ssim(syn[test_recs[0].id], test_recs[0].pet, ax) for ax in (0, 1, 2)}
    fairness = fairness_report(
        [row["mae"] for row in test_rows],
        {"gender": ["F" if r.clinical["gender"] == 1 else "M" for r in test_recs],
         "age": [age_bin(r.clinical["age"]) for r in test_recs],
         "diagnosis": [r.diagnosis for r in test_recs]},
    )
    start = time.perf_counter()
    means = clinical_group_means(train_recs)
    sensitivity = {v: sensitivity_analysis(gen_full, test_recs, v, means, roi) for v in cfg.sensitivity_variables}
    timings["sensitivity"] = time.perf_counter() - start

    summary = {k: float(np.mean([row[k] for row in test_rows])) for k in ("mae", "mse", "psnr", "ssim",
                                                                       "mae_roi_A", "mae_roi_B", "ssim_roi")}
    timings["total"] = time.perf_counter() - t0
    report = {
        "config": asdict(cfg),
        "config_digest": cfg.digest(),
        "torch_version": torch.__version__,
        "split": {"train": len(train_recs), "val": len(val_recs), "test": len(test_recs),
                  "imbalance": split.imbalance},
        "training": {"full": full_info, "ablated": abl_info},
        "test_summary": summary,
        "criteria": {"a": crit_a, "b": crit_b, "c": crit_c},
        "classifiers": cls,
        "healthy_vs_validation": {"val_mae": val_mae, "healthy_test_mae": healthy_test_mae,
                                  "passed": bool(healthy_test_mae < 1.2 * val_mae)},
        "axis_ssim": axis_ssim,
        "fairness": fairness,
        "sensitivity": sensitivity,
        "per_subject": per_subject,
        "timings": timings,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    log(f"study finished in {timings['total'] / 3600:.2f} h")
    return report


def load_report(out_dir, cfg: StudyConfig | None = None) -> dict | None:
    """Cached report for ``cfg`` or ``None`` when absent or stale."""
    cfg = cfg or StudyConfig()
    path = Path(out_dir) / "report.json"
    if not path.exists():
        return None
    report = json.loads(path.read_text())
    return report if report.get("config_digest") == cfg.digest() else None


def load_or_run(out_dir, cfg: StudyConfig | None = None, log=print) -> dict:
    return load_report(out_dir, cfg) or run_study(out_dir, cfg, log)
