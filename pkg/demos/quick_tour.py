"""A five-minute tour: phantom cohort, propensity split, a short training run
and one synthesized PET volume scored against ground truth.

    python demos/quick_tour.py

The model only trains for a few hundred iterations here, so the synthetic PET
is blurry. The point is to show the moving parts end to end.
"""

import time

import numpy as np

from mri2pet.backbone import desk_config
from mri2pet.conditioning import ClinicalStats
from mri2pet.dataio import generate_phantom, phantom_roi_mask, propensity_split
from mri2pet.evalmetrics import roi_metrics, volume_metrics
from mri2pet.phantom_study import make_generator
from mri2pet.training import PairedSliceSampler, TrainConfig, Trainer, train
from mri2pet.volumegen import SamplerConfig

shape = (24, 24, 24)
records = generate_phantom(40, shape, {"CN": 0.5, "AD": 0.5}, seed=0)
split = propensity_split(records, trials=200, seed=0)
print(f"split {len(split.train)}/{len(split.val)}/{len(split.test)}, imbalance {split.imbalance:.4f}")

by_id = {r.id: r for r in records}
train_recs = [by_id[i] for i in split.train]
stats = ClinicalStats.fit([r.clinical for r in train_recs])
roi = phantom_roi_mask(shape)
print(f"ROI covers {int(roi.data.sum())} voxels")

trainer = Trainer(desk_config(), TrainConfig(iterations=300, batch_size=6, ccl_warmup_iters=100))
sampler = PairedSliceSampler(train_recs, stats, roi, N=5)
start = time.perf_counter()
history = train(trainer, sampler, callback=lambda r: r["iter"] % 100 == 0 and print(f"  iter {r['iter']:4d} "
                                                                                     f"total {r['total']:.4f}"))
print(f"trained {len(history)} iterations in {time.perf_counter() - start:.0f}s")

model = trainer.ema.ema_model(trainer.model)
generate = make_generator(model, trainer.schedule, stats, SamplerConfig(steps=20))
for rid in split.test[:2]:
    rec = by_id[rid]
    syn = generate(rec, rec.clinical)
    vm, rm = volume_metrics(syn, rec.pet), roi_metrics(syn, rec.pet, roi)
    mask = roi.data.astype(bool)
    print(f"{rid} ({rec.diagnosis}): MAE {vm['mae']:.4f}  PSNR {vm['psnr']:.2f}  SSIM {vm['ssim']:.3f}  "
          f"ROI MAE {rm['A']['mae_roi']:.4f}  ROI mean syn {syn.data[mask].mean():.3f} "
          f"vs gt {rec.pet.data[mask].mean():.3f}")
print("final loss terms:", {k: round(float(np.mean([h[k] for h in history[-20:]])), 4)
                            for k in ("L_task", "L_diff", "L_cycle", "L_cls")})
