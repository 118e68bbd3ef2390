"""Command-line entry points: phantom-gen, split, train, sample, evaluate, classify."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(","))


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(","))


def _class_mix(text: str) -> dict:
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        out[name.strip()] = float(value)
    return out


def _subset(records, split_path, subset):
    if not split_path:
        return records
    from .dataio import SplitAssignment

    split = SplitAssignment.from_json(Path(split_path).read_text())
    keep = set(getattr(split, subset))
    return [r for r in records if r.id in keep]


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_phantom_gen(args):
    from .dataio import generate_phantom, save_cohort

    records = generate_phantom(args.count, args.shape, _class_mix(args.class_mix), seed=args.seed)
    save_cohort(records, args.out_dir)
    print(f"wrote {len(records)} subjects to {args.out_dir}")


def cmd_split(args):
    from .dataio import load_cohort, propensity_split

    records = load_cohort(args.cohort)
    split = propensity_split(records, ratios=args.ratios, trials=args.trials, seed=args.seed)
    text = split.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)


def cmd_train(args):
    from .backbone import UNetConfig, desk_config
    from .conditioning import ClinicalStats
    from .dataio import load_cohort, read_volume
    from .training import PairedSliceSampler, TrainConfig, Trainer, train

    raw = json.loads(Path(args.config).read_text())
    unet_overrides = raw.pop("unet", {})
    unet = UNetConfig(**{**desk_config().to_dict(),
                         **{k: tuple(v) if isinstance(v, list) else v for k, v in unet_overrides.items()}})
    cfg = TrainConfig(**raw)
    records = _subset(load_cohort(args.cohort), args.split, "train")
    stats = ClinicalStats.fit([r.clinical for r in records])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats.save(out / "clinical_stats.json")
    roi = read_volume(Path(args.cohort) / "roi_mask")
    trainer = Trainer(unet, cfg)
    sampler = PairedSliceSampler(records, stats, roi, N=unet.in_channels)
    history = train(trainer, sampler, log_path=out / "train_log.jsonl", checkpoint_path=out / "checkpoint.pt",
                    clinical_stats=stats)
    print(f"trained {len(history)} iterations; final total loss {history[-1]['total']:.5f}")


def cmd_sample(args):
    import torch

    from .conditioning import build_clinical_vector
    from .dataio import load_cohort, write_volume
    from .training import load_checkpoint
    from .volumegen import SamplerConfig, generate_volume

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.clinical_stats is None:
        sys.exit("checkpoint carries no clinical statistics")
    records = _subset(load_cohort(args.cohort), args.split, args.subset)
    if args.limit:
        records = records[:args.limit]
    cfg = SamplerConfig(steps=args.steps, seed=args.seed, N=args.neighbors, axis=args.axis,
                        slice_position=ckpt.train_config.sa_adagn_enabled)
    use_clinical = ckpt.train_config.use_clinical
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        clinical = build_clinical_vector(r.clinical, ckpt.clinical_stats).tensor() if use_clinical else None
        with torch.no_grad():
            vol = generate_volume(ckpt.model, r.mri, clinical, cfg, ckpt.schedule)
        write_volume(vol, out / f"{r.id}_syn")
        print(f"{r.id} done", flush=True)
    manifest = {"seed": args.seed, "steps": args.steps, "axis": args.axis, "neighbors": args.neighbors,
                "schedule_sha256": ckpt.schedule.sha256(), "checkpoint_sha256": ckpt.sha256,
                "subjects": [r.id for r in records]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _load_synth(records, synth_dir):
    from .dataio import read_volume

    d = Path(synth_dir)
    return [(r, read_volume(d / f"{r.id}_syn")) for r in records if (d / f"{r.id}_syn.json").exists()]


def cmd_evaluate(args):
    from .dataio import load_cohort, read_volume
    from .evalmetrics import age_bin, fairness_report, roi_metrics, volume_metrics, write_error_maps

    records = _subset(load_cohort(args.cohort), args.split, args.subset)
    pairs = _load_synth(records, args.synth_dir)
    if not pairs:
        sys.exit(f"no synthesized volumes found in {args.synth_dir}")
    mask = read_volume(Path(args.cohort) / "roi_mask")
    rows = {}
    for r, syn in pairs:
        rows[r.id] = {"diagnosis": r.diagnosis, **volume_metrics(syn, r.pet), "roi": roi_metrics(syn, r.pet, mask)}
        if args.error_maps:
            write_error_maps(syn, r.pet, Path(args.error_maps) / r.id)
    subjects = [r for r, _ in pairs]
    fairness = fairness_report(
        [rows[r.id]["mae"] for r in subjects],
        {"gender": ["F" if r.clinical["gender"] == 1 else "M" for r in subjects],
         "age": [age_bin(r.clinical["age"]) for r in subjects],
         "diagnosis": [r.diagnosis for r in subjects]},
    )
    manifest = Path(args.synth_dir) / "manifest.json"
    report = {
        "per_subject": rows,
        "summary": {k: float(np.mean([row[k] for row in rows.values()])) for k in ("mae", "mse", "psnr", "ssim")},
        "fairness": fairness,
        "hashes": {"manifest": json.loads(manifest.read_text()) if manifest.exists() else None,
                   "clinical_csv_sha256": _file_hash(Path(args.cohort) / "clinical.csv")},
    }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(json.dumps(report["summary"]))


def cmd_classify(args):
    from .dataio import load_cohort
    from .downstream import ClassifierConfig, crossval

    records = _subset(load_cohort(args.cohort), args.split, args.subset)
    if args.input_source == "syn-pet":
        if not args.synth_dir:
            sys.exit("--synth-dir is required for syn-pet")
        pairs = _load_synth(records, args.synth_dir)
        records, volumes = [r for r, _ in pairs], [v.data for _, v in pairs]
    elif args.input_source == "gt-pet":
        volumes = [r.pet.data for r in records]
    else:
        volumes = [r.mri.data for r in records]
    labels = [int(r.diseased) for r in records]
    res = crossval(volumes, labels, [r.id for r in records], args.folds, ClassifierConfig(seed=args.seed),
                   seed=args.seed)
    res["input_source"] = args.input_source
    text = json.dumps(res, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(json.dumps(res["summary"]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mri2pet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="synthesize a paired MRI/PET phantom cohort")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--shape", type=_ints, default=(32, 32, 32))
    g.add_argument("--class-mix", default="CN=0.5,AD=0.5")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("split", help="propensity-balanced train/val/test split")
    s.add_argument("--cohort", required=True)
    s.add_argument("--ratios", type=_floats, default=(0.6, 0.2, 0.2))
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a dual-arm model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--cohort", required=True)
    t.add_argument("--split")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    def subset_args(q):
        q.add_argument("--cohort", required=True)
        q.add_argument("--split")
        q.add_argument("--subset", choices=("train", "val", "test"), default="test")

    m = sub.add_parser("sample", help="synthesize PET volumes with a trained checkpoint")
    m.add_argument("--checkpoint", required=True)
    subset_args(m)
    m.add_argument("--axis", choices=("axial", "coronal", "sagittal", "average3"), default="axial")
    m.add_argument("--neighbors", type=int, default=5)
    m.add_argument("--steps", type=int, default=100)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--limit", type=int, default=0)
    m.add_argument("--out-dir", required=True)
    m.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="image-quality, ROI and fairness report")
    subset_args(e)
    e.add_argument("--synth-dir", required=True)
    e.add_argument("--error-maps")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("classify", help="k-fold downstream diagnosis")
    subset_args(c)
    c.add_argument("--input-source", choices=("mri", "gt-pet", "syn-pet"), required=True)
    c.add_argument("--synth-dir")
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_classify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
