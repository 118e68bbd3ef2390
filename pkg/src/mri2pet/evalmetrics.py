"""Image-quality metrics, ROI-localized metrics, fairness statistics and the
clinical-variable sensitivity protocol."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from math import comb
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .dataio import Volume3D

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _array(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume3D) else v, dtype=np.float64)


def _check_pair(pred, gt, check_range=True):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if check_range:
        for name, a in (("pred", pred), ("gt", gt)):
            if a.min() < -1e-6 or a.max() > 1 + 1e-6:
                raise ValueError(f"{name} values outside [0, 1]")


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * math.log10(peak**2 / mse))


def _box_mean_valid(x: np.ndarray, window) -> np.ndarray:
    """Mean over every fully contained box of size ``window`` (summed-area table)."""
    out = x
    for axis, w in enumerate(window):
        c = np.cumsum(out, axis=axis)
        zero = np.zeros_like(np.take(c, [0], axis=axis))
        c = np.concatenate([zero, c], axis=axis)
        n = c.shape[axis]
        out = (np.take(c, np.arange(w, n), axis=axis) - np.take(c, np.arange(0, n - w), axis=axis)) / w
    return out


def ssim3d(pred, gt, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained uniform ``window``^3 boxes.

    Local statistics use population (biased) variances. Axes shorter than the
    window use a window equal to the axis length.
    """
    x, y = _array(pred), _array(gt)
    _check_pair(x, y, check_range=False)
    w = tuple(min(window, n) for n in x.shape)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mx, my = _box_mean_valid(x, w), _box_mean_valid(y, w)
    vx = _box_mean_valid(x * x, w) - mx * mx
    vy = _box_mean_valid(y * y, w) - my * my
    cxy = _box_mean_valid(x * y, w) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(s.mean())


def slicewise_ssim(pred, gt, axis: int) -> float:
    """Mean 2D SSIM (7x7 windows) over the slices of a volume along ``axis``."""
    x, y = np.moveaxis(_array(pred), axis, 0), np.moveaxis(_array(gt), axis, 0)
    _check_pair(x, y, check_range=False)
    return float(np.mean([ssim3d(a[..., None], b[..., None]) for a, b in zip(x, y)]))


def volume_metrics(pred, gt) -> dict:
    x, y = _array(pred), _array(gt)
    _check_pair(x, y)
    err = x - y
    mse = float(np.mean(err**2))
    return {
        "mae": float(np.mean(np.abs(err))),
        "mse": mse,
        "psnr": psnr_from_mse(mse),
        "ssim": ssim3d(x, y),
    }


def _bbox(mask: np.ndarray):
    idx = np.argwhere(mask)
    lo, hi = idx.min(0), idx.max(0) + 1
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def roi_metrics(pred, gt, mask) -> dict:
    """ROI-localized metrics under two normalization conventions.

    ``A`` averages over mask voxels only; ``B`` divides masked error sums by
    the total voxel count. SSIM is computed on the mask's bounding box and is
    shared by both conventions.
    """
    x, y = _array(pred), _array(gt)
    m = _array(mask)
    _check_pair(x, y)
    if m.shape != x.shape:
        raise ValueError("mask shape differs from volume shape")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    m = m.astype(bool)
    if not m.any():
        raise ValueError("empty ROI mask")
    err = x - y
    box = _bbox(m)
    ssim = ssim3d(x[box], y[box])
    out = {}
    for label, denom in (("A", m.sum()), ("B", m.size)):
        mse = float((err[m] ** 2).sum() / denom)
        out[label] = {
            "mae_roi": float(np.abs(err[m]).sum() / denom),
            "mse_roi": mse,
            "psnr_roi": psnr_from_mse(mse),
            "ssim_roi": ssim,
        }
    return out


# ---------------------------------------------------------------------------
# Rank-sum testing


def _rankdata(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a), dtype=np.float64)
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_distribution(n: int, m: int) -> np.ndarray:
    """Counts of arrangements for each Mann-Whitney U value (no ties)."""
    # f[i][j] = counts for i items of sample one and j of sample two
    f = {(0, j): np.array([1]) for j in range(m + 1)}
    for i in range(1, n + 1):
        f[(i, 0)] = np.array([1])
        for j in range(1, m + 1):
            a = f[(i - 1, j)]  # largest element from sample one: contributes j
            b = f[(i, j - 1)]
            size = i * j + 1
            out = np.zeros(size, dtype=object)
            out[j:j + len(a)] += a
            out[:len(b)] += b
            f[(i, j)] = out
    return f[(n, m)]


EXACT_LIMIT = 50_000


def rank_sum_test(x, y) -> dict:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney U) test.

    Exact null distribution for small tie-free samples, otherwise the normal
    approximation with tie correction.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n < 1 or m < 1:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ranks = _rankdata(pooled)
    r1 = ranks[:n].sum()
    u = r1 - n * (n + 1) / 2.0
    ties = len(np.unique(pooled)) < len(pooled)
    if not ties and comb(n + m, n) <= EXACT_LIMIT:
        counts = _u_distribution(n, m).astype(np.float64)
        probs = counts / counts.sum()
        k = int(round(u))
        lower, upper = probs[:k + 1].sum(), probs[k:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        method = "exact"
    else:
        N = n + m
        _, tcounts = np.unique(pooled, return_counts=True)
        tie_term = float((tcounts**3 - tcounts).sum()) / (N * (N - 1))
        var = n * m / 12.0 * ((N + 1) - tie_term)
        if var <= 0:
            p = 1.0
        else:
            zscore = (u - n * m / 2.0) / math.sqrt(var)
            p = float(min(1.0, 2.0 * norm.sf(abs(zscore))))
        method = "normal"
    return {"U": float(u), "rank_sum": float(r1), "p": float(p), "method": method}


def bonferroni(pvalues) -> list:
    k = len(pvalues)
    return [min(1.0, k * p) for p in pvalues]


def age_bin(age: float) -> str:
    if age < 60:
        return "<60"
    if age < 70:
        return "60-70"
    if age < 80:
        return "70-80"
    return ">80"


def fairness_report(per_subject_mae, groups: dict) -> dict:
    """Per-group MAE summaries and Bonferroni-adjusted pairwise rank-sum tests.

    ``groups`` maps a factor name (e.g. ``"gender"``) to the group label of
    each subject. Groups with fewer than two members are summarized but left
    out of the tests. The Bonferroni family is the set of comparisons within
    one factor.
    """
    mae = np.asarray(per_subject_mae, dtype=np.float64)
    report = {}
    for factor, labels in groups.items():
        labels = list(labels)
        if len(labels) != len(mae):
            raise ValueError(f"{factor}: {len(labels)} labels for {len(mae)} subjects")
        members = defaultdict(list)
        for v, g in zip(mae, labels):
            members[g].append(v)
        table = {
            g: {"n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
            for g, v in sorted(members.items())
        }
        testable = [g for g in sorted(members) if len(members[g]) >= 2]
        tests = []
        for a, b in itertools.combinations(testable, 2):
            res = rank_sum_test(members[a], members[b])
            tests.append({"groups": [a, b], **res})
        for t, adj in zip(tests, bonferroni([t["p"] for t in tests])):
            t["p_adjusted"] = adj
        report[factor] = {
            "table": table,
            "tests": tests,
            "excluded": [g for g in sorted(members) if len(members[g]) < 2],
        }
    report["total"] = {"n": len(mae), "mean": float(mae.mean()), "std": float(mae.std(ddof=1)) if len(mae) > 1 else 0.0}
    return report


# ---------------------------------------------------------------------------
# Clinical-variable sensitivity


SENSITIVITY_VARIABLES = ("age", "gender", "education", "mmse", "adas13", "apoe4", "All")


def clinical_group_means(records) -> dict:
    """Per-diagnosis means (over present values) of every clinical variable."""
    from .conditioning import CLINICAL_VARIABLES

    out = {}
    by_dx = defaultdict(list)
    for r in records:
        by_dx[r.diagnosis].append(r.clinical)
    all_recs = [r.clinical for r in records]
    for dx, recs in list(by_dx.items()) + [("_all", all_recs)]:
        out[dx] = {}
        for name in CLINICAL_VARIABLES:
            vals = [c[name] for c in recs if c.get(name) is not None]
            out[dx][name] = float(np.mean(vals)) if vals else None
    return out


OPPOSITE = {"CN": "AD", "AD": "CN", "MCI": "_all"}


def perturb_clinical(raw: dict, diagnosis: str, variable: str, group_means: dict) -> dict:
    """Keep ``variable``; set all other variables to the opposite group's mean."""
    from .conditioning import CLINICAL_VARIABLES

    if variable not in SENSITIVITY_VARIABLES:
        raise ValueError(f"unknown clinical variable {variable!r}")
    if variable == "All":
        return dict(raw)
    source = group_means.get(OPPOSITE[diagnosis]) or group_means["_all"]
    out = dict(raw)
    for name in CLINICAL_VARIABLES:
        if name != variable:
            out[name] = source[name]
    return out


def sensitivity_analysis(generate, records, variable: str, group_means: dict, roi_mask) -> dict:
    """Regenerate each subject with perturbed clinical data and score it.

    ``generate(record, raw_clinical) -> Volume3D`` produces the synthetic PET.
    Returns per-diagnosis mean MAE and ROI MAE (convention A and B).
    """
    mask = _array(roi_mask)
    rows = defaultdict(lambda: defaultdict(list))
    for rec in records:
        raw = perturb_clinical(rec.clinical, rec.diagnosis, variable, group_means)
        pred = generate(rec, raw)
        vm = np.mean(np.abs(_array(pred) - _array(rec.pet)))
        rm = roi_metrics(pred, rec.pet, mask)
        rows[rec.diagnosis]["mae"].append(vm)
        rows[rec.diagnosis]["mae_roi_A"].append(rm["A"]["mae_roi"])
        rows[rec.diagnosis]["mae_roi_B"].append(rm["B"]["mae_roi"])
    return {dx: {k: float(np.mean(v)) for k, v in d.items()} | {"n": len(d["mae"])}
            for dx, d in rows.items()}


def write_error_maps(pred, gt, prefix, vmax: float = 0.25, index=None) -> list:
    """Grayscale PNGs of ``|pred - gt|`` through the central slice of each plane.

    Errors are scaled linearly so that ``vmax`` maps to white.
    """
    from PIL import Image

    err = np.abs(_array(pred) - _array(gt))
    index = index or tuple(n // 2 for n in err.shape)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, axis in (("sagittal", 0), ("coronal", 1), ("axial", 2)):
        plane = np.take(err, index[axis], axis=axis)
        img = np.clip(plane / vmax * 255.0, 0, 255).astype(np.uint8)
        path = prefix.with_name(f"{prefix.name}_{name}.png")
        Image.fromarray(np.rot90(img)).save(path)
        paths.append(path)
    return paths
