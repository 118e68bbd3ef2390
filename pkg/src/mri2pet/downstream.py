"""Downstream diagnosis: a small 3D ResNet trained on real or synthesized PET,
plus BACC / F1 / AUC scoring and stratified cross-validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def _norm(c: int) -> nn.GroupNorm:
    # group norm keeps train and eval behaviour identical on tiny cohorts
    return nn.GroupNorm(min(4, c), c)


class BasicBlock3D(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = _norm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = _norm(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv3d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.short is None else self.short(x)))


class ResNet3D(nn.Module):
    """Strided stem then four residual stages (one block each); width doubles per stage."""

    def __init__(self, num_classes: int = 2, width: int = 8, in_channels: int = 1):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv3d(in_channels, width, 3, 2, 1, bias=False), _norm(width), nn.ReLU())
        chans = [width, width * 2, width * 4, width * 8]
        stages, cin = [], width
        for i, c in enumerate(chans):
            stages.append(BasicBlock3D(cin, c, stride=1 if i == 0 else 2))
            cin = c
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, num_classes)

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.head(h.mean(dim=(2, 3, 4)))


@dataclass
class ClassifierConfig:
    lr: float = 0.005
    weight_decay: float = 1e-6
    batch_size: int = 32
    epochs: int = 75
    iterations: int | None = None  # overrides epochs when set
    width: int = 8
    num_classes: int = 2
    flip_augment: bool = True
    seed: int = 0

    def num_iterations(self, n_train: int) -> int:
        if self.iterations is not None:
            return int(self.iterations)
        per_epoch = max(1, int(np.ceil(n_train / self.batch_size)))
        return self.epochs * per_epoch


@dataclass
class Classifier:
    model: ResNet3D
    config: ClassifierConfig
    history: list = field(default_factory=list)

    @torch.no_grad()
    def predict_proba(self, volumes) -> np.ndarray:
        self.model.eval()
        x = _to_tensor(volumes)
        out = [F.softmax(self.model(x[i:i + 32]), dim=1) for i in range(0, len(x), 32)]
        return torch.cat(out).numpy().astype(np.float64)

    def predict(self, volumes):
        p = self.predict_proba(volumes)
        return p.argmax(1), p


def _to_tensor(volumes) -> torch.Tensor:
    arr = np.stack([np.asarray(getattr(v, "data", v), dtype=np.float32) for v in volumes])
    return torch.from_numpy(arr)[:, None]


def train_classifier(volumes, labels, config: ClassifierConfig | None = None) -> Classifier:
    """Train from scratch on ``volumes`` (list of 3D arrays / Volume3D) and integer labels."""
    cfg = config or ClassifierConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(volumes) != len(labels):
        raise ValueError("volumes and labels differ in length")
    if len(np.unique(labels)) < 2:
        raise ValueError("training set needs at least two classes")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ResNet3D(cfg.num_classes, cfg.width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    x, y = _to_tensor(volumes), torch.from_numpy(labels)
    n = len(x)
    history = []
    model.train()
    perm, pos = rng.permutation(n), 0
    for it in range(cfg.num_iterations(n)):
        if pos + cfg.batch_size > n and pos > 0:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        xb = x[idx]
        if cfg.flip_augment:
            # the left/right axis is axis 0 of each volume
            flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
            xb = torch.where(flip[:, None, None, None, None], xb.flip(2), xb)
        loss = F.cross_entropy(model(xb), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    model.eval()
    return Classifier(model, cfg, history)


# ---------------------------------------------------------------------------
# Metrics


def balanced_accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    recalls = [np.mean(pred[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def f1_score(pred, labels, positive: int = 1) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    tp = np.sum((pred == positive) & (labels == positive))
    fp = np.sum((pred == positive) & (labels != positive))
    fn = np.sum((pred != positive) & (labels == positive))
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def auc_score(scores, labels, positive: int = 1) -> float:
    """Area under the ROC curve as the Mann-Whitney probability (ties count half)."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    pos, neg = scores[labels == positive], scores[labels != positive]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both positive and negative samples")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def classification_report(pred, labels, scores) -> dict:
    """BACC, F1 and AUC for a binary task; ``scores`` are positive-class probabilities."""
    return {
        "bacc": balanced_accuracy(pred, labels),
        "f1": f1_score(pred, labels),
        "auc": auc_score(scores, labels),
        "n": int(len(labels)),
    }


def stratified_folds(labels, k: int = 5, seed: int = 0) -> list:
    """Split indices into ``k`` folds with per-class counts as even as possible."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for i, j in enumerate(idx):
            folds[(i + offset) % k].append(int(j))
        offset += len(idx)
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def check_disjoint(train_ids, test_ids) -> None:
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise ValueError(f"subjects in both train and test: {sorted(overlap)[:5]}")


def crossval(volumes, labels, subject_ids, k: int = 5, config: ClassifierConfig | None = None,
             seed: int = 0) -> dict:
    """Stratified k-fold evaluation; returns per-fold reports and mean/std."""
    cfg = config or ClassifierConfig(seed=seed)
    labels = np.asarray(labels)
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    folds = stratified_folds(labels, k, seed)
    reports = []
    for i, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
        check_disjoint([ids[j] for j in train_idx], [ids[j] for j in test_idx])
        clf = train_classifier([volumes[j] for j in train_idx], labels[train_idx],
                               ClassifierConfig(**{**asdict(cfg), "seed": cfg.seed + i}))
        pred, proba = clf.predict([volumes[j] for j in test_idx])
        reports.append(classification_report(pred, labels[test_idx], proba[:, 1]))
    summary = {m: {"mean": float(np.mean([r[m] for r in reports])), "std": float(np.std([r[m] for r in reports]))}
               for m in ("bacc", "f1", "auc")}
    return {"folds": reports, "summary": summary}
