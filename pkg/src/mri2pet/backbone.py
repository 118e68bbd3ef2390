"""Symmetric dual-arm UNet: a conditioner arm that produces a multi-scale
feature pyramid and a denoiser arm whose residual blocks are modulated by it.

Both arms are the same ``ConditionalUNet`` class, so their roles can be
exchanged without creating parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (
    CLINICAL_DIM,
    ConditionBundle,
    adagn,
    group_count,
    sa_adagn,
    timestep_embedding,
)


@dataclass
class UNetConfig:
    base_channels: int = 16
    channel_multipliers: tuple = (1, 2, 3)
    levels: int = 3
    attention_factors: tuple = (4,)
    in_channels: int = 5
    out_channels: int = 5
    num_res_blocks: int = 2
    num_heads: int = 4
    groups: int = 32
    dropout: float = 0.0
    clinical_dim: int = CLINICAL_DIM
    slice_aware: bool = False
    resblock_updown: bool = False

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_factors = tuple(sorted(self.attention_factors))
        if len(self.channel_multipliers) != self.levels:
            raise ValueError("len(channel_multipliers) must equal levels")
        allowed = {2**k for k in range(self.levels)}
        if not set(self.attention_factors) <= allowed:
            raise ValueError(f"attention factors {self.attention_factors} not in {sorted(allowed)}")
        if self.in_channels != self.out_channels:
            raise ValueError("slice-stack width must match at input and output")

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_channels

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(**kw) -> UNetConfig:
    return UNetConfig(**kw)


def full_scale_config(**kw) -> UNetConfig:
    """Full-size configuration: five resolutions (96x112 down to 6x7)."""
    base = dict(base_channels=64, channel_multipliers=(1, 2, 3, 4, 4), levels=5,
                attention_factors=(4, 8, 16), in_channels=15, out_channels=15,
                resblock_updown=True)
    base.update(kw)
    return UNetConfig(**base)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """Residual block whose second normalization is (SA-)AdaGN."""

    def __init__(self, in_ch, out_ch, emb_dim, groups=32, dropout=0.0, slice_aware=False, resample=None):
        super().__init__()
        if resample not in (None, "up", "down"):
            raise ValueError(f"unknown resample mode {resample!r}")
        self.resample = resample
        self.out_ch = out_ch
        self.groups = group_count(out_ch, groups)
        self.in_norm = nn.GroupNorm(group_count(in_ch, groups), in_ch)
        self.in_conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, 2 * out_ch))
        self.clinical_head = _zero(nn.Linear(emb_dim, out_ch))
        self.slice_head = _zero(nn.Linear(emb_dim, 2 * out_ch)) if slice_aware else None
        self.dropout = nn.Dropout(dropout)
        self.out_conv = _zero(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _resample(self, x, size):
        if self.resample == "down":
            return F.avg_pool2d(x, 2, ceil_mode=True)
        if self.resample == "up":
            return F.interpolate(x, size=size, mode="nearest")
        return x

    def forward(self, x, t_emb=None, c_emb=None, z_emb=None, h_m=None, size=None):
        h = F.silu(self.in_norm(x))
        if self.resample:
            h, x = self._resample(h, size), self._resample(x, size)
        h = self.in_conv(h)
        t_s = t_b = c_s = None
        if t_emb is not None:
            scale, t_b = self.time_proj(t_emb).chunk(2, dim=1)
            t_s = 1.0 + scale
        if c_emb is not None:
            c_s = 1.0 + self.clinical_head(c_emb)
        if self.slice_head is not None and z_emb is not None:
            z_scale, z_b = self.slice_head(z_emb).chunk(2, dim=1)
            h = sa_adagn(h, t_s, t_b, c_s, h_m, 1.0 + z_scale, z_b, self.groups)
        else:
            h = adagn(h, t_s, t_b, c_s, h_m, self.groups)
        h = self.out_conv(self.dropout(F.silu(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, ch, num_heads=4, groups=32):
        super().__init__()
        self.heads = num_heads if ch % num_heads == 0 else 1
        self.norm = nn.GroupNorm(group_count(ch, groups), ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = _zero(nn.Conv1d(ch, ch, 1))

    def forward(self, x):
        b, c, *spatial = x.shape
        flat = x.reshape(b, c, -1)
        q, k, v = self.qkv(self.norm(flat)).reshape(b, 3, self.heads, c // self.heads, -1).unbind(1)
        out = F.scaled_dot_product_attention(q.transpose(-1, -2), k.transpose(-1, -2), v.transpose(-1, -2))
        out = out.transpose(-1, -2).reshape(b, c, -1)
        return (flat + self.proj(out)).reshape(b, c, *spatial)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, size):
        return self.conv(F.interpolate(x, size=size, mode="nearest"))


class ConditionalUNet(nn.Module):
    """ADM-style UNet operating on N-slice stacks.

    ``forward`` returns the output stack and the list of residual-block
    outputs in traversal order (encoder, middle, decoder); that list is the
    feature pyramid another arm consumes as ``bundle.h_m``.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = cfg = config
        C, E, G = cfg.base_channels, cfg.emb_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(C, E), nn.SiLU(), nn.Linear(E, E))
        self.clinical_mlp = nn.Sequential(nn.Linear(cfg.clinical_dim, E), nn.SiLU(), nn.Linear(E, E))
        self.slice_mlp = (nn.Sequential(nn.Linear(1, E), nn.SiLU(), nn.Linear(E, E))
                          if cfg.slice_aware else None)

        block = lambda i, o: ResBlock(i, o, E, G, cfg.dropout, cfg.slice_aware)  # noqa: E731
        ch = C * cfg.channel_multipliers[0]
        self.in_conv = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)
        self.down = nn.ModuleList()
        skip_chs = [ch]
        ds = 1
        for level, mult in enumerate(cfg.channel_multipliers):
            for _ in range(cfg.num_res_blocks):
                out = C * mult
                self.down.append(nn.ModuleList([block(ch, out)] + self._attn(out, ds)))
                ch = out
                skip_chs.append(ch)
            if level < cfg.levels - 1:
                down = (ResBlock(ch, ch, E, G, cfg.dropout, cfg.slice_aware, resample="down")
                        if cfg.resblock_updown else Downsample(ch))
                self.down.append(nn.ModuleList([down]))
                skip_chs.append(ch)
                ds *= 2
        self.mid = nn.ModuleList([block(ch, ch), AttentionBlock(ch, cfg.num_heads, G), block(ch, ch)])
        self.up = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.channel_multipliers))):
            for i in range(cfg.num_res_blocks + 1):
                out = C * mult
                layers = [block(ch + skip_chs.pop(), out)] + self._attn(out, ds)
                ch = out
                if level > 0 and i == cfg.num_res_blocks:
                    layers.append(ResBlock(ch, ch, E, G, cfg.dropout, cfg.slice_aware, resample="up")
                                  if cfg.resblock_updown else Upsample(ch))
                    ds //= 2
                self.up.append(nn.ModuleList(layers))
        self.out = nn.Sequential(nn.GroupNorm(group_count(ch, G), ch), nn.SiLU(),
                                 _zero(nn.Conv2d(ch, cfg.out_channels, 3, padding=1)))

    def _attn(self, ch, ds):
        if ds in self.config.attention_factors:
            return [AttentionBlock(ch, self.config.num_heads, self.config.groups)]
        return []

    @property
    def num_res_blocks_total(self) -> int:
        return sum(isinstance(m, ResBlock) for m in self.modules())

    def embeddings(self, bundle: ConditionBundle, batch: int):
        t_emb = c_emb = z_emb = None
        if bundle.t is not None:
            t = torch.as_tensor(bundle.t).reshape(-1).expand(batch) if torch.as_tensor(bundle.t).numel() == 1 \
                else torch.as_tensor(bundle.t)
            t_emb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(self.in_conv.weight))
        if bundle.clinical is not None:
            c_emb = self.clinical_mlp(bundle.clinical.to(self.in_conv.weight))
        if bundle.z is not None and self.slice_mlp is not None:
            z = torch.as_tensor(bundle.z).to(self.in_conv.weight).reshape(-1, 1).expand(batch, 1)
            z_emb = self.slice_mlp(z)
        return t_emb, c_emb, z_emb

    def forward(self, x: torch.Tensor, bundle: ConditionBundle | None = None):
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        bundle = bundle or ConditionBundle()
        h_m = bundle.h_m
        if h_m is not None and len(h_m) != self.num_res_blocks_total:
            raise ValueError(f"feature pyramid has {len(h_m)} maps for {self.num_res_blocks_total} blocks")
        embs = self.embeddings(bundle, x.shape[0])
        feats = []

        def run(layers, h):
            for layer in layers:
                if isinstance(layer, ResBlock):
                    hm = None if h_m is None else h_m[len(feats)]
                    size = skips[-1].shape[2:] if layer.resample == "up" else None
                    h = layer(h, *embs, h_m=hm, size=size)
                    feats.append(h)
                elif isinstance(layer, Upsample):
                    h = layer(h, skips[-1].shape[2:] if skips else None)
                else:
                    h = layer(h)
            return h

        h = self.in_conv(x)
        skips = [h]
        for layers in self.down:
            h = run(layers, h)
            skips.append(h)
        h = run(self.mid, h)
        for layers in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            h = run(layers, h)
        return self.out(h), feats


@dataclass
class FeaturePyramid:
    maps: list
    scales: list = field(default_factory=list)

    @classmethod
    def from_maps(cls, maps, input_hw):
        return cls(maps, [input_hw[0] // m.shape[2] for m in maps])

    def __len__(self):
        return len(self.maps)


CONDITION_TARGETS = ("denoiser", "conditioner", "both")


class DualArmModel(nn.Module):
    """Two symmetric UNets: one dedicated to MRI, one to PET.

    In ``M2P`` mode the MRI arm conditions and the PET arm denoises; ``P2M``
    is the exchanged configuration used by the cycle-consistency pathway.
    ``condition_on`` routes the clinical/slice conditions to the denoiser
    (default), the conditioner, or both.
    """

    def __init__(self, config: UNetConfig, condition_on: str = "denoiser", mode: str = "M2P",
                 _arms: nn.ModuleDict | None = None):
        super().__init__()
        if condition_on not in CONDITION_TARGETS:
            raise ValueError(f"condition_on must be one of {CONDITION_TARGETS}")
        if mode not in ("M2P", "P2M"):
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.condition_on = condition_on
        self.mode = mode
        self.arms = _arms if _arms is not None else nn.ModuleDict({
            "mri": ConditionalUNet(config), "pet": ConditionalUNet(config),
        })

    @property
    def conditioner(self) -> ConditionalUNet:
        return self.arms["mri" if self.mode == "M2P" else "pet"]

    @property
    def denoiser(self) -> ConditionalUNet:
        return self.arms["pet" if self.mode == "M2P" else "mri"]

    def conditioner_forward(self, source: torch.Tensor, clinical=None, z=None):
        """Run the conditioner arm: ``(task prediction, feature pyramid)``."""
        if self.condition_on in ("conditioner", "both"):
            bundle = ConditionBundle(clinical=clinical, z=z)
        else:
            bundle = ConditionBundle()
        return self.conditioner(source, bundle)

    def denoiser_forward(self, x_t: torch.Tensor, t, h_m, clinical=None, z=None):
        """Predict the clean target stack from its noised version."""
        if self.condition_on in ("denoiser", "both"):
            bundle = ConditionBundle(t=t, clinical=clinical, h_m=h_m, z=z)
        else:
            bundle = ConditionBundle(t=t, h_m=h_m)
        out, _ = self.denoiser(x_t, bundle)
        return out

    def forward(self, source, x_t, t, clinical=None, z=None):
        task_pred, h_m = self.conditioner_forward(source, clinical, z)
        return task_pred, self.denoiser_forward(x_t, t, h_m, clinical, z)

    def denoise_fn(self, source, clinical=None, z=None):
        """Sampler-ready closure ``(x_t, t) -> x0_hat``; the pyramid is computed once."""
        _, h_m = self.conditioner_forward(source, clinical, z)

        def fn(x_t, t):
            return self.denoiser_forward(x_t, t, h_m, clinical, z)
        return fn


def swap_arms(model: DualArmModel) -> DualArmModel:
    """A view of ``model`` with conditioner and denoiser roles exchanged."""
    a, b = model.arms["mri"], model.arms["pet"]
    if a.config != b.config or [p.shape for p in a.parameters()] != [p.shape for p in b.parameters()]:
        raise ValueError("arms are not symmetric")
    return DualArmModel(model.config, model.condition_on, "P2M" if model.mode == "M2P" else "M2P",
                        _arms=model.arms)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
