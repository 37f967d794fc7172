"""Content/degradation extractors, reconstruction heads and the modulation block."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .degrade import resize_matrix

LEAK = 0.2


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Network sizes. ``lr_size`` is the working LR resolution every extractor sees."""

    channels: int = 3
    scale: int = 4
    lr_size: int = 16
    content_channels: int = 64
    content_blocks: int = 4
    deg_dim: int = 128
    deg_width: int = 64
    deg_blocks: int = 4
    mod_width: int = 64
    cond_channels: int = 32
    unet_width: int = 64
    time_dim: int = 64

    @property
    def hr_size(self) -> int:
        return self.lr_size * self.scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def as_batch(x, dtype=None) -> torch.Tensor:
    """Accept ``(C,H,W)``/``(B,C,H,W)`` numpy or torch input; return a 4-D tensor."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if dtype is not None:
        x = x.to(dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected a 3-D or 4-D image tensor, got shape {tuple(x.shape)}")
    return x


def torch_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable bicubic resize sharing the matrices of ``degrade.bicubic_resize``.

    No clamping, so gradients pass through unchanged.
    """
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = torch.from_numpy(resize_matrix(h, out_h).copy()).to(x)
    mw = torch.from_numpy(resize_matrix(w, out_w).copy()).to(x)
    return torch.einsum("oh,bchw,pw->bcop", mh, x, mw)


def conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = conv3(ch, ch)
        self.conv2 = conv3(ch, ch)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), LEAK)
        return x + self.conv2(h)


class ContentEncoder(nn.Module):
    """Stem conv then stride-1 residual blocks. ``blocks[0]`` is the fine-tuned block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.content_channels
        self.stem = conv3(cfg.channels, c)
        self.blocks = nn.ModuleList(ResBlock(c) for _ in range(cfg.content_blocks))
        # start with the canonicalized RGB passing through the first channels unchanged
        k = min(cfg.channels, c)
        with torch.no_grad():
            self.stem.weight[:k].zero_()
            self.stem.bias[:k].zero_()
            for i in range(k):
                self.stem.weight[i, i, 1, 1] = 1.0
        for blk in self.blocks:
            nn.init.zeros_(blk.conv2.weight)
            nn.init.zeros_(blk.conv2.bias)

    def forward(self, x):
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"expected {self.cfg.channels} channels, got {x.shape[1]}")
        s = self.cfg.lr_size
        x = torch_resize(x, s, s)
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        return h


class HRDecoder(nn.Module):
    """Content features to an HR image through log2(scale) resize+conv stages.

    A 1x1 projection of the features, bicubic-upsampled, acts as a global
    skip so the conv stages only learn the residual detail.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n_up = int(round(math.log2(cfg.scale)))
        if 2**n_up != cfg.scale:
            raise ValueError("scale must be a power of two")
        c = cfg.content_channels
        self.body = nn.Sequential(ResBlock(c), ResBlock(c))
        self.ups = nn.ModuleList(conv3(c, c) for _ in range(n_up))
        self.head = conv3(c, cfg.channels)
        self.skip = nn.Conv2d(c, cfg.channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        nn.init.constant_(self.skip.bias, 0.5)

    def forward(self, f):
        c, s = self.cfg.content_channels, self.cfg.lr_size
        if f.shape[1:] != (c, s, s):
            raise ShapeError(f"content features must be {(c, s, s)}, got {tuple(f.shape[1:])}")
        h = self.body(f)
        for conv in self.ups:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(conv(h), LEAK)
        hr = s * self.cfg.scale
        return (torch_resize(self.skip(f), hr, hr) + self.head(h)).clamp(0.0, 1.0)


class DegradationEncoder(nn.Module):
    """Stem, residual blocks, global average pool, 4-layer 1x1 mapping.

    ``mapping[-1]`` is the final layer unfrozen during diffusion training.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w, d = cfg.deg_width, cfg.deg_dim
        self.stem = conv3(cfg.channels, w)
        self.blocks = nn.ModuleList(ResBlock(w) for _ in range(cfg.deg_blocks))
        self.mapping = nn.ModuleList(
            [nn.Conv2d(w, d, 1), nn.Conv2d(d, d, 1), nn.Conv2d(d, d, 1), nn.Conv2d(d, d, 1)]
        )

    def forward(self, x):
        s = self.cfg.lr_size
        if x.shape[1:] != (self.cfg.channels, s, s):
            raise ShapeError(
                f"degradation extractor expects {(self.cfg.channels, s, s)}, got {tuple(x.shape[1:])}"
            )
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        h = F.adaptive_avg_pool2d(h, 1)
        for i, conv in enumerate(self.mapping):
            h = conv(h)
            if i < len(self.mapping) - 1:
                h = F.leaky_relu(h, LEAK)
        return h.flatten(1)


class FiLM(nn.Module):
    """``x * (1 + gamma) + beta`` with per-channel gamma/beta projected from the vector."""

    def __init__(self, vec_dim: int, channels: int):
        super().__init__()
        self.to_gamma = nn.Linear(vec_dim, channels)
        self.to_beta = nn.Linear(vec_dim, channels)

    def forward(self, x, vec):
        gamma = self.to_gamma(vec)[:, :, None, None]
        beta = self.to_beta(vec)[:, :, None, None]
        return x * (1 + gamma) + beta

    def zero_(self):
        for lin in (self.to_gamma, self.to_beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        return self


class Modulation(nn.Module):
    """Four {conv, activation, FiLM} layers followed by a final conv."""

    def __init__(self, cfg: ModelConfig, out_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        w = cfg.mod_width
        self.out_channels = out_channels or cfg.cond_channels
        ins = [cfg.content_channels, w, w, w]
        self.convs = nn.ModuleList(conv3(i, w) for i in ins)
        self.films = nn.ModuleList(FiLM(cfg.deg_dim, w) for _ in ins)
        self.out = conv3(w, self.out_channels)

    def forward(self, f_deg, f_cont):
        if f_deg.dim() != 2 or f_deg.shape[1] != self.cfg.deg_dim:
            raise ShapeError(f"degradation vector must be (B, {self.cfg.deg_dim}), got {tuple(f_deg.shape)}")
        if f_cont.shape[1] != self.cfg.content_channels:
            raise ShapeError("content features have the wrong channel count")
        if f_deg.shape[0] != f_cont.shape[0]:
            raise ShapeError("batch sizes of degradation and content representations differ")
        h = f_cont
        for conv, film in zip(self.convs, self.films):
            h = film(F.leaky_relu(conv(h), LEAK), f_deg)
        return self.out(h)


class LRReconstructor(nn.Module):
    """Modulation network whose output is decoded (stride 1) to an LR image."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.modulation = Modulation(cfg, out_channels=cfg.mod_width)
        self.head = conv3(cfg.mod_width, cfg.channels)
        nn.init.constant_(self.head.bias, 0.5)

    def forward(self, f_deg, f_cont):
        h = F.leaky_relu(self.modulation(f_deg, f_cont), LEAK)
        return self.head(h).clamp(0.0, 1.0)


class Extractors(nn.Module):
    """All pre-trained pieces plus the condition modulation block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.content = ContentEncoder(cfg)
        self.hr_decoder = HRDecoder(cfg)
        self.degradation = DegradationEncoder(cfg)
        self.lr_decoder = LRReconstructor(cfg)
        self.modulation = Modulation(cfg)


# Functional surface. ``weights`` is an Extractors instance.


def extract_content(weights: Extractors, x) -> torch.Tensor:
    """Canonicalize to the working LR resolution and encode. Input may be any size."""
    return weights.content(as_batch(x, _dtype(weights)))


def extract_degradation(weights: Extractors, x_lr) -> torch.Tensor:
    return weights.degradation(as_batch(x_lr, _dtype(weights)))


def reconstruct_hr(weights: Extractors, f: torch.Tensor) -> torch.Tensor:
    return weights.hr_decoder(f)


def reconstruct_lr(weights: Extractors, f_deg: torch.Tensor, f_cont: torch.Tensor) -> torch.Tensor:
    return weights.lr_decoder(f_deg, f_cont)


def modulate(weights: Extractors, f_deg: torch.Tensor, f_cont: torch.Tensor) -> torch.Tensor:
    return weights.modulation(f_deg, f_cont)


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


# Parameter groups for phase masks.


def finetune_parameters(ext: Extractors) -> list:
    """Extractor parameters unfrozen while training the diffusion model."""
    return list(ext.content.blocks[0].parameters()) + list(ext.degradation.mapping[-1].parameters())


def finetune_parameter_names(ext: Extractors) -> set:
    ids = {id(p) for p in finetune_parameters(ext)}
    return {n for n, p in ext.named_parameters() if id(p) in ids}


def set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def apply_phase(ext: Extractors, phase: str) -> None:
    """Tag parameters trainable/frozen for ``content``, ``degradation`` or ``ddpm``."""
    set_trainable(ext, False)
    if phase == "content":
        set_trainable(ext.content, True)
        set_trainable(ext.hr_decoder, True)
    elif phase == "degradation":
        set_trainable(ext.degradation, True)
        set_trainable(ext.lr_decoder, True)
    elif phase == "ddpm":
        set_trainable(ext.modulation, True)
        for p in finetune_parameters(ext):
            p.requires_grad_(True)
    elif phase != "frozen":
        raise ValueError(f"unknown phase {phase!r}")
