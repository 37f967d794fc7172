"""Conditional DDPM: schedule, forward noising, denoiser, training step and sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .losses import loss_eps
from .nets import (
    Extractors,
    ModelConfig,
    as_batch,
    extract_content,
    extract_degradation,
    finetune_parameters,
    modulate,
    torch_resize,
)


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step arrays indexed so that ``betas[t - 1]`` belongs to step ``t``."""

    t_max: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.t_max:
            raise DiffusionError(f"t={t} outside [1, {self.t_max}]")

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t - 1])


def make_schedule(t_max: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with ``sigma_t**2 = beta_t``."""
    if t_max < 1:
        raise DiffusionError("t_max must be >= 1")
    if not 0 < beta_start < beta_end < 1:
        raise DiffusionError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(t_max, betas, alphas, alpha_bars, sigmas)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or a per-item tensor."""
    if eps.shape != x0.shape:
        raise DiffusionError("eps must match x0 in shape")
    if isinstance(t, int):
        sched.check_t(t)
        ab = sched.alpha_bar(t)
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    t = torch.as_tensor(t)
    if int(t.min()) < 1 or int(t.max()) > sched.t_max:
        raise DiffusionError("t outside schedule range")
    ab = torch.from_numpy(sched.alpha_bars).to(x0)[t - 1].view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ------------------------------------------------------------------ denoiser


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class EpsNet(nn.Module):
    """Small two-level U-Net predicting the noise of ``x_t``.

    The condition is resized to ``x_t``'s spatial size and concatenated to the
    input channels; the sinusoidal timestep embedding enters every block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w, td = cfg.unet_width, cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td))
        self.inp = nn.Conv2d(cfg.channels + cfg.cond_channels, w, 3, padding=1)
        self.down1 = TimeResBlock(w, w, td)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.mid1 = TimeResBlock(w, 2 * w, td)
        self.mid2 = TimeResBlock(2 * w, 2 * w, td)
        self.up1 = TimeResBlock(3 * w, w, td)
        self.up2 = TimeResBlock(w, w, td)
        self.out_norm = nn.GroupNorm(8, w)
        self.out = nn.Conv2d(w, cfg.channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x_t, c, t):
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t))
        t = t.reshape(-1).expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x_t.dtype))
        h, w = x_t.shape[-2:]
        c = torch_resize(c, h, w)
        h0 = self.inp(torch.cat([x_t, c], dim=1))
        h1 = self.down1(h0, temb)
        m = self.mid2(self.mid1(self.down(h1), temb), temb)
        m = F.interpolate(m, size=h1.shape[-2:], mode="nearest")
        u = self.up2(self.up1(torch.cat([m, h1], dim=1), temb), temb)
        return self.out(F.silu(self.out_norm(u)))


# -------------------------------------------------------------------- training


def condition_from(ext: Extractors, x_content, x_degradation) -> torch.Tensor:
    """Condition built from the content of one image and the degradation of another."""
    return modulate(ext, extract_degradation(ext, x_degradation), extract_content(ext, x_content))


def make_optimizer(eps_net: EpsNet, ext: Extractors, lr: float = 1e-4, finetune_lr: float = 1e-6):
    """Adam with the denoiser and modulation at ``lr`` and unfrozen extractor layers at ``finetune_lr``."""
    main = list(eps_net.parameters()) + list(ext.modulation.parameters())
    return torch.optim.Adam(
        [
            {"params": main, "lr": lr, "name": "ddpm"},
            {"params": finetune_parameters(ext), "lr": finetune_lr, "name": "finetune"},
        ]
    )


def train_step(
    eps_net: EpsNet,
    sched: NoiseSchedule,
    x_lr_batch: torch.Tensor,
    ext: Extractors,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
) -> float:
    """One decoupled-DDPM step on real LR images; returns the scalar loss.

    The condition comes from the content and degradation of the same images
    that serve as ``x_0``. Randomness (timesteps, noise) is drawn only from
    ``generator``.
    """
    if ext is None:
        raise DiffusionError("extractors are not loaded")
    x0 = as_batch(x_lr_batch, next(eps_net.parameters()).dtype)
    b = x0.shape[0]
    t = torch.randint(1, sched.t_max + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    c = condition_from(ext, x0, x0)
    x_t = q_sample(x0, t, eps, sched)
    loss = loss_eps(eps, eps_net(x_t, c, t))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# -------------------------------------------------------------------- sampling


EpsFn = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


def p_sample_step(eps_net: EpsFn, x_t: torch.Tensor, c, t: int, sched: NoiseSchedule, z: torch.Tensor) -> torch.Tensor:
    """``x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps) / sqrt(a_t) + sigma_t z``; ``z`` is ignored at t=1."""
    sched.check_t(t)
    a, ab = sched.alpha(t), sched.alpha_bar(t)
    eps = eps_net(x_t, c, t)
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + sched.sigma(t) * z


@torch.no_grad()
def sample_from(
    eps_net: EpsFn,
    x_init: torch.Tensor,
    tau: int,
    c,
    sched: NoiseSchedule,
    generator: torch.Generator,
    tau_cap: Optional[int] = None,
    trace: Optional[list] = None,
) -> torch.Tensor:
    """Partially noise ``x_init`` to step ``tau`` and denoise back to step 0.

    ``tau == 0`` returns a copy of ``x_init``. The result is clamped to [0, 1]
    only once, after the last step. If ``trace`` is a list, ``(t, norm)`` pairs
    are appended to it.
    """
    cap = sched.t_max if tau_cap is None else tau_cap
    if not 0 <= tau <= min(cap, sched.t_max):
        raise DiffusionError(f"tau={tau} outside [0, {min(cap, sched.t_max)}]")
    if tau == 0:
        return x_init.clone()
    eps = torch.randn(x_init.shape, generator=generator, dtype=x_init.dtype)
    x = q_sample(x_init, tau, eps, sched)
    for t in range(tau, 0, -1):
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype) if t > 1 else torch.zeros_like(x)
        x = p_sample_step(eps_net, x, c, t, sched, z)
        if trace is not None:
            trace.append((t, float(x.norm())))
    return x.clamp(0.0, 1.0)
