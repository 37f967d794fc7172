"""PSNR/SSIM, a small FSRCNN-style SR network, and the train/test distribution trend experiment."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from .degrade import DegradationParams, DegradationSpace, apply_degradation, bicubic_resize, sample_params
from .nets import torch_resize
from .toydata import make_scenes

PSNR_CAP = 99.0


class EvalError(ValueError):
    pass


# --------------------------------------------------------------------- metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise EvalError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gauss_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, win: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM (Gaussian window, K1=0.01, K2=0.03, range 1), valid windows only."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise EvalError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise EvalError(f"image side {min(a.shape[-2:])} smaller than the {win}px window")
    c1, c2 = 0.01**2, 0.03**2
    g = _gauss_1d(win, sigma)
    r = win // 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=-1, mode="constant")
        y = ndimage.correlate1d(y, g, axis=-2, mode="constant")
        return y[..., r:-r, r:-r]

    vals = []
    for x, y in zip(a, b):
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx**2
        syy = filt(y * y) - my**2
        sxy = filt(x * y) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    n_images: int
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metric_report(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> MetricReport:
    if len(outputs) == 0:
        raise EvalError("empty evaluation set")
    rows = [(psnr(o, t), ssim(o, t)) for o, t in zip(outputs, targets)]
    p, s = np.mean(rows, axis=0)
    return MetricReport(float(p), float(s), len(rows), [list(r) for r in rows])


# ------------------------------------------------------------------- SR model


class ToySRModel(nn.Module):
    """FSRCNN layout (extract, shrink, map, expand, deconv) on top of a bicubic skip."""

    def __init__(self, scale: int = 4, d: int = 32, s: int = 12, m: int = 3, channels: int = 3):
        super().__init__()
        self.scale = scale
        self.extract = nn.Conv2d(channels, d, 5, padding=2)
        self.shrink = nn.Conv2d(d, s, 1)
        self.mapping = nn.ModuleList(nn.Conv2d(s, s, 3, padding=1) for _ in range(m))
        self.expand = nn.Conv2d(s, d, 1)
        self.deconv = nn.ConvTranspose2d(d, channels, 9, stride=scale, padding=4, output_padding=scale - 1)
        self.acts = nn.ModuleList(nn.PReLU(n) for n in [d, s] + [s] * m + [d])
        nn.init.normal_(self.deconv.weight, std=1e-3)
        nn.init.zeros_(self.deconv.bias)

    def forward(self, x):
        h, w = x.shape[-2:]
        base = torch_resize(x, h * self.scale, w * self.scale)
        y = self.acts[0](self.extract(x))
        y = self.acts[1](self.shrink(y))
        for i, conv in enumerate(self.mapping):
            y = self.acts[2 + i](conv(y))
        y = self.acts[-1](self.expand(y))
        return base + self.deconv(y)

    def upscale(self, lr: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(lr, dtype=np.float32))[None]
            return self(x)[0].clamp(0, 1).double().numpy()


@dataclass
class SRConfig:
    scale: int = 4
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def weights_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _augment(x: torch.Tensor, k: int, flip: int) -> torch.Tensor:
    x = torch.rot90(x, k, dims=(-2, -1))
    return torch.flip(x, dims=(-1,)) if flip % 2 else x


def sr_train(pairs: Sequence, config: SRConfig):
    """L1 training on ``(lr, hr)`` pairs. Returns ``(model, loss_log)``."""
    if len(pairs) < 8:
        raise EvalError("need at least 8 training pairs")
    s = config.scale
    for lr, hr in pairs:
        if hr.shape[0] != lr.shape[0] or hr.shape[1] != lr.shape[1] * s or hr.shape[2] != lr.shape[2] * s:
            raise EvalError(f"pair shapes {lr.shape} / {hr.shape} inconsistent with scale {s}")
    torch.manual_seed(config.seed)
    model = ToySRModel(scale=s)
    lrs = torch.from_numpy(np.stack([p[0] for p in pairs]).astype(np.float32))
    hrs = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.float32))
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.steps, 1))
    losses = []
    for _ in range(config.steps):
        idx = torch.randint(len(pairs), (config.batch_size,), generator=gen)
        k, flip = (int(v) for v in torch.randint(0, 4, (2,), generator=gen))
        x, y = _augment(lrs[idx], k, flip), _augment(hrs[idx], k, flip)
        loss = F.l1_loss(model(x), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    return bicubic_resize(lr, lr.shape[1] * scale, lr.shape[2] * scale)


def sr_eval(model, test_pairs: Sequence) -> dict:
    """Model and bicubic-baseline metrics over ``(lr, hr)`` test pairs."""
    if len(test_pairs) == 0:
        raise EvalError("empty test set")
    scale = getattr(model, "scale", None)
    outs = [model.upscale(lr) for lr, _ in test_pairs]
    hrs = [hr for _, hr in test_pairs]
    if scale is None:
        scale = hrs[0].shape[1] // test_pairs[0][0].shape[1]
    bic = [bicubic_upscale(lr, scale) for lr, _ in test_pairs]
    return {"model": metric_report(outs, hrs), "bicubic": metric_report(bic, hrs)}


# ------------------------------------------------------------ trend experiment


@dataclass
class Distribution:
    name: str
    space: DegradationSpace

    def to_dict(self) -> dict:
        return {"name": self.name, "space": self.space.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Distribution":
        return cls(d["name"], DegradationSpace.from_dict(d["space"]))


def _fig1a_defaults():
    target = DegradationParams(blur_sigma=1.0, kernel_size=11, noise_sigma=0.02)
    matched = DegradationSpace(
        blur_kinds=("isotropic-gaussian",), blur_sigma=(0.9, 1.1), kernel_sizes=(11,),
        noise_sigma=(0.015, 0.025), compression_prob=0.0, orders=("first",),
    )
    mismatched = DegradationSpace(
        blur_kinds=("isotropic-gaussian",), blur_sigma=(2.5, 3.0), kernel_sizes=(11,),
        noise_sigma=(0.015, 0.025), compression_prob=0.0, orders=("first",),
    )
    return target, [Distribution("matched", matched), Distribution("mismatched", mismatched)]


@dataclass
class Fig1aConfig:
    target: DegradationParams = field(default_factory=lambda: _fig1a_defaults()[0])
    distributions: list = field(default_factory=lambda: _fig1a_defaults()[1])
    n_train: int = 32
    n_test: int = 16
    hr_size: int = 64
    sr: SRConfig = field(default_factory=SRConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "target": self.target.to_dict(),
            "distributions": [d.to_dict() for d in self.distributions],
            "n_train": self.n_train,
            "n_test": self.n_test,
            "hr_size": self.hr_size,
            "sr": self.sr.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fig1aConfig":
        d = dict(d)
        return cls(
            target=DegradationParams.from_dict(d.pop("target")),
            distributions=[Distribution.from_dict(x) for x in d.pop("distributions")],
            sr=SRConfig(**d.pop("sr")),
            **d,
        )


@dataclass
class TrendReport:
    rows: list
    bicubic: dict
    matched: str
    verdict: bool
    gap_db: float

    def to_dict(self) -> dict:
        return asdict(self)

    def csv(self) -> str:
        lines = ["distribution,psnr_db,ssim"]
        lines += [f"{r['distribution']},{r['psnr_db']:.4f},{r['ssim']:.4f}" for r in self.rows]
        return "\n".join(lines) + "\n"


def fig1a_experiment(config: Fig1aConfig) -> TrendReport:
    """Train one SR model per degradation distribution and test all on the target degradation.

    Every model sees the same HR scenes and the same initialization seed; only
    the LR side of the training pairs differs. The first distribution is the
    one expected to match the target.
    """
    if len(config.distributions) < 2:
        raise EvalError("need at least two training distributions")
    s = config.target.scale_factor
    hr_train = make_scenes(config.n_train, config.hr_size, config.seed * 7 + 100)
    hr_test = make_scenes(config.n_test, config.hr_size, config.seed * 7 + 101)
    test = []
    for i, hr in enumerate(hr_test):
        theta = DegradationParams(**{**config.target.to_dict(), "noise_seed": 10_000 + i})
        test.append((apply_degradation(hr, theta), hr))

    rows = []
    for k, dist in enumerate(config.distributions):
        if dist.space.scale_factor != s:
            raise EvalError(f"distribution {dist.name!r} uses scale {dist.space.scale_factor}, target uses {s}")
        rng = np.random.default_rng([config.seed, k])
        pairs = [(apply_degradation(hr, sample_params(dist.space, rng)), hr) for hr in hr_train]
        model, losses = sr_train(pairs, SRConfig(**{**config.sr.to_dict(), "scale": s}))
        rep = sr_eval(model, test)["model"]
        rows.append({
            "distribution": dist.name,
            "psnr_db": rep.psnr_db,
            "ssim": rep.ssim,
            "final_loss": losses[-1],
        })
    bic = metric_report([bicubic_upscale(lr, s) for lr, _ in test], [hr for _, hr in test])
    best_other = max(r["psnr_db"] for r in rows[1:])
    gap = rows[0]["psnr_db"] - best_other
    return TrendReport(
        rows=rows,
        bicubic={"psnr_db": bic.psnr_db, "ssim": bic.ssim},
        matched=rows[0]["distribution"],
        verdict=bool(gap > 0),
        gap_db=float(gap),
    )
