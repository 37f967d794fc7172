"""Procedural toy scenes standing in for real HR photographs.

Each scene is a smooth colour gradient overlaid with random rectangles,
discs, stripes and lines, so it carries both flat regions and sharp edges.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .degrade import DegradationParams, apply_degradation
from .io import save_png


def make_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(ang) * xx + np.sin(ang) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 1, 3)[:, None, None]
        kind = rng.integers(4)
        if kind == 0:
            x0, y0 = rng.uniform(0, 0.8, 2)
            w, h = rng.uniform(0.1, 0.5, 2)
            mask = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        elif kind == 1:
            cx, cy = rng.uniform(0.1, 0.9, 2)
            r = rng.uniform(0.05, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r**2
        elif kind == 2:
            period = rng.uniform(0.08, 0.25)
            a = rng.uniform(0, np.pi)
            phase = np.cos(a) * xx + np.sin(a) * yy
            cx, cy = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.15, 0.4)
            mask = (np.mod(phase, period) < period / 2) & ((xx - cx) ** 2 + (yy - cy) ** 2 < r**2)
        else:
            a = rng.uniform(0, np.pi)
            off = rng.uniform(-0.5, 0.5)
            d = -np.sin(a) * (xx - 0.5) + np.cos(a) * (yy - 0.5) - off
            mask = np.abs(d) < rng.uniform(0.01, 0.04)
        img = np.where(mask[None], color, img)
    return np.clip(img, 0.0, 1.0)


def make_scenes(n: int, size: int, seed: int) -> list:
    return [make_scene(size, np.random.default_rng([seed, i])) for i in range(n)]


# Hidden degradation of the toy "real-world" LR domain: anisotropic blur,
# moderate noise and strong compression, none of it known to the generator.
REAL_WORLD = dict(
    blur_kind="anisotropic-gaussian",
    blur_sigma=2.0,
    aniso_ratio=0.4,
    blur_angle=0.6,
    kernel_size=11,
    noise_sigma=0.05,
    compression_quality=40,
    order="first",
)


def real_world_params(scale: int, seed: int) -> DegradationParams:
    return DegradationParams(scale_factor=scale, noise_seed=seed, **REAL_WORLD)


def write_toy_dataset(
    out: Path,
    n_hr: int = 32,
    n_lr: int = 32,
    n_test: int = 16,
    hr_size: int = 64,
    scale: int = 4,
    seed: int = 0,
) -> dict:
    """Write ``hr_train``, ``lr_real`` (unpaired) and ``test/{hr,lr}`` PNG folders.

    Scenes in the three groups come from disjoint seed streams.
    """
    out = Path(out)
    layout = {
        "hr_train": out / "hr_train",
        "lr_real": out / "lr_real",
        "test_hr": out / "test" / "hr",
        "test_lr": out / "test" / "lr",
    }
    for p in layout.values():
        p.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(make_scenes(n_hr, hr_size, seed * 3 + 0)):
        save_png(layout["hr_train"] / f"{i:05d}.png", img)
    for i, img in enumerate(make_scenes(n_lr, hr_size, seed * 3 + 1)):
        lr = apply_degradation(img, real_world_params(scale, 1000 + i))
        save_png(layout["lr_real"] / f"{i:05d}.png", lr)
    for i, img in enumerate(make_scenes(n_test, hr_size, seed * 3 + 2)):
        save_png(layout["test_hr"] / f"{i:05d}.png", img)
        lr = apply_degradation(img, real_world_params(scale, 5000 + i))
        save_png(layout["test_lr"] / f"{i:05d}.png", lr)
    return {k: str(v) for k, v in layout.items()}
