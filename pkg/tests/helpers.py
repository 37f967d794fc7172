"""Shared builders for tests that drive the pipeline end to end."""

import json
from pathlib import Path

from forge.io import save_png
from forge.toydata import make_scenes, write_toy_dataset

# Small networks and budgets so every CLI phase runs in a few seconds.
FAST_MODEL = {
    "content_channels": 8,
    "content_blocks": 1,
    "deg_dim": 8,
    "deg_width": 8,
    "deg_blocks": 1,
    "mod_width": 8,
    "cond_channels": 8,
    "unet_width": 8,
    "time_dim": 8,
}
FAST_TRAIN = {
    "batch_size": 2,
    "content_steps": 10,
    "deg_steps": 4,
    "deg_batch_size": 1,
    "ddpm_steps": 6,
    "ddpm_batch_size": 2,
    "checkpoint_every": 3,
}


# Budget of the shared toy run. Every training-measurement test and the
# end-to-end acceptance check reuse it so the pipeline is trained once.
TOY_TRAIN = {
    "content_steps": 1000,
    "content_lr": 1e-3,
    "deg_steps": 600,
    "deg_lr": 1e-3,
    "deg_batch_size": 8,
    "lr_schedule": "cosine",
    "ddpm_steps": 1500,
    "checkpoint_every": 100,
}


def make_toy_root(root: Path, n_hr=32, n_lr=32, n_test=16, n_gen=50) -> Path:
    write_toy_dataset(root / "data", n_hr=n_hr, n_lr=n_lr, n_test=n_test)
    for i, img in enumerate(make_scenes(n_gen, 64, 999)):
        save_png(root / "data" / "hr_gen" / f"{i:05d}.png", img)
    return root


def write_run_config(root: Path, train: dict, name="config.json", out="out", data=None, **extra) -> Path:
    """Write a config under ``root``; ``data`` defaults to ``root/data``."""
    d = Path(data) if data is not None else root / "data"
    cfg = {
        "paths": {
            "out": str(out),
            "hr_train": str(d / "hr_train"),
            "lr_real": str(d / "lr_real"),
            "hr_gen": str(d / "hr_gen"),
            "test_hr": str(d / "test" / "hr"),
            "test_lr": str(d / "test" / "lr"),
        },
        "train": train,
        **extra,
    }
    path = root / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def fast_config(root: Path, data: Path, name="config.json", out="out", train=None, **extra) -> Path:
    extra.setdefault("model", FAST_MODEL)
    extra.setdefault("schedule", {"t_max": 50})
    extra.setdefault("generation", {"k": 2, "tau_cap": 20})
    extra["experiments"] = {"t_grid": [5, 10], "sr": {"steps": 5, "batch_size": 2}, **extra.get("experiments", {})}
    return write_run_config(root, {**FAST_TRAIN, **(train or {})}, name=name, out=out, data=data, **extra)
