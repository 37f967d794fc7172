"""LR synthesis from unpaired (HR, reference LR) images with candidate filtering."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .degrade import bicubic_resize
from .diffusion import EpsNet, NoiseSchedule, condition_from, sample_from
from .io import list_pngs, load_png, save_png
from .nets import Extractors, extract_content, extract_degradation

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
INIT_MODES = ("hr", "ref-lr")


class GenerationError(RuntimeError):
    pass


@dataclass
class Models:
    extractors: Extractors
    eps_net: EpsNet
    schedule: NoiseSchedule

    def eval(self) -> "Models":
        self.extractors.eval()
        self.eps_net.eval()
        return self


@dataclass
class GenerationRequest:
    hr_image: np.ndarray
    lr_ref: np.ndarray
    k_candidates: int = 3
    tau_cap: int = 300
    seed: int = 0
    init: str = "hr"

    def __post_init__(self):
        if self.k_candidates < 1:
            raise GenerationError("k_candidates must be >= 1")
        if self.tau_cap < 0:
            raise GenerationError("tau_cap must be >= 0")
        if self.init not in INIT_MODES:
            raise GenerationError(f"init must be one of {INIT_MODES}")


@dataclass
class ScoredCandidate:
    image: np.ndarray
    deg_error: float
    cont_error: float
    combined: float
    tau: Optional[int] = None

    def summary(self) -> dict:
        return {
            "deg_error": self.deg_error,
            "cont_error": self.cont_error,
            "combined": self.combined,
            "tau": self.tau,
        }


def _dtype(models: Models) -> torch.dtype:
    return next(models.eps_net.parameters()).dtype


@torch.no_grad()
def build_condition(ext: Extractors, x_hr, x_lr_ref) -> torch.Tensor:
    """Content from the HR image, degradation from the reference LR."""
    return condition_from(ext, x_hr, x_lr_ref)


def init_image(req: GenerationRequest, scale: int) -> np.ndarray:
    """``hr``: bicubic-downsampled HR. ``ref-lr``: the reference LR itself."""
    if req.init == "ref-lr":
        return np.asarray(req.lr_ref, dtype=np.float64)
    _, h, w = req.hr_image.shape
    return bicubic_resize(req.hr_image, h // scale, w // scale)


def candidate_generator(seed: int, index: int) -> torch.Generator:
    ss = np.random.SeedSequence([seed, index])
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))


@torch.no_grad()
def generate_candidates(models: Models, req: GenerationRequest, taus_out: Optional[list] = None) -> list:
    """``k`` candidates at LR resolution; candidate ``i`` draws its own tau from substream ``(seed, i)``."""
    if models is None or models.eps_net is None or models.extractors is None:
        raise GenerationError("trained weights are not loaded")
    sched = models.schedule
    if req.tau_cap > sched.t_max:
        raise GenerationError(f"tau_cap {req.tau_cap} exceeds T_max {sched.t_max}")
    dtype = _dtype(models)
    scale = models.extractors.cfg.scale
    c = build_condition(models.extractors, req.hr_image, req.lr_ref)
    x_init = torch.from_numpy(init_image(req, scale)).to(dtype)[None]
    out = []
    for i in range(req.k_candidates):
        gen = candidate_generator(req.seed, i)
        tau = int(torch.randint(0, req.tau_cap + 1, (1,), generator=gen))
        x = sample_from(models.eps_net, x_init, tau, c, sched, gen, tau_cap=req.tau_cap)
        out.append(x[0].double().numpy())
        if taus_out is not None:
            taus_out.append(tau)
    return out


def select_best(deg_errors: Sequence[float], cont_errors: Sequence[float]):
    """Index minimizing the sum of mean-normalized errors, plus the combined scores.

    A term whose mean over the set is zero contributes zero for every
    candidate. Ties go to the lowest index.
    """
    if len(deg_errors) == 0 or len(deg_errors) != len(cont_errors):
        raise GenerationError("need matching, non-empty error lists")
    total = np.zeros(len(deg_errors))
    for errs in (np.asarray(deg_errors, float), np.asarray(cont_errors, float)):
        m = errs.mean()
        if m > 0:
            total += errs / m
    return int(np.argmin(total)), total


@torch.no_grad()
def filter_best(ext: Extractors, candidates: Sequence[np.ndarray], x_hr, x_lr_ref, taus=None):
    """Score candidates by representation distance to the references; return ``(winner, scored)``."""
    if len(candidates) == 0:
        raise GenerationError("no candidates to filter")
    if len(candidates) == 1:
        only = ScoredCandidate(candidates[0], 0.0, 0.0, 0.0, taus[0] if taus else None)
        return candidates[0], [only]
    ref_deg = extract_degradation(ext, x_lr_ref)[0]
    ref_cont = extract_content(ext, x_hr)[0]
    stack = np.stack(candidates)
    degs = extract_degradation(ext, stack)
    conts = extract_content(ext, stack)
    deg_err = [float(torch.linalg.vector_norm(d - ref_deg)) for d in degs]
    cont_err = [float(torch.linalg.vector_norm(f - ref_cont)) for f in conts]
    best, total = select_best(deg_err, cont_err)
    scored = [
        ScoredCandidate(cand, deg_err[i], cont_err[i], float(total[i]), taus[i] if taus else None)
        for i, cand in enumerate(candidates)
    ]
    return candidates[best], scored


# --------------------------------------------------------------------- dataset


@dataclass
class GenerateConfig:
    k: int = 3
    tau_cap: int = 300
    init: str = "hr"
    ref_assignment: str = "round-robin"
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, "config": self.config, "entries": self.entries, "failures": self.failures}

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 7919, index]).generate_state(1, np.uint64)[0] >> 1)


def assign_refs(n_hr: int, n_ref: int, mode: str, seed: int) -> list:
    if mode == "round-robin":
        return [i % n_ref for i in range(n_hr)]
    if mode == "random":
        rng = np.random.default_rng([seed, 31])
        return [int(v) for v in rng.integers(0, n_ref, n_hr)]
    raise GenerationError(f"unknown ref assignment {mode!r}")


def generate_dataset(models: Models, hr_dir, lr_ref_dir, out_dir, config: GenerateConfig) -> DatasetManifest:
    """Generate one filtered LR per HR image and write ``out_dir/{lr,hr}`` plus ``manifest.json``.

    Per-image failures (unreadable files, wrong sizes) are logged into the
    manifest and the run continues.
    """
    hr_files = list_pngs(hr_dir)
    ref_files = list_pngs(lr_ref_dir)
    if not hr_files:
        raise GenerationError(f"no HR images in {hr_dir}")
    if not ref_files:
        raise GenerationError(f"no reference LR images in {lr_ref_dir}")
    out_dir = Path(out_dir)
    models.eval()
    cfg = models.extractors.cfg
    refs = assign_refs(len(hr_files), len(ref_files), config.ref_assignment, config.seed)

    def work(i: int):
        hr_path, ref_path = hr_files[i], ref_files[refs[i]]
        entry = {"index": i, "hr_file": hr_path.name, "lr_ref_file": ref_path.name}
        try:
            hr = load_png(hr_path)
            ref = load_png(ref_path)
            if hr.shape[1:] != (cfg.hr_size, cfg.hr_size):
                raise GenerationError(f"HR size {hr.shape[1:]} != {(cfg.hr_size, cfg.hr_size)}")
            if ref.shape[1:] != (cfg.lr_size, cfg.lr_size):
                raise GenerationError(f"reference LR size {ref.shape[1:]} != {(cfg.lr_size, cfg.lr_size)}")
            seed = pair_seed(config.seed, i)
            req = GenerationRequest(hr, ref, config.k, config.tau_cap, seed, config.init)
            taus: list = []
            cands = generate_candidates(models, req, taus)
            best, scored = filter_best(models.extractors, cands, hr, ref, taus)
            winner = next(j for j, s in enumerate(scored) if s.image is best)
            return entry | {
                "seed": seed,
                "tau": taus[winner],
                "winner": winner,
                "scores": [s.summary() for s in scored],
                "output": f"{i:05d}.png",
            }, (hr, best)
        except (OSError, ValueError, RuntimeError) as exc:
            log.warning("pair %d failed: %s", i, exc)
            return entry | {"error": f"{type(exc).__name__}: {exc}"}, None

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, range(len(hr_files))))
    else:
        results = [work(i) for i in range(len(hr_files))]

    manifest = DatasetManifest(config=config.to_dict())
    for entry, images in results:
        if images is None:
            manifest.failures.append(entry)
            continue
        hr, lr = images
        save_png(out_dir / "hr" / entry["output"], hr)
        save_png(out_dir / "lr" / entry["output"], lr)
        manifest.entries.append(entry)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.write(out_dir / "manifest.json")
    return manifest
