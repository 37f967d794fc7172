"""Training and generation phases, each resumable and deterministic under a fixed seed.

Output layout under ``paths.out``::

    checkpoints/{content,degradation,ddpm}.{bin,json}
    logs/{content,degradation,ddpm}.jsonl
    generated/{lr,hr}/NNNNN.png, generated/manifest.json
    reports/*.json, reports/*.csv
    manifests/<command>.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import PipelineConfig
from .degrade import apply_degradation, build_triplets, sample_params
from .diffusion import EpsNet, make_optimizer, make_schedule, train_step
from .evaluation import SRConfig, fig1a_experiment, sr_eval, sr_train
from .generation import GenerateConfig, Models, generate_dataset
from .io import list_pngs, load_png
from .losses import loss_cl, loss_rh, loss_rl
from .nets import Extractors, apply_phase, set_trainable

log = logging.getLogger(__name__)

RUN_SCHEMA = 1
PHASE_IDS = {"content": 1, "degradation": 2, "ddpm": 3}


class MissingPrerequisite(RuntimeError):
    """A required checkpoint or dataset is absent."""


# ------------------------------------------------------------------- helpers


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.paths.out)

    def ckpt(self, name: str) -> Path:
        return self.out / "checkpoints" / name

    def log(self, name: str) -> Path:
        return self.out / "logs" / f"{name}.jsonl"

    @property
    def generated(self) -> Path:
        return self.out / "generated"

    @property
    def reports(self) -> Path:
        return self.out / "reports"

    def manifest(self, command: str) -> Path:
        return self.out / "manifests" / f"{command}.json"


def step_rng(seed: int, phase: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, PHASE_IDS[phase], step])


def step_generator(seed: int, phase: str, step: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, PHASE_IDS[phase], step, 1]).generate_state(1, np.uint64)[0]
    return torch.Generator().manual_seed(int(state >> 1))


def load_folder(folder, what: str) -> list:
    files = list_pngs(folder) if folder else []
    if not files:
        raise MissingPrerequisite(f"no {what} images found in {folder}")
    return [load_png(p) for p in files]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``size`` square crop under a random rotation/flip (one of the 8 dihedral maps)."""
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {img.shape[1:]} smaller than crop size {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    patch = img[:, y : y + size, x : x + size]
    k, flip = (int(v) for v in rng.integers(0, 4, size=2))
    patch = np.rot90(patch, k, axes=(1, 2))
    return np.ascontiguousarray(patch[:, :, ::-1] if flip % 2 else patch)


def to_tensor(batch: list) -> torch.Tensor:
    return torch.from_numpy(np.stack(batch).astype(np.float32))


class LossLog:
    """JSON-lines loss log that can be truncated back to a checkpointed step."""

    def __init__(self, path: Path):
        self.path = path

    def read(self) -> list:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def truncate(self, step: int) -> None:
        keep = [r for r in self.read() if r["step"] <= step]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in keep))

    def append(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def new_extractors(cfg: PipelineConfig) -> Extractors:
    torch.manual_seed(cfg.seed)
    return Extractors(cfg.model)


def save_phase(ws: Workspace, name: str, step: int, modules: dict, opt, extra_meta: Optional[dict] = None) -> None:
    tensors = {}
    for prefix, module in modules.items():
        tensors.update(ckpt.module_tensors(prefix, module))
    opt_t, groups = optimizer_tensors_named(opt)
    tensors.update(opt_t)
    meta = {
        "phase": name,
        "step": step,
        "profile": ws.cfg.profile,
        "model": ws.cfg.model.to_dict(),
        "rng": {"seed": ws.cfg.seed, "next_step": step + 1},
        "param_shapes": {k: list(v.shape) for k, v in sorted(tensors.items()) if not k.startswith("optim.")},
        "optimizer_groups": groups,
        "trainable": sorted(
            f"{prefix}.{n}" for prefix, m in modules.items() for n, p in m.named_parameters() if p.requires_grad
        ),
    }
    meta.update(extra_meta or {})
    ckpt.save(ws.ckpt(name), tensors, meta)


def optimizer_tensors_named(opt):
    tensors, groups = ckpt.optimizer_tensors(opt)
    return tensors, json.loads(json.dumps(groups))


def restore_phase(ws: Workspace, name: str, modules: dict, opt=None) -> int:
    tensors, meta = ckpt.load(ws.ckpt(name))
    for prefix, module in modules.items():
        ckpt.load_module(prefix, module, tensors)
    if opt is not None:
        ckpt.load_optimizer(opt, tensors, meta["optimizer_groups"])
    return int(meta["step"])


def require(ws: Workspace, *names: str) -> None:
    for n in names:
        if not ckpt.exists(ws.ckpt(n)):
            raise MissingPrerequisite(f"missing {n} checkpoint in {ws.ckpt(n).parent}")


# -------------------------------------------------------------------- phases


def set_step_lr(opt, base_lr: float, step: int, total: int, schedule: str) -> None:
    """Learning rate for ``step`` (1-based) as a pure function of the step, so resume is exact."""
    if schedule == "cosine" and total > 1:
        lr = 0.5 * base_lr * (1.0 + math.cos(math.pi * (step - 1) / total))
    else:
        lr = base_lr
    for g in opt.param_groups:
        g["lr"] = lr


def _train_loop(ws: Workspace, name: str, total: int, modules: dict, opt, step_fn, stop_after=None) -> dict:
    """Shared resume/checkpoint/log loop; ``step_fn(step)`` returns a dict of loss terms."""
    cfg = ws.cfg
    logf = LossLog(ws.log(name))
    start = 0
    if ckpt.exists(ws.ckpt(name)):
        start = restore_phase(ws, name, modules, opt)
        log.info("resuming %s from step %d", name, start)
    logf.truncate(start)
    step = start
    for step in range(start + 1, total + 1):
        terms = step_fn(step)
        logf.append({"step": step, **terms})
        if step % cfg.train.checkpoint_every == 0 or step == total:
            save_phase(ws, name, step, modules, opt)
        if stop_after is not None and step - start >= stop_after:
            if step % cfg.train.checkpoint_every:
                save_phase(ws, name, step, modules, opt)
            break
    if not ckpt.exists(ws.ckpt(name)):
        save_phase(ws, name, start, modules, opt)
    return {"start": start, "end": max(step, start)}


def pretrain_content(cfg: PipelineConfig, stop_after: Optional[int] = None) -> dict:
    """Train the content encoder and HR decoder on (D(x, theta), x) pairs."""
    ws = Workspace(cfg)
    hrs = load_folder(cfg.paths.hr_train, "HR training")
    ext = new_extractors(cfg)
    apply_phase(ext, "content")
    params = list(ext.content.parameters()) + list(ext.hr_decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.train.content_lr)
    size = cfg.model.hr_size

    def step_fn(step):
        rng = step_rng(cfg.seed, "content", step)
        xs, ys = [], []
        for _ in range(cfg.train.batch_size):
            hr = random_crop(hrs[int(rng.integers(len(hrs)))], size, rng)
            theta = sample_params(cfg.space, rng)
            xs.append(apply_degradation(hr, theta))
            ys.append(hr)
        lr_b, hr_b = to_tensor(xs), to_tensor(ys)
        loss = loss_rh(ext.hr_decoder(ext.content(lr_b)), hr_b)
        set_step_lr(opt, cfg.train.content_lr, step, cfg.train.content_steps, cfg.train.lr_schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return {"loss_rh": float(loss.detach())}

    span = _train_loop(ws, "content", cfg.train.content_steps, {"ext": ext}, opt, step_fn, stop_after)
    return {"produced": ["content"], **span}


def _deg_batch(cfg: PipelineConfig, hrs: list, step: int, n: int):
    """LR images grouped per item as ``[anchor, n positives, n negatives]`` plus their HR sources."""
    rng = step_rng(cfg.seed, "degradation", step)
    size = cfg.model.hr_size
    lr_all, hr_all = [], []
    for _ in range(cfg.train.deg_batch_size):
        i = int(rng.integers(len(hrs)))
        x = random_crop(hrs[i], size, rng)
        pool_idx = [j for j in range(len(hrs)) if j != i]
        pool = [random_crop(hrs[j], size, rng) for j in rng.choice(pool_idx, size=n, replace=False)]
        theta = sample_params(cfg.space, rng)
        tb = build_triplets(x, pool, theta, n, rng, cfg.space, anchor_source=i)
        lr_all += [tb.anchor, *tb.positives, *tb.negatives]
        hr_all += [x] + [pool[k] for k in tb.positive_sources] + [x] * n
    return to_tensor(lr_all), to_tensor(hr_all)


def pretrain_degradation(cfg: PipelineConfig, stop_after: Optional[int] = None) -> dict:
    """Train the degradation encoder with the triplet hinge plus LR reconstruction.

    The content encoder comes from the content checkpoint and stays frozen.
    """
    ws = Workspace(cfg)
    require(ws, "content")
    hrs = load_folder(cfg.paths.hr_train, "HR training")
    if len(hrs) <= cfg.train.n:
        raise MissingPrerequisite(f"need more than n={cfg.train.n} HR images for triplets")
    ext = new_extractors(cfg)
    restore_phase(ws, "content", {"ext": ext})
    apply_phase(ext, "degradation")
    params = list(ext.degradation.parameters()) + list(ext.lr_decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.train.deg_lr)
    t = cfg.train
    n = t.n

    def step_fn(step):
        lr_all, hr_all = _deg_batch(cfg, hrs, step, n)
        # lr_all holds [anchor, positives, negatives] per item; encode once for both terms
        reps = ext.degradation(lr_all)
        grouped = reps.view(-1, 1 + 2 * n, reps.shape[-1])
        ra = grouped[:, 0]
        rp = grouped[:, 1 : 1 + n].transpose(0, 1)
        rq = grouped[:, 1 + n :].transpose(0, 1)
        l_cl = loss_cl(ra, rp, rq, t.margin)
        with torch.no_grad():
            f_cont = ext.content(hr_all)
        l_rl = loss_rl(ext.lr_decoder(reps, f_cont), lr_all)
        if t.deg_loss_mode == "sum":
            total = l_cl + t.rl_weight * l_rl
        else:
            total = l_cl if step % 2 else t.rl_weight * l_rl
        set_step_lr(opt, t.deg_lr, step, t.deg_steps, t.lr_schedule)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        return {"loss_cl": float(l_cl.detach()), "loss_rl": float(l_rl.detach())}

    span = _train_loop(ws, "degradation", t.deg_steps, {"ext": ext}, opt, step_fn, stop_after)
    return {"consumed": ["content"], "produced": ["degradation"], **span}


def init_ddpm_models(cfg: PipelineConfig, ws: Workspace):
    """Extractors from the degradation checkpoint; modulation warm-started from the LR decoder's."""
    ext = new_extractors(cfg)
    restore_phase(ws, "degradation", {"ext": ext})
    src = ext.lr_decoder.modulation.state_dict()
    dst = ext.modulation.state_dict()
    dst.update({k: v for k, v in src.items() if not k.startswith("out.")})
    ext.modulation.load_state_dict(dst)
    torch.manual_seed(cfg.seed + 1)
    eps_net = EpsNet(cfg.model)
    return ext, eps_net


def train_ddpm(cfg: PipelineConfig, stop_after: Optional[int] = None) -> dict:
    """Decoupled DDPM training on real LR images with the extractor fine-tune mask."""
    ws = Workspace(cfg)
    require(ws, "content", "degradation")
    lrs = load_folder(cfg.paths.lr_real, "real LR")
    ext, eps_net = init_ddpm_models(cfg, ws)
    apply_phase(ext, "ddpm")
    set_trainable(eps_net, True)
    opt = make_optimizer(eps_net, ext, cfg.train.lr, cfg.train.finetune_lr)
    sched = make_schedule(cfg.schedule.t_max, cfg.schedule.beta_start, cfg.schedule.beta_end)
    size = cfg.model.lr_size

    def step_fn(step):
        rng = step_rng(cfg.seed, "ddpm", step)
        batch = [random_crop(lrs[int(rng.integers(len(lrs)))], size, rng) for _ in range(cfg.train.ddpm_batch_size)]
        gen = step_generator(cfg.seed, "ddpm", step)
        return {"loss_eps": train_step(eps_net, sched, to_tensor(batch), ext, opt, gen)}

    modules = {"ext": ext, "eps": eps_net}
    span = _train_loop(ws, "ddpm", cfg.train.ddpm_steps, modules, opt, step_fn, stop_after)
    return {"consumed": ["content", "degradation"], "produced": ["ddpm"], **span}


def load_models(cfg: PipelineConfig) -> Models:
    ws = Workspace(cfg)
    require(ws, "ddpm")
    ext = Extractors(cfg.model)
    eps_net = EpsNet(cfg.model)
    restore_phase(ws, "ddpm", {"ext": ext, "eps": eps_net})
    sched = make_schedule(cfg.schedule.t_max, cfg.schedule.beta_start, cfg.schedule.beta_end)
    return Models(ext, eps_net, sched).eval()


def generate(cfg: PipelineConfig, out_dir: Optional[Path] = None, tau_cap: Optional[int] = None) -> dict:
    ws = Workspace(cfg)
    models = load_models(cfg)
    g = cfg.generation
    gcfg = GenerateConfig(
        k=g.k,
        tau_cap=g.tau_cap if tau_cap is None else tau_cap,
        init=g.init,
        ref_assignment=g.ref_assignment,
        seed=cfg.seed,
        workers=g.workers,
    )
    hr_dir = cfg.paths.hr_gen or cfg.paths.hr_train
    if not list_pngs(hr_dir):
        raise MissingPrerequisite(f"no HR images in {hr_dir}")
    out = Path(out_dir) if out_dir else ws.generated
    if out.exists():
        shutil.rmtree(out)
    manifest = generate_dataset(models, hr_dir, cfg.paths.lr_real, out, gcfg)
    return {
        "consumed": ["ddpm"],
        "n_pairs": len(manifest.entries),
        "n_failures": len(manifest.failures),
        "dataset": str(out),
    }


# --------------------------------------------------------------- evaluation


def load_pairs(lr_dir, hr_dir, what: str) -> list:
    lrs = list_pngs(lr_dir) if lr_dir else []
    hrs = list_pngs(hr_dir) if hr_dir else []
    if not lrs or len(lrs) != len(hrs):
        raise MissingPrerequisite(f"{what}: need matching non-empty LR/HR folders ({lr_dir}, {hr_dir})")
    return [(load_png(a), load_png(b)) for a, b in zip(lrs, hrs)]


def _sr_cfg(cfg: PipelineConfig) -> SRConfig:
    return replace(cfg.experiments.sr, scale=cfg.model.scale, seed=cfg.seed)


def handcrafted_pairs(cfg: PipelineConfig, hrs: list) -> list:
    rng = np.random.default_rng([cfg.seed, 404])
    return [(apply_degradation(hr, sample_params(cfg.space, rng)), hr) for hr in hrs]


def evaluate(cfg: PipelineConfig) -> dict:
    """SR trained on generated pairs vs hand-crafted pairs vs bicubic, on the real test set."""
    ws = Workspace(cfg)
    train = load_pairs(ws.generated / "lr", ws.generated / "hr", "generated dataset")
    test = load_pairs(cfg.paths.test_lr, cfg.paths.test_hr, "test set")
    sr_cfg = _sr_cfg(cfg)
    rows = []
    model, _ = sr_train(train, sr_cfg)
    res = sr_eval(model, test)
    rows.append({"training_data": "generated", "psnr_db": res["model"].psnr_db, "ssim": res["model"].ssim})
    hc_model, _ = sr_train(handcrafted_pairs(cfg, [hr for _, hr in train]), sr_cfg)
    hc = sr_eval(hc_model, test)["model"]
    rows.append({"training_data": "handcrafted", "psnr_db": hc.psnr_db, "ssim": hc.ssim})
    rows.append({"training_data": "bicubic", "psnr_db": res["bicubic"].psnr_db, "ssim": res["bicubic"].ssim})
    write_table(ws.reports / "eval", rows)
    return {"rows": rows}


def write_table(stem: Path, rows: list) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps({"schema": 1, "rows": rows}, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    stem.with_suffix(".csv").write_text(buf.getvalue())


def ablate(cfg: PipelineConfig, which: str) -> dict:
    """Generate, train SR and evaluate once per grid point; writes ``reports/ablate_<which>``."""
    ws = Workspace(cfg)
    test = load_pairs(cfg.paths.test_lr, cfg.paths.test_hr, "test set")
    sr_cfg = _sr_cfg(cfg)
    rows = []
    if which == "T":
        require(ws, "ddpm")
        for cap in cfg.experiments.t_grid:
            out = ws.out / "ablate_T" / f"cap_{cap:03d}"
            generate(cfg, out_dir=out, tau_cap=cap)
            rows.append({"T": f"0-{cap}", **_sr_row(load_pairs(out / "lr", out / "hr", "ablation set"), test, sr_cfg)})
        name = "ablate_T"
    elif which == "n-margin":
        require(ws, "content")
        e = cfg.experiments
        for n, margin in e.n_margin_grid:
            sub = ws.out / "ablate_n_margin" / f"n{n}_m{margin:g}"
            train = replace(
                cfg.train,
                n=int(n),
                margin=float(margin),
                deg_steps=e.ablate_deg_steps if e.ablate_deg_steps is not None else cfg.train.deg_steps,
                ddpm_steps=e.ablate_ddpm_steps if e.ablate_ddpm_steps is not None else cfg.train.ddpm_steps,
            )
            sub_cfg = replace(cfg, paths=replace(cfg.paths, out=str(sub)), train=train)
            if sub.exists():
                shutil.rmtree(sub)
            (sub / "checkpoints").mkdir(parents=True)
            for suffix in (".bin", ".json"):
                shutil.copy(ws.ckpt("content").with_suffix(suffix), sub / "checkpoints" / f"content{suffix}")
            pretrain_degradation(sub_cfg)
            train_ddpm(sub_cfg)
            generate(sub_cfg)
            gen = Workspace(sub_cfg).generated
            rows.append({"n": int(n), "margin": float(margin), **_sr_row(load_pairs(gen / "lr", gen / "hr", "ablation set"), test, sr_cfg)})
        name = "ablate_n_margin"
    else:
        raise ValueError(f"unknown ablation {which!r}")
    write_table(ws.reports / name, rows)
    return {"rows": rows}


def _sr_row(train: list, test: list, sr_cfg: SRConfig) -> dict:
    model, _ = sr_train(train, sr_cfg)
    rep = sr_eval(model, test)["model"]
    return {"psnr_db": rep.psnr_db, "ssim": rep.ssim}


def fig1a(cfg: PipelineConfig) -> dict:
    ws = Workspace(cfg)
    fcfg = replace(cfg.experiments.fig1a, seed=cfg.seed)
    report = fig1a_experiment(fcfg)
    ws.reports.mkdir(parents=True, exist_ok=True)
    (ws.reports / "fig1a.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (ws.reports / "fig1a.csv").write_text(report.csv())
    return report.to_dict()


# ------------------------------------------------------------------ manifests


ARTIFACTS = {
    "content": lambda ws: ws.ckpt("content").with_suffix(".bin"),
    "degradation": lambda ws: ws.ckpt("degradation").with_suffix(".bin"),
    "ddpm": lambda ws: ws.ckpt("ddpm").with_suffix(".bin"),
}


def _hashes(ws: Workspace, names) -> dict:
    out = {}
    for n in names or []:
        p = ARTIFACTS[n](ws)
        if p.exists():
            out[n] = ckpt.sha256_file(p)
    return out


def write_run_manifest(cfg: PipelineConfig, command: str, result: dict, timing: dict, outcome: str, pre_hashes: dict) -> Path:
    ws = Workspace(cfg)
    doc = {
        "schema": RUN_SCHEMA,
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "consumed": pre_hashes,
        "produced": _hashes(ws, (result or {}).get("produced")),
        "result": {k: v for k, v in (result or {}).items() if k not in ("consumed", "produced")},
        "timing": timing,
        "outcome": outcome,
    }
    path = ws.manifest(command)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


CONSUMES = {
    "pretrain-content": [],
    "pretrain-degradation": ["content"],
    "train-ddpm": ["content", "degradation"],
    "generate": ["ddpm"],
    "ablate": ["content", "ddpm"],
    "eval": [],
    "fig1a": [],
}


def run_command(cfg: PipelineConfig, command: str, **kw) -> dict:
    """Run one phase and write its run manifest (also on failure)."""
    ws = Workspace(cfg)
    pre = _hashes(ws, CONSUMES.get(command))
    funcs = {
        "pretrain-content": pretrain_content,
        "pretrain-degradation": pretrain_degradation,
        "train-ddpm": train_ddpm,
        "generate": generate,
        "eval": evaluate,
        "fig1a": fig1a,
        "ablate": ablate,
    }
    t0 = time.perf_counter()
    try:
        result = funcs[command](cfg, **kw)
    except Exception as exc:
        write_run_manifest(cfg, command, {}, {"total_s": time.perf_counter() - t0}, f"error: {type(exc).__name__}: {exc}", pre)
        raise
    write_run_manifest(cfg, command, result, {"total_s": time.perf_counter() - t0}, "ok", pre)
    return result
