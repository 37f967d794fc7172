"""Checkpoints: one raw tensor blob plus a JSON sidecar.

``<stem>.bin`` holds the tensors back to back in sorted-name order;
``<stem>.json`` lists each tensor's dtype, shape and byte offset along
with free-form metadata. No timestamps are written, so identical states
produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

FORMAT = "forge-ckpt/1"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save(stem, tensors: dict, meta: dict) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        index[name] = {"dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    bin_path = stem.with_suffix(".bin")
    _atomic_write(bin_path, blob)
    side = {"format": FORMAT, "sha256": hashlib.sha256(blob).hexdigest(), "meta": meta, "tensors": index}
    _atomic_write(stem.with_suffix(".json"), (json.dumps(side, indent=2, sort_keys=True) + "\n").encode())
    return bin_path


def load(stem):
    """Return ``(tensors, meta)``."""
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    if side.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {side.get('format')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != side["sha256"]:
        raise ValueError(f"checkpoint blob {stem}.bin does not match its manifest hash")
    tensors = {}
    for name, info in side["tensors"].items():
        raw = blob[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, side["meta"]


def exists(stem) -> bool:
    stem = Path(stem)
    return stem.with_suffix(".bin").is_file() and stem.with_suffix(".json").is_file()


# --------------------------------------------------------- module/optimizer glue


def module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, tensors: dict) -> None:
    sub = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(sub)


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple:
    """Split an optimizer state into blob tensors and JSON-able group settings."""
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"optim.{idx}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return tensors, sd["param_groups"]


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict, groups: list) -> None:
    state: dict = {}
    for name, val in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": groups})
