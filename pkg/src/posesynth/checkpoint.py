"""Module and optimizer state as flat named arrays, stored with ``archive``."""

import hashlib

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError
from posesynth.archive import load_arrays, read_manifest, save_arrays


def module_arrays(module, prefix):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays, prefix):
    head = prefix + "/"
    state = {k[len(head):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(head)}
    module.load_state_dict(state)


def optimizer_arrays(optimizer, prefix="optim"):
    """Adam-style per-parameter moments; scalars like lr are recomputed from the step."""
    out = {}
    for i, st in optimizer.state_dict()["state"].items():
        for name, value in st.items():
            out[f"{prefix}/{i}/{name}"] = torch.as_tensor(value).detach().cpu().numpy()
    return out


def load_optimizer_arrays(optimizer, arrays, prefix="optim"):
    sd = optimizer.state_dict()
    state = {}
    head = prefix + "/"
    for key, value in arrays.items():
        if not key.startswith(head):
            continue
        i, name = key[len(head):].split("/", 1)
        state.setdefault(int(i), {})[name] = torch.from_numpy(np.array(value))
    sd["state"] = state
    optimizer.load_state_dict(sd)


def params_digest(module):
    """sha256 over a module's parameters; used to check freeze contracts."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, arrays, kind, step, config_hash, **extra):
    manifest = {"kind": kind, "step": int(step), "config_hash": config_hash, **extra}
    save_arrays(path, arrays, manifest)


def load_checkpoint(path, kind=None, config_hash=None):
    """Return ``(arrays, manifest)``, refusing a different kind or config hash."""
    arrays, manifest = load_arrays(path)
    if kind is not None and manifest.get("kind") != kind:
        raise InvalidArgumentError(f"{path} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        raise InvalidArgumentError(
            f"{path} was written by config {manifest.get('config_hash')}, current config is {config_hash}"
        )
    return arrays, manifest


__all__ = [
    "module_arrays",
    "load_module_arrays",
    "optimizer_arrays",
    "load_optimizer_arrays",
    "params_digest",
    "save_checkpoint",
    "load_checkpoint",
    "read_manifest",
]
