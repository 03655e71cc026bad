"""Checkpoints: an ``.npz`` archive of named arrays plus a ``.json`` metadata sidecar."""
from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError

FORMAT_VERSION = 1


def _paths(path):
    base = Path(path)
    if base.suffix in (".npz", ".json"):
        base = base.with_suffix("")
    return base, base.with_name(base.name + ".npz"), base.with_name(base.name + ".json")


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy().copy()


def _rng_digest(torch_state: np.ndarray, stream_state) -> str:
    h = hashlib.sha256(torch_state.tobytes())
    h.update(json.dumps(stream_state, sort_keys=True).encode())
    return h.hexdigest()


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> list:
    sd = opt.state_dict()
    for idx, entry in sd["state"].items():
        for key, value in entry.items():
            arrays[f"{prefix}/state/{idx}/{key}"] = _to_numpy(torch.as_tensor(value))
    return sd["param_groups"]


def _optimizer_state(prefix: str, arrays, param_groups) -> dict:
    state = {}
    head = prefix + "/state/"
    for name in arrays.files:
        if not name.startswith(head):
            continue
        idx, key = name[len(head):].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arrays[name])
    return {"state": state, "param_groups": param_groups}


def save_checkpoint(state, path) -> Path:
    """Write ``<path>.npz`` and ``<path>.json``; returns the base path."""
    base, npz_path, json_path = _paths(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix, module in (("generator", state.generator), ("critic", state.critic)):
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = _to_numpy(t)
    groups_d = _optimizer_arrays("opt_d", state.opt_d, arrays)
    groups_g = _optimizer_arrays("opt_g", state.opt_g, arrays)
    rng_state = _to_numpy(state.rng.get_state())
    arrays["rng/torch"] = rng_state
    stream_state = state.stream.state_dict() if state.stream is not None else None
    meta = {
        "format_version": FORMAT_VERSION,
        "iteration": state.iteration,
        "config": state.config.to_flat(),
        "optimizer_param_groups": {"opt_d": groups_d, "opt_g": groups_g},
        "stream_state": stream_state,
        "running": state.running,
        "rng_digest": _rng_digest(rng_state, stream_state),
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
    }
    tmp_npz = npz_path.with_name(npz_path.name + ".tmp")
    with open(tmp_npz, "wb") as fh:
        np.savez(fh, **arrays)
    tmp_npz.replace(npz_path)
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return base


def read_metadata(path) -> dict:
    _, _, json_path = _paths(path)
    try:
        meta = json.loads(json_path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{json_path}: unreadable metadata ({exc})") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{json_path}: format version {version!r}, this build reads {FORMAT_VERSION}")
    return meta


def load_checkpoint(path):
    """Rebuild a :class:`~disentangan.trainer.TrainState` from disk."""
    from .config import TrainConfig
    from .data import BatchStream
    from .trainer import TrainState

    _, npz_path, _ = _paths(path)
    meta = read_metadata(path)
    if not npz_path.exists():
        raise FileNotFoundError(npz_path)
    config = TrainConfig.from_flat(meta["config"])
    state = TrainState.create(config)
    try:
        with np.load(npz_path, allow_pickle=False) as arrays:
            missing = set(meta["arrays"]) - set(arrays.files)
            if missing:
                raise CheckpointError(f"{npz_path}: missing arrays {sorted(missing)[:5]}")
            for prefix, module in (("generator", state.generator), ("critic", state.critic)):
                sd = {name[len(prefix) + 1:]: torch.from_numpy(arrays[name])
                      for name in arrays.files if name.startswith(prefix + "/")}
                module.load_state_dict(sd, strict=True)
            groups = meta["optimizer_param_groups"]
            state.opt_d.load_state_dict(_optimizer_state("opt_d", arrays, groups["opt_d"]))
            state.opt_g.load_state_dict(_optimizer_state("opt_g", arrays, groups["opt_g"]))
            rng_state = arrays["rng/torch"]
    except (zipfile.BadZipFile, ValueError, KeyError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise CheckpointError(f"{npz_path}: corrupt checkpoint ({exc})") from exc
    if _rng_digest(rng_state, meta["stream_state"]) != meta["rng_digest"]:
        raise CheckpointError(f"{npz_path}: rng state does not match its recorded digest")
    state.rng.set_state(torch.from_numpy(rng_state))
    state.iteration = int(meta["iteration"])
    state.running = dict(meta.get("running", {}))
    if meta["stream_state"] is not None:
        ss = meta["stream_state"]
        state.stream = BatchStream(ss["n"], ss["batch_size"], np.random.default_rng(), ss["shuffle"])
        state.stream.load_state_dict(ss)
    return state


def load_models(path):
    """``(generator, critic, config)`` in eval mode, without optimizer state."""
    state = load_checkpoint(path)
    state.generator.eval()
    state.critic.eval()
    return state.generator, state.critic, state.config
