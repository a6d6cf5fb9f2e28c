"""Checkpoint archive.

A checkpoint is a zip file with two kinds of members:

``manifest.json``
    ``{"format": "enaet-ckpt-1", "step": int, "config_hash": str,
    "meta": {...}, "arrays": [{"name", "shape", "dtype", "file"}, ...]}``.
    ``dtype`` is a little-endian numpy code (``<f4``, ``<f8`` or ``<i8``).
``arrays/<index>.bin``
    Raw little-endian bytes of one array in C order.

Array names are ``net.<param>``, ``teacher.<param>`` (module state dicts,
buffers included) and ``opt_main.<i>.<key>`` / ``opt_dec.<i>.<key>`` for
optimizer slots.  Everything else (rng states, optimizer hyperparameters,
trainer bookkeeping) is JSON under ``meta``.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "enaet-ckpt-1"


class CheckpointError(RuntimeError):
    pass


def _to_le(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype.kind == "f":
        return a.astype(a.dtype.newbyteorder("<"), copy=False)
    return a.astype("<i8")


def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> dict:
    sd = opt.state_dict()
    scalars = {}
    for idx, slots in sd["state"].items():
        for key, val in slots.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}.{idx}.{key}"] = _to_le(val)
            else:
                scalars[f"{idx}.{key}"] = val
    return {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    for name, val in meta["scalars"].items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save(path: str | Path, state, config_hash: str, meta: dict | None = None) -> None:
    """Write ``state`` (a ``ModelState``) atomically to ``path``."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.net.state_dict().items():
        arrays[f"net.{name}"] = _to_le(t)
    for name, t in state.teacher.state_dict().items():
        arrays[f"teacher.{name}"] = _to_le(t)
    opt_meta = {
        "opt_main": _flatten_optimizer("opt_main", state.opt_main, arrays),
        "opt_dec": _flatten_optimizer("opt_dec", state.opt_dec, arrays),
    }
    rngs = {k: g.bit_generator.state for k, g in state.rngs.items()}
    manifest = {
        "format": FORMAT,
        "step": state.step,
        "config_hash": config_hash,
        "meta": {"optimizers": opt_meta, "rngs": rngs, **(meta or {})},
        "arrays": [],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for i, (name, arr) in enumerate(arrays.items()):
                member = f"arrays/{i:05d}.bin"
                manifest["arrays"].append(
                    {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "file": member}
                )
                zf.writestr(member, np.ascontiguousarray(arr).tobytes())
            zf.writestr("manifest.json", json.dumps(manifest, default=_json_default))
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
        arrays = {}
        for entry in manifest["arrays"]:
            buf = zf.read(entry["file"])
            arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
    return manifest, arrays


def load_into(path: str | Path, state, config_hash: str | None = None) -> dict:
    """Restore ``state`` in place from ``path``; returns the manifest ``meta``."""
    manifest, arrays = read(path)
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise CheckpointError("checkpoint was written under a different configuration")

    def module_sd(prefix: str):
        return {
            k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + ".")
        }

    state.net.load_state_dict(module_sd("net"))
    state.teacher.load_state_dict(module_sd("teacher"))
    meta = manifest["meta"]
    _restore_optimizer("opt_main", state.opt_main, arrays, meta["optimizers"]["opt_main"])
    _restore_optimizer("opt_dec", state.opt_dec, arrays, meta["optimizers"]["opt_dec"])
    for name, st in meta["rngs"].items():
        state.rngs[name] = np.random.Generator(np.random.PCG64())
        state.rngs[name].bit_generator.state = st
    state.step = int(manifest["step"])
    return meta
