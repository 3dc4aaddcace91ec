"""Checkpoint container: a directory holding ``manifest.json`` and one raw
array file per leaf.

Byte layout of every array file: little-endian IEEE-754 float64, C order,
no header; its length is exactly ``8 * prod(shape)`` bytes. The manifest
records, per leaf, the name, shape and file; plus the dtype tag, the format
version and the hash of the experiment config that produced it. Manifests
are written with sorted keys so saving the same content twice gives the
same bytes.

The same container stores exported datasets (integer tokens are exact in
float64 up to 2**53).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..model import ModelConfig, ModelParams, init_model

FORMAT = "rotrnn-arrays"
VERSION = 1
DTYPE = "<f8"
STATE_PREFIX = "state."


def _file_for(name: str) -> str:
    if not name or "/" in name or os.sep in name or name.startswith("."):
        raise CheckpointError(f"invalid leaf name {name!r}")
    return f"{name}.f64"


def save_arrays(path, arrays: dict, meta: dict | None = None, config_hash: str = "") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    leaves = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"leaf {name!r} holds non-finite values")
        fname = _file_for(name)
        (path / fname).write_bytes(np.ascontiguousarray(a).astype(DTYPE, copy=False).tobytes())
        leaves.append({"name": name, "shape": list(a.shape), "file": fname})
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": DTYPE,
        "config_hash": config_hash,
        "meta": meta or {},
        "leaves": leaves,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {path}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}/manifest.json is not valid JSON ({e})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('version')!r}, expected {VERSION}")
    if manifest.get("dtype") != DTYPE:
        raise CheckpointError(f"{path}: dtype {manifest.get('dtype')!r}, expected {DTYPE}")
    return manifest


def load_arrays(path):
    """Return ``(arrays, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for leaf in manifest["leaves"]:
        name, shape = leaf["name"], tuple(leaf["shape"])
        try:
            raw = (path / leaf["file"]).read_bytes()
        except FileNotFoundError:
            raise CheckpointError(f"leaf {name!r}: file {leaf['file']} is missing") from None
        want = 8 * int(np.prod(shape, dtype=np.int64))
        if len(raw) != want:
            raise CheckpointError(f"leaf {name!r}: expected {want} bytes for shape {shape}, found {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype=DTYPE).astype(np.float64).reshape(shape)
    return arrays, manifest


def save_checkpoint(path, model: ModelParams, config_hash: str = "", meta: dict | None = None) -> Path:
    arrays = dict(model.params)
    arrays.update({STATE_PREFIX + k: v for k, v in model.state.items()})
    full_meta = {"model_config": model.config.to_dict()}
    full_meta.update(meta or {})
    return save_arrays(path, arrays, full_meta, config_hash)


def load_checkpoint(path, expected_hash: str | None = None):
    """Return ``(ModelParams, manifest)``; shapes are checked against a
    freshly initialised model of the stored configuration."""
    arrays, manifest = load_arrays(path)
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise CheckpointError(f"{path}: config hash {manifest['config_hash'][:12]} does not match {expected_hash[:12]}")
    try:
        config = ModelConfig(**manifest["meta"]["model_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: manifest lacks a usable model config ({e})") from None
    ref = init_model(config, 0)
    params = {k: v for k, v in arrays.items() if not k.startswith(STATE_PREFIX)}
    state = {k[len(STATE_PREFIX) :]: v for k, v in arrays.items() if k.startswith(STATE_PREFIX)}
    for want, got, kind in ((ref.params, params, "parameter"), (ref.state, state, "state")):
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        if missing or extra:
            raise CheckpointError(f"{path}: {kind} leaves differ (missing {missing}, unexpected {extra})")
        for k in want:
            if want[k].shape != got[k].shape:
                raise CheckpointError(f"leaf {k!r}: shape {got[k].shape} does not match model {want[k].shape}")
    return ModelParams(config, {k: params[k] for k in ref.params}, {k: state[k] for k in ref.state}), manifest


def export_dataset(path, spec, split: str = "train", start: int = 0, count: int | None = None) -> Path:
    """Write a task split as ``inputs`` and (if any) ``labels`` arrays."""
    from ..tasks import generate

    batch, labels = generate(spec, split, start, count)
    arrays = {"inputs": batch.data.astype(np.float64)}
    if labels is not None:
        arrays["labels"] = labels.astype(np.float64)
    meta = {"task": spec.to_dict(), "split": split, "start": start, "count": int(batch.batch)}
    return save_arrays(path, arrays, meta)
