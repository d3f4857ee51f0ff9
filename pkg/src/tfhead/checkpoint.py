"""Checkpoint directories: one TFT1 dump per named tensor plus manifest.json."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import load_tft1, save_tft1

FORMAT = "tfh-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _file_name(name: str) -> str:
    return name.replace("/", "_") + ".tft"


def save_checkpoint(path, model, state: dict | None = None, extra_tensors: dict | None = None) -> Path:
    """Write every parameter of ``model`` (float32) and a manifest; returns the manifest path.

    Parameters are expected to hold float32-representable values, so the
    round trip is bit-exact.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for group, items in (("params", model.state_dict()), ("extra", extra_tensors or {})):
        for name, arr in sorted(items.items()):
            arr = np.asarray(arr)
            if not np.array_equal(arr.astype(np.float32).astype(arr.dtype), arr):
                raise CheckpointError(f"{name} is not float32-representable")
            fname = _file_name(f"{group}.{name}")
            save_tft1(path / fname, arr)
            tensors.setdefault(group, {})[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": FORMAT, "version": VERSION, "config": model.to_config(),
                "state": state or {}, "tensors": tensors}
    out = path / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mf}")
    try:
        manifest = json.loads(mf.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest {mf}: {e}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{mf} is not a version-{VERSION} checkpoint")
    return manifest


def _load_group(path: Path, entries: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, meta in entries.items():
        arr = load_tft1(path / meta["file"]).astype(np.float64)
        if list(arr.shape) != meta["shape"]:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != manifest {meta['shape']}")
        out[name] = arr
    return out


def load_checkpoint(path):
    """Returns (model, state dict, extra tensors)."""
    from .model import Detector

    path = Path(path)
    manifest = read_manifest(path)
    model = Detector.from_config(manifest["config"])
    model.load_state_dict(_load_group(path, manifest["tensors"].get("params", {})))
    extra = _load_group(path, manifest["tensors"].get("extra", {}))
    return model, manifest["state"], extra
