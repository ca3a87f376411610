"""Checkpoint serialization.

Layout: a directory holding ``weights.bin`` (the concatenation of every
entry as little-endian float32, in manifest order) and ``weights.json``
(format version, the model config, the entry table of name/shape/byte
offset, optional optimizer scalars, and free-form training metadata).
Optimizer moments are stored as extra entries in the same blob. A
save -> load -> save round trip is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, parameter_shapes
from .optim import Adam

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, incompatible, or incomplete checkpoint."""


def save_checkpoint(path, model: Model, optimizer: Adam | None = None,
                    metadata: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()

    def push(name: str, arr: np.ndarray, kind: str):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "byte_offset": len(blob), "kind": kind})
        blob.extend(raw)

    for name, p in model.params.items():
        push(name, p.data, "param")
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {"t": state["t"], "lr": state["lr"], "beta1": state["beta1"],
                    "beta2": state["beta2"], "eps": state["eps"]}
        for name in model.params:
            push(name, state["m"][name], "adam_m")
        for name in model.params:
            push(name, state["v"][name], "adam_v")

    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "entries": entries,
        "optimizer": opt_meta,
        "metadata": metadata or {},
    }
    (path / "weights.bin").write_bytes(bytes(blob))
    with open(path / "weights.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None
                    ) -> tuple[Model, dict | None, dict]:
    """Rebuild (model, optimizer state or None, metadata) from disk."""
    path = Path(path)
    manifest_path = path / "weights.json"
    blob_path = path / "weights.bin"
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config in manifest: {exc}") from exc
    if expected_config is not None and config != expected_config:
        diffs = [
            f"{key}: checkpoint={got!r} expected={want!r}"
            for key, got, want in _config_diffs(config, expected_config)
        ]
        raise CheckpointError("config mismatch: " + "; ".join(diffs))

    blob = blob_path.read_bytes()
    plan = {name: shape for name, shape, _ in parameter_shapes(config)}
    model = Model(config, init_rng=None)
    by_kind: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest["entries"]:
        name, shape = entry["name"], tuple(entry["shape"])
        kind, offset = entry["kind"], entry["byte_offset"]
        if name not in plan:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        if shape != plan[name]:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {shape}, model {plan[name]}"
            )
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(
                f"weights.bin truncated: {name} needs bytes [{offset}, {end}), "
                f"blob has {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        by_kind[kind][name] = arr.reshape(shape).copy()
    for name, arr in by_kind["param"].items():
        model.params[name].data = arr
    missing = set(plan) - set(by_kind["param"])
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")

    opt_state = None
    if manifest.get("optimizer") is not None:
        opt_state = dict(manifest["optimizer"])
        opt_state["m"] = by_kind["adam_m"]
        opt_state["v"] = by_kind["adam_v"]
    return model, opt_state, manifest.get("metadata", {})


def _config_diffs(a: ModelConfig, b: ModelConfig):
    da, db = a.to_dict(), b.to_dict()
    for key in da:
        if da[key] != db[key]:
            yield key, da[key], db[key]
