"""Checkpoint manifests: JSON with base64 little-endian f32 tensors.

Loading is strict by tensor name: a manifest tensor that the model does not
know, or whose shape disagrees, is a :class:`CheckpointMismatch`. Model
parameters absent from the manifest stay at their initialization (this is how
a fine-tune run adds a fresh task head on top of pretrained weights).
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .errors import CheckpointMismatch, ParseError
from .network import Model, ModelHyper
from .ontology import Vocabulary

FORMAT_VERSION = "trajehr-checkpoint-1"
# hyper fields that must agree when initializing from a checkpoint
ARCH_FIELDS = ("hidden_dim", "n_layers", "n_gat_blocks", "n_heads", "max_visits", "max_seq_len", "k")


def manifest_from_model(model: Model) -> dict:
    tensors = []
    for name, tensor in model.params.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        tensors.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "dtype": "f32",
            "data": base64.b64encode(data.tobytes()).decode("ascii"),
        })
    return {"version": FORMAT_VERSION, "hyper": model.hyper.to_dict(), "tensors": tensors}


def save_checkpoint(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_from_model(model), fh, separators=(",", ":"))
        fh.write("\n")


def load_manifest(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid checkpoint JSON: {exc.msg}") from exc
    for key in ("version", "hyper", "tensors"):
        if key not in manifest:
            raise CheckpointMismatch(f"{path}: manifest missing {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {manifest['version']!r}")
    return manifest


def _decode_tensor(entry: dict) -> np.ndarray:
    if entry.get("dtype") != "f32":
        raise CheckpointMismatch(f"tensor {entry.get('name')!r}: unsupported dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    array = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    shape = tuple(entry["shape"])
    if array.size != int(np.prod(shape)) if shape else array.size != 1:
        raise CheckpointMismatch(f"tensor {entry['name']!r}: payload does not match shape {shape}")
    return array.reshape(shape)


def load_into_model(model: Model, manifest: dict, check_arch: bool = True) -> None:
    """Overwrite matching parameters in place; reject unknown names/shapes."""
    if check_arch:
        hyper = manifest["hyper"]
        for field in ARCH_FIELDS:
            if hyper.get(field) != getattr(model.hyper, field):
                raise CheckpointMismatch(
                    f"architecture mismatch on {field}: checkpoint {hyper.get(field)} vs model "
                    f"{getattr(model.hyper, field)}"
                )
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in model.params:
            raise CheckpointMismatch(f"checkpoint tensor {name!r} unknown to this model")
        data = _decode_tensor(entry)
        if data.shape != model.params[name].data.shape:
            raise CheckpointMismatch(
                f"tensor {name!r}: checkpoint shape {data.shape} vs model {model.params[name].data.shape}"
            )
        model.params[name].data = data


def model_from_manifest(manifest: dict, vocab: Vocabulary) -> Model:
    """Rebuild the full model a manifest describes (every tensor must be present)."""
    hyper = ModelHyper(**manifest["hyper"])
    model = Model(vocab, hyper, seed=0)
    saved = {entry["name"] for entry in manifest["tensors"]}
    missing = set(model.params) - saved
    if missing:
        raise CheckpointMismatch(f"checkpoint missing tensors: {sorted(missing)[:4]}")
    load_into_model(model, manifest, check_arch=False)
    return model
