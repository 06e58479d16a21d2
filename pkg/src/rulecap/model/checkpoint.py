"""Versioned model checkpoints: an ``.npz`` of flat arrays plus a JSON manifest."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError
from ..text import Vocab
from .transformer import ModelConfig, RuleCapModel, Variant, set_variant

FORMAT = "rulecap-model"
VERSION = 1


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, model: RuleCapModel, vocab: Vocab | None = None, extra: dict | None = None) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "variant": model.variant.value,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "vocab": vocab.to_list() if vocab is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[RuleCapModel, Vocab | None, dict]:
    """Load a model; every array is checked against the manifest and the rebuilt model."""
    with np.load(path, allow_pickle=False) as data:
        if "manifest" not in data:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(bytes(data["manifest"]).decode("utf-8"))
        if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')} v{manifest.get('version')}")
        cfg = ModelConfig.from_dict(manifest["config"])
        model = RuleCapModel(cfg)
        if manifest.get("dtype") == "float64":
            model = model.double()
        expected = model.state_dict()
        shapes = manifest["shapes"]
        if set(shapes) != set(expected):
            raise CheckpointError(f"{path}: parameter names do not match the configured model")
        state = {}
        for name, ref in expected.items():
            key = f"param/{name}"
            if key not in data:
                raise CheckpointError(f"{path}: missing array {name}")
            arr = data[key]
            if list(arr.shape) != shapes[name] or tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(state)
    set_variant(model, Variant(manifest["variant"]))
    vocab = Vocab.from_list(manifest["vocab"]) if manifest.get("vocab") else None
    return model, vocab, manifest.get("extra", {})
