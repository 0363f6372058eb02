"""Self-describing checkpoint archives.

A checkpoint is a zip file holding ``meta.json`` (architecture echo, seed,
epoch, validation-AUC history) and one ``.npy`` blob per state-dict entry.
Entries carry a fixed timestamp so identical models give identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .zoo import ArchitectureSpec, ModelHandle, build_model

FORMAT = "histoeval-checkpoint/1"
_EPOCH_ZERO = (1980, 1, 1, 0, 0, 0)


def _write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH_ZERO)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, model: ModelHandle, epoch: int | None = None,
                    val_auc_history: list[float] | None = None, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.module.state_dict()
    meta = {
        "format": FORMAT,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "val_auc_history": list(val_auc_history or []),
        "tensors": list(state),
        **(extra or {}),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for i, (name, tensor) in enumerate(state.items()):
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            _write(zf, f"params/{i:05d}.npy", buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[ModelHandle, dict[str, Any]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} archive")
        spec = ArchitectureSpec.from_dict(meta["spec"])
        model = build_model(spec, meta["seed"])
        state = {name: torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{i:05d}.npy"))))
                 for i, name in enumerate(meta["tensors"])}
    model.module.load_state_dict(state)
    model.meta = meta
    return model, meta
