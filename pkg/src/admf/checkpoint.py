"""Versioned model checkpoints as ``.npz`` archives.

Each archive holds a ``__meta__`` JSON record (format version, variant, model
geometry and configs, asset ordering) plus one ``param/<name>`` array per
state-dict entry. Models without a transform stage carry no transform entries.
"""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile

import numpy as np
import torch

from admf.forecaster import ForecasterConfig
from admf.models import FlatLSTM, assemble_variant
from admf.transform import TransformConfig

FORMAT = "admf-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, variant, extra=None):
    """Write ``model`` atomically to ``path``; returns the metadata dict."""
    meta = {"format": FORMAT, "version": VERSION, "variant": variant, "extra": extra or {}}
    if isinstance(model, FlatLSTM):
        meta["n"] = model.n
        meta["hidden"] = model.lstm.hidden_size
        meta["layers"] = model.lstm.num_layers
    else:
        meta["n"], meta["k"] = model.n, model.k
        meta["transform"] = dataclasses.asdict(model.transform_cfg)
        meta["forecaster"] = dataclasses.asdict(model.forecaster_cfg)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return meta


def read_meta(path):
    with np.load(path) as z:
        if "__meta__" not in z:
            raise CheckpointError(f"{path}: missing metadata record")
        meta = json.loads(z["__meta__"].tobytes().decode())
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an admf checkpoint")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path):
    """Rebuild the model recorded in ``path``; returns ``(model, meta)``."""
    meta = read_meta(path)
    if meta["variant"] == "LSTM":
        model = FlatLSTM(meta["n"], meta["hidden"], meta["layers"])
    else:
        tcfg = TransformConfig(**meta["transform"])
        fcfg = ForecasterConfig(**meta["forecaster"])
        model = assemble_variant(meta["variant"], meta["n"], meta["k"], tcfg, fcfg)
    with np.load(path) as z:
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files
                 if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the recorded model: {exc}") from None
    model.eval()
    return model, meta
