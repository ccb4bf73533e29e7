"""Checkpoint container: ``.npz`` holding the config JSON and little-endian float64 arrays."""
from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np

from ..io import write_atomic
from .model import PolicyConfig, PolicyModel

FORMAT = "csgparse-policy-v1"


class VocabularyMismatch(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, model: PolicyModel) -> None:
    path = Path(path)
    arrays = {f"param/{k}": np.ascontiguousarray(v, dtype="<f8") for k, v in model.params.items()}
    for i, s in model.bn_stats.items():
        arrays[f"bn/{i}/mean"] = np.asarray(s["mean"], dtype="<f8")
        arrays[f"bn/{i}/var"] = np.asarray(s["var"], dtype="<f8")
    arrays["format"] = np.array(FORMAT)
    arrays["config"] = np.array(model.cfg.to_json())
    arrays["vocab_hash"] = np.array(model.cfg.vocab_hash)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    write_atomic(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike, vocab_hash: str | None = None) -> PolicyModel:
    """Load a model, refusing it when ``vocab_hash`` differs from the stored one."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != FORMAT:
            raise ValueError(f"{path}: not a policy checkpoint")
        cfg = PolicyConfig.from_json(str(z["config"]))
        stored = str(z["vocab_hash"])
        if vocab_hash is not None and stored != vocab_hash:
            raise VocabularyMismatch(f"{path}: vocabulary hash {stored[:12]} != expected {vocab_hash[:12]}")
        params = {k[len("param/"):]: z[k].astype(np.float64) for k in z.files if k.startswith("param/")}
        bn = {}
        for i in range(len(cfg.conv_widths)):
            bn[i] = {"mean": z[f"bn/{i}/mean"].astype(np.float64), "var": z[f"bn/{i}/var"].astype(np.float64)}
    return PolicyModel(cfg, params, bn)
