"""Named-array weight checkpoints (``.npz``, float32 little-endian).

One entry per tensor, keyed by the module path (``stem.conv1x1.weight``,
``bottleneck.fmam.gate.bias``, ``dec2.sfrb_up.attn.weight`` ...).  BN running
statistics are stored alongside the weights so eval-mode outputs survive a
round trip.  The model config and free-form metadata ride along as JSON
strings under ``__config__`` and ``__meta__``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from .config import ModelConfig
from .model import LVSNet, build_model

CONFIG_KEY = "__config__"
META_KEY = "__meta__"


def state_arrays(model: LVSNet) -> Dict[str, np.ndarray]:
    out = {}
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        out[name] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def save_checkpoint(model: LVSNet, path, meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = state_arrays(model)
    arrays[CONFIG_KEY] = np.array(json.dumps(model.cfg.to_dict()))
    arrays[META_KEY] = np.array(json.dumps(meta or {}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Tuple[LVSNet, Dict[str, Any]]:
    """Rebuild the model from a checkpoint; returns ``(model, meta)`` in eval mode."""
    with np.load(path) as data:
        cfg = ModelConfig.from_dict(json.loads(str(data[CONFIG_KEY])))
        meta = json.loads(str(data[META_KEY]))
        arrays = {k: data[k] for k in data.files if k not in (CONFIG_KEY, META_KEY)}
    model = build_model(cfg)
    state = model.state_dict()
    missing = [k for k in state if not k.endswith("num_batches_tracked") and k not in arrays]
    unexpected = [k for k in arrays if k not in state]
    if missing or unexpected:
        raise KeyError(f"checkpoint {path} mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    with torch.no_grad():
        for k, arr in arrays.items():
            state[k].copy_(torch.from_numpy(np.asarray(arr, dtype=np.float32)))
    model.eval()
    return model, meta
