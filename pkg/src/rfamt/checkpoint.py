"""Versioned checkpoint container: config (with all seeds) + parameters.

Arrays round-trip bit-exactly through npz; feature maps are not stored
because they are fully determined by the seeds inside the config.
"""

import json

import numpy as np

from rfamt.model import ModelConfig, Parameters

FORMAT_VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]


def save_checkpoint(path, config: ModelConfig, params: Parameters, extra=None):
    meta = {"version": FORMAT_VERSION, "config": config.to_dict(), "extra": extra or {}}
    payload = {f"param::{name}": arr for name, arr in params.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode())
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        config = ModelConfig.from_dict(meta["config"])
        params = Parameters()
        for key in data.files:
            if key.startswith("param::"):
                params[key[len("param::"):]] = np.ascontiguousarray(data[key])
    return config, params, meta.get("extra", {})
