"""JSON checkpoints: config, tensors with shapes, and a format version."""

from __future__ import annotations

import json

import numpy as np

from .model import AttentionWeights, PredictorConfig

FORMAT = "qcdrive-meatp"
VERSION = 1


def save(path, weights: AttentionWeights, cfg: PredictorConfig, extra: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": cfg.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(weights.params.items())},
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load(path):
    """Returns (weights, config, extra)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = PredictorConfig.from_dict(doc["config"])
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    return AttentionWeights(params).check(cfg), cfg, doc.get("extra", {})
