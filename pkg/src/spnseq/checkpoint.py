"""JSON checkpoints bundling a model with its input normalization."""

from __future__ import annotations

import json

import numpy as np

from . import chain, memm
from .errors import InputError

FORMAT = "spnseq-checkpoint"
VERSION = 1


def model_to_dict(model) -> dict:
    if isinstance(model, chain.ChainModel):
        return chain.model_to_dict(model)
    if isinstance(model, memm.MemmModel):
        return memm.model_to_dict(model)
    raise InputError(f"cannot serialize {type(model).__name__}")


def model_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "chain":
        return chain.model_from_dict(d)
    if kind == "memm":
        return memm.model_from_dict(d)
    raise InputError(f"unknown model kind {kind!r}")


def save(path, model, normalization=None, label_alphabet=None, meta=None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "model": model_to_dict(model),
        "normalization": None if normalization is None else {
            "mean": np.asarray(normalization[0]).tolist(),
            "std": np.asarray(normalization[1]).tolist(),
        },
        "label_alphabet": label_alphabet,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load(path):
    """Returns ``(model, normalization or None, label_alphabet, meta)``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != FORMAT:
        raise InputError(f"{path} is not a {FORMAT} file")
    norm = doc.get("normalization")
    if norm is not None:
        norm = (np.asarray(norm["mean"], dtype=float), np.asarray(norm["std"], dtype=float))
    return model_from_dict(doc["model"]), norm, doc.get("label_alphabet"), doc.get("meta", {})
