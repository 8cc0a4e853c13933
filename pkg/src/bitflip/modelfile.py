"""JSON model files: float hidden layers plus the quantized output layer."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bitrep import QuantLayer, int_range
from .netcore import ACTIVATIONS, DenseLayer, Network

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """The model document is malformed; the message names the field."""


def network_to_dict(net: Network) -> dict:
    K, C = net.output.shape
    return {
        "version": FORMAT_VERSION,
        "input_dim": net.input_dim,
        "class_count": K,
        "hidden": [
            {
                "rows": int(layer.weight.shape[0]),
                "cols": int(layer.weight.shape[1]),
                "activation": layer.activation,
                "weights": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in net.hidden
        ],
        "output": {
            "Q": net.Q,
            "delta": float(net.output.delta),
            "ints": net.output.ints.astype(int).tolist(),
            "bias": net.out_bias.tolist(),
        },
    }


def _field(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise ModelFormatError(f"{where}: expected an object")
    if key not in d:
        raise ModelFormatError(f"{where}.{key}: missing")
    return d[key]


def _int_field(d, key, where) -> int:
    v = _field(d, key, where)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ModelFormatError(f"{where}.{key}: expected an integer")
    return v


def _matrix(v, shape, where) -> np.ndarray:
    try:
        a = np.array(v, dtype=np.float64)
    except (TypeError, ValueError):
        raise ModelFormatError(f"{where}: not a numeric array") from None
    if a.shape != shape:
        raise ModelFormatError(f"{where}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelFormatError(f"{where}: non-finite value")
    return a


def network_from_dict(d: dict) -> Network:
    version = _int_field(d, "version", "model")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model.version: unsupported version {version}")
    input_dim = _int_field(d, "input_dim", "model")
    K = _int_field(d, "class_count", "model")
    hidden_docs = _field(d, "hidden", "model")
    if not isinstance(hidden_docs, list):
        raise ModelFormatError("model.hidden: expected a list")
    hidden = []
    prev = input_dim
    for i, h in enumerate(hidden_docs):
        where = f"model.hidden[{i}]"
        rows = _int_field(h, "rows", where)
        cols = _int_field(h, "cols", where)
        if cols != prev:
            raise ModelFormatError(f"{where}.cols: expected {prev}, got {cols}")
        act = _field(h, "activation", where)
        if act not in ACTIVATIONS:
            raise ModelFormatError(f"{where}.activation: unknown activation {act!r}")
        w = _matrix(_field(h, "weights", where), (rows, cols), f"{where}.weights")
        b = _matrix(_field(h, "bias", where), (rows,), f"{where}.bias")
        hidden.append(DenseLayer(w, b, act))
        prev = rows
    out = _field(d, "output", "model")
    Q = _int_field(out, "Q", "model.output")
    if Q < 2:
        raise ModelFormatError("model.output.Q: must be at least 2")
    delta = _field(out, "delta", "model.output")
    if isinstance(delta, bool) or not isinstance(delta, (int, float)) or not delta > 0 or not np.isfinite(delta):
        raise ModelFormatError("model.output.delta: expected a positive number")
    ints = _matrix(_field(out, "ints", "model.output"), (K, prev), "model.output.ints")
    if np.any(ints != np.round(ints)):
        raise ModelFormatError("model.output.ints: entries must be integers")
    lo, hi = int_range(Q)
    if ints.min(initial=0) < lo or ints.max(initial=0) > hi:
        raise ModelFormatError(f"model.output.ints: entries must lie in [{lo}, {hi}] for Q={Q}")
    bias = _matrix(out.get("bias", [0.0] * K), (K,), "model.output.bias")
    return Network(tuple(hidden), QuantLayer(ints.astype(np.int64), Q, float(delta)), bias)


def save_model(net: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")


def load_model(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return network_from_dict(doc)
