"""Self-describing model files.

Layout::

    NFLOC-MODEL\\n
    version 1\\n
    {json header}\\n
    payload: every array of ModelParams.named_arrays() in header order,
             little-endian float64, C order
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import FormatError
from .model import Architecture, ModelParams, init_model

MAGIC = b"NFLOC-MODEL\n"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def model_to_bytes(model: ModelParams) -> bytes:
    arrays = model.named_arrays()
    bns = model._batchnorms()
    header = {
        "architecture": model.arch.to_dict(),
        "batchnorm": {"epsilon": bns[0].epsilon, "momentum": bns[0].momentum} if bns else {},
        "label_low": None if model.label_low is None else [float(v) for v in model.label_low],
        "label_high": None if model.label_high is None else [float(v) for v in model.label_high],
        "tensors": [[name, list(a.shape)] for name, a in arrays.items()],
        "payload_bytes": sum(a.size for a in arrays.values()) * 8,
        "meta": model.meta,
    }
    parts = [MAGIC, f"version {VERSION}\n".encode(), json.dumps(header, sort_keys=True).encode() + b"\n"]
    parts += [np.ascontiguousarray(a, dtype=_LE_F64).tobytes() for a in arrays.values()]
    return b"".join(parts)


def model_from_bytes(data: bytes) -> ModelParams:
    if not data.startswith(MAGIC):
        raise FormatError("not a model file (bad magic)", 0)
    pos = len(MAGIC)
    end = data.find(b"\n", pos)
    if end < 0 or data[pos:end] != f"version {VERSION}".encode():
        raise FormatError(f"unsupported model version line {data[pos:end][:32]!r}", pos)
    pos = end + 1
    end = data.find(b"\n", pos)
    if end < 0:
        raise FormatError("model header is not terminated", pos)
    try:
        header = json.loads(data[pos:end])
        arch = Architecture.from_dict(header["architecture"])
        tensors = [(str(n), tuple(int(s) for s in shape)) for n, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed model header: {exc}", pos) from exc
    pos = end + 1
    model = init_model(arch, np.random.default_rng(0))
    arrays = model.named_arrays()
    if [(n, a.shape) for n, a in arrays.items()] != tensors:
        raise FormatError("tensor list does not match the declared architecture", pos)
    for name, target in arrays.items():
        nbytes = target.size * 8
        if pos + nbytes > len(data):
            raise FormatError(f"payload truncated inside tensor {name!r}", len(data))
        target[...] = np.frombuffer(data, dtype=_LE_F64, count=target.size, offset=pos).reshape(target.shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} unexpected trailing bytes after payload", pos)
    bn = header.get("batchnorm") or {}
    for b in model._batchnorms():
        b.epsilon = float(bn.get("epsilon", b.epsilon))
        b.momentum = float(bn.get("momentum", b.momentum))
    if header.get("label_low") is not None:
        model.label_low = np.array(header["label_low"], dtype=float)
        model.label_high = np.array(header["label_high"], dtype=float)
    model.meta = header.get("meta") or {}
    return model


def save_model(model: ModelParams, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
