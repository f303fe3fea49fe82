"""Flat binary container for named float64 tensors.

Layout (all integers little-endian uint32 unless noted):

    magic "BDLM" | version | config_len | config JSON (utf-8)
    n_tensors
    per tensor: name_len | name | ndim | dims... | float64 data (LE)

Tensors are written in declaration order (parameters, then buffers).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np
import torch

MAGIC = b"BDLM"
VERSION = 1


def save_container(path: str, config_meta: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    config_bytes = json.dumps(config_meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_container(path: str) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}; expected {MAGIC!r}")
        version, config_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported container version {version}")
        config_meta = json.loads(fh.read(config_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            tensors[name] = data.copy()
    return config_meta, tensors


def module_tensors(module: torch.nn.Module) -> "OrderedDict[str, np.ndarray]":
    """Parameters followed by buffers, in declaration order."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in module.named_parameters():
        out[name] = p.detach().numpy()
    for name, b in module.named_buffers():
        out[name] = b.detach().numpy()
    return out


def save_module(path: str, module: torch.nn.Module, config_meta: dict) -> None:
    save_container(path, config_meta, module_tensors(module))


def load_into_module(path: str, module: torch.nn.Module) -> dict:
    """Load a container into an already-constructed module; returns config."""
    config_meta, tensors = load_container(path)
    own = dict(module.named_parameters())
    own.update(dict(module.named_buffers()))
    if set(own) != set(tensors):
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        raise ValueError(f"tensor name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    with torch.no_grad():
        for name, arr in tensors.items():
            if tuple(own[name].shape) != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(own[name].shape)} vs {arr.shape}")
            own[name].copy_(torch.from_numpy(arr))
    return config_meta
