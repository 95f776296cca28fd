"""Binary checkpoint format.

Layout::

    b"MILO1"
    u32 header length, header (UTF-8 JSON: config, tensor counts, extras)
    per tensor: u32 name length, name (UTF-8), u32 ndim, ndim x u64 dims,
                prod(dims) little-endian float64 values

Model tensors come first, followed by the optional optimizer section
(``header["optimizer"]["n_tensors"]`` more tensors in the same encoding).
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from .errors import InputError

MAGIC = b"MILO1"


def _write_tensor(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise InputError("truncated checkpoint")
    return buf


def _read_tensor(fh):
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = math.prod(shape)
    arr = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def save(path, config, tensors, optimizer=None, extra=None):
    """Write ``tensors`` (name -> array) and optionally an optimizer section.

    ``optimizer`` is ``(step, {name: array})``.
    """
    header = {"config": config, "n_tensors": len(tensors), "optimizer": None}
    if optimizer is not None:
        step, opt_tensors = optimizer
        header["optimizer"] = {"step": int(step), "n_tensors": len(opt_tensors)}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for name, arr in tensors.items():
            _write_tensor(fh, name, np.asarray(arr))
        if optimizer is not None:
            for name, arr in optimizer[1].items():
                _write_tensor(fh, name, np.asarray(arr))


def load(path):
    """Return ``(header, tensors, optimizer_tensors)``; the last is None if absent."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise InputError(f"{path}: not a MILO1 checkpoint")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        tensors = dict(_read_tensor(fh) for _ in range(header["n_tensors"]))
        opt = None
        if header.get("optimizer"):
            opt = dict(_read_tensor(fh) for _ in range(header["optimizer"]["n_tensors"]))
        if fh.read(1):
            raise InputError(f"{path}: trailing bytes after last tensor")
    return header, tensors, opt


def save_model(path, model, optimizer_state=None):
    tensors = {k: p.data for k, p in model.params.items()}
    opt = None
    if optimizer_state is not None:
        opt = (optimizer_state.step, optimizer_state.as_tensors())
    save(path, model.config.to_dict(), tensors, optimizer=opt)


def load_model(path):
    from . import numcore
    from .model import Model, ModelConfig

    header, tensors, opt = load(path)
    config = ModelConfig.from_dict(header["config"])
    params = {k: numcore.Tensor(v, requires_grad=True) for k, v in tensors.items()}
    return Model(config, params), header, opt
