"""Model checkpoint format.

Layout: the magic string "MILBAG1", a little-endian uint32 header length, a
UTF-8 JSON header listing hyperparameters and every parameter's name and
shape, then the raw little-endian float32 payloads in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MODEL_MAGIC = b"MILBAG1"
_HEADER_LEN_BYTES = 4


def save_params(path, hyperparameters: dict, named_params) -> None:
    named_params = [(name, np.asarray(arr)) for name, arr in named_params]
    header = {
        "schema_version": 1,
        "hyperparameters": hyperparameters,
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in named_params],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in named_params:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError(f"{path.name}: bad magic, not a model checkpoint", offset=0)
    pos = len(MODEL_MAGIC)
    if len(blob) < pos + _HEADER_LEN_BYTES:
        raise FormatError(f"{path.name}: truncated before header length", offset=pos)
    (header_len,) = struct.unpack_from("<I", blob, pos)
    pos += _HEADER_LEN_BYTES
    if len(blob) < pos + header_len:
        raise FormatError(f"{path.name}: truncated header", offset=pos)
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
        hyper = header["hyperparameters"]
        entries = header["params"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path.name}: malformed header ({e})", offset=pos) from e
    pos += header_len
    params: dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path.name}: malformed parameter entry ({e})",
                              offset=pos) from e
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if len(blob) - pos < nbytes:
            raise FormatError(f"{path.name}: truncated payload for {name}, "
                              f"expected {nbytes} bytes, got {len(blob) - pos}", offset=pos)
        params[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{path.name}: {len(blob) - pos} trailing bytes after payload",
                          offset=pos)
    return hyper, params
