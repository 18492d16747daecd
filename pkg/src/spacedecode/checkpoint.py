# coding: utf-8
"""
SPC1 checkpoint files.

Layout: the magic bytes ``SPC1``, a 4-byte little-endian header length, a UTF-8 JSON header
``{"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}`` and then the raw little-endian
float32 tensor data in manifest order (offsets are relative to the start of the data block).
"""

import os
import struct
from typing import Tuple

import numpy as np
import simplejson

from .config_handling import ModelConfig
from .core_math import ParamTensor
from .exceptions import SpaceCheckpointError, SpaceException
from .loggers import log_extra_information
from .model import ModelParams, expected_shapes

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "read_header"]

MAGIC = b"SPC1"
_LENGTH = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


def save_checkpoint(path: str, params: ModelParams) -> None:
    """
    Write `params` (and its config) to `path`, creating parent directories as needed.
    """
    manifest = []
    chunks = []
    offset = 0
    for p in params:
        data = np.ascontiguousarray(p.value, dtype=_FLOAT).tobytes()
        manifest.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = simplejson.dumps({"config": params.config.to_dict(), "tensors": manifest},
                              sort_keys=True).encode("utf-8")

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(_LENGTH.pack(len(header)))
        fp.write(header)
        for chunk in chunks:
            fp.write(chunk)
    log_extra_information(f"checkpoint written to '{path}' ({len(manifest)} tensors)")


def read_header(path: str) -> Tuple[dict, int]:
    """
    Read and validate the header of a checkpoint.

    :return: (header dict, byte offset of the data block)
    :raises SpaceCheckpointError: for a missing file, bad magic or malformed header
    """
    try:
        with open(path, "rb") as fp:
            magic = fp.read(4)
            if magic != MAGIC:
                raise SpaceCheckpointError(f"'{path}' is not an SPC1 checkpoint (magic {magic!r})")
            raw_len = fp.read(4)
            if len(raw_len) != 4:
                raise SpaceCheckpointError(f"'{path}' is truncated")
            (length,) = _LENGTH.unpack(raw_len)
            raw = fp.read(length)
    except OSError as err:
        raise SpaceCheckpointError(f"cannot read checkpoint '{path}': {err}")
    if len(raw) != length:
        raise SpaceCheckpointError(f"'{path}' has a truncated header")
    try:
        header = simplejson.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, simplejson.JSONDecodeError) as err:
        raise SpaceCheckpointError(f"'{path}' has a malformed header: {err}")
    if not isinstance(header, dict) or "config" not in header or "tensors" not in header:
        raise SpaceCheckpointError(f"'{path}' header lacks 'config' or 'tensors'")
    return header, 8 + length


def load_checkpoint(path: str) -> ModelParams:
    """
    Load a checkpoint written by `save_checkpoint`; values come back as float64.

    :raises SpaceCheckpointError: for any format problem
    """
    header, data_start = read_header(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (SpaceException, TypeError) as err:
        raise SpaceCheckpointError(f"'{path}' holds an invalid model config: {err}")

    with open(path, "rb") as fp:
        fp.seek(data_start)
        blob = fp.read()

    shapes = expected_shapes(config)
    tensors = {}
    for entry in header["tensors"]:
        name, shape, offset = entry.get("name"), tuple(entry.get("shape", ())), entry.get("offset", -1)
        if shapes.get(name) != shape:
            raise SpaceCheckpointError(f"'{path}': unexpected tensor '{name}' with shape {shape}")
        size = int(np.prod(shape)) * _FLOAT.itemsize
        if offset < 0 or offset + size > len(blob):
            raise SpaceCheckpointError(f"'{path}': tensor '{name}' lies outside the data block")
        values = np.frombuffer(blob, dtype=_FLOAT, count=size // _FLOAT.itemsize, offset=offset)
        tensors[name] = ParamTensor(name, values.astype(np.float64).reshape(shape))
    if set(tensors) != set(shapes):
        raise SpaceCheckpointError(f"'{path}' is missing tensors: {sorted(set(shapes) - set(tensors))}")
    return ModelParams(config, tensors)
