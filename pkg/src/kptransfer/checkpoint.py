"""Checkpoint files: model parameters plus the config that produced them.

Little-endian layout::

    b"KPCK"                      magic
    uint32 version               currently 1
    uint32 n                     length of the config block
    n bytes                      UTF-8 JSON (sorted keys) of the run config
    uint32 count                 number of arrays, in ModelParams field order
    per array:
        uint32 name_len, name bytes (ASCII)
        uint32 ndim, ndim * uint32 shape
        prod(shape) float64 values, row-major
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .nets import PARAM_NAMES, ModelParams

MAGIC = b"KPCK"
VERSION = 1


def checkpoint_bytes(params, config):
    meta = json.dumps(config, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
              struct.pack("<I", len(PARAM_NAMES))]
    for name, arr in params.arrays().items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(name)) + name.encode("ascii"))
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params, config):
    Path(path).write_bytes(checkpoint_bytes(params, config))


def load_checkpoint(path):
    """``(ModelParams, config dict)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        config = json.loads(data[pos: pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4: pos + 4 + ln].decode("ascii")
            pos += 4 + ln
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(float)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if set(arrays) != set(PARAM_NAMES):
        raise ParseError(f"{path}: expected arrays {PARAM_NAMES}, found {sorted(arrays)}")
    return ModelParams(**arrays), config
