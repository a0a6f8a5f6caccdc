"""Binary model checkpoints.

Layout (little-endian): ``b"ACKP"``, u32 version, 64 ASCII bytes of the
architecture digest, u32 parameter count, then per parameter in declaration
order: u32 name length, name bytes, u32 ndim, ndim x u32 dims, float32 data.
"""

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelState

MAGIC = b"ACKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ModelState) -> None:
    out = [MAGIC, struct.pack("<I", VERSION), model.config.digest().encode("ascii")]
    out.append(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, config: ModelConfig) -> ModelState:
    """Load parameters into a fresh ``ModelState`` built from ``config``.

    Raises ``CheckpointError`` if the stored architecture digest differs.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = buf[8:72].decode("ascii")
    if digest != config.digest():
        raise CheckpointError("architecture digest mismatch")
    (count,) = struct.unpack_from("<I", buf, 72)
    off = 76
    state = ModelState.create(config, seed=0)
    if count != len(state.params):
        raise CheckpointError("parameter count mismatch")
    for name in state.params:
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        stored = buf[off:off + ln].decode("utf-8")
        off += ln
        if stored != name:
            raise CheckpointError(f"expected parameter {name!r}, found {stored!r}")
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if arr.shape != state.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        state.params[name] = arr.astype(np.float64)
    return state
