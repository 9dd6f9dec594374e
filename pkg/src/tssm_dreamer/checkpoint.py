"""Versioned binary checkpoints.

Layout (all integers little-endian u32)::

    b"TDV3" | version | config_len | config text (utf-8, key=value lines)
    | n_records | records...

Each record is ``name_len | name | ndim | dims... | float32 data``.
"""

import struct

import numpy as np

from .diff import DimensionError, ParameterStore

MAGIC = b"TDV3"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def checkpoint_save(params, path, config_text=""):
    cfg = config_text.encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(cfg)))
            fh.write(cfg)
            fh.write(struct.pack("<I", len(params.entries)))
            for name, t in params.entries.items():
                raw = name.encode("utf-8")
                # asarray, not ascontiguousarray: the latter turns 0-d tensors into 1-d
                data = np.asarray(t.data, dtype="<f4")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", data.ndim))
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
                fh.write(data.tobytes(order="C"))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def read(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.read(4 * count))
        return vals if count > 1 else vals[0]


def read_checkpoint(path):
    """Returns (config_text, {name: float32 array})."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.read(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a TDV3 checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = r.read(r.u32()).decode("utf-8")
    arrays = {}
    for _ in range(r.u32()):
        name = r.read(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(np.atleast_1d(r.u32(ndim))) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return cfg, arrays


def checkpoint_load(path, into=None):
    """Load parameters; with ``into`` given, names and shapes must match it."""
    _, arrays = read_checkpoint(path)
    if into is None:
        store = ParameterStore()
        for name, a in arrays.items():
            store.add(name, a)
        return store
    for name, t in into.entries.items():
        if name not in arrays:
            raise DimensionError(f"checkpoint {path} has no tensor {name!r}")
        if arrays[name].shape != t.shape:
            raise DimensionError(
                f"tensor {name!r}: checkpoint shape {arrays[name].shape}, expected {t.shape}"
            )
    extra = sorted(set(arrays) - set(into.entries))
    if extra:
        raise DimensionError(f"checkpoint {path} has unexpected tensor {extra[0]!r}")
    for name, t in into.entries.items():
        t.data = arrays[name].astype(t.dtype)
    return into
