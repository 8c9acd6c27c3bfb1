"""Binary weight file I/O.

Format (little-endian throughout), documented byte-exactly in
docs/weights_format.md:

    magic   4 bytes  b"VDCW"
    version u32      currently 1
    count   u32      number of records
    then per record:
        name_len u32
        name     name_len bytes, UTF-8
        prec     u8   4 = float32, 8 = float64
        rank     u32
        extents  rank x u32
        values   product(extents) x prec bytes, raw little-endian

Records cover trainable parameters and BN moving statistics, so a saved
then reloaded model reproduces bit-identical infer-mode outputs.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"VDCW"
VERSION = 1
_PREC = {4: "<f4", 8: "<f8"}


class WeightFormatError(IOError):
    """Raised on malformed or truncated weight files."""


def collect_arrays(graph):
    """Name -> ndarray map of everything a checkpoint must carry."""
    arrays = {name: t.data for name, t in graph.parameters().items()}
    for name, state in graph.bn_states().items():
        arrays[f"{name}.moving_mean"] = state.moving_mean
        arrays[f"{name}.moving_variance"] = state.moving_variance
    return arrays


def save_weights(path, arrays):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            prec = arr.dtype.itemsize
            if prec not in _PREC:
                raise WeightFormatError(f"unsupported precision for {name}: {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", prec, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_PREC[prec], copy=False).tobytes())


def load_weights(path):
    """Read a weight file back into a name -> ndarray map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic")
    (version, count), off = struct.unpack_from("<II", blob, 4), 12
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    arrays = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            prec, rank = struct.unpack_from("<BI", blob, off)
            off += 5
            extents = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(extents)) if rank else 1
            arr = np.frombuffer(blob, dtype=_PREC[prec], count=n, offset=off).reshape(extents)
            off += n * prec
            arrays[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise WeightFormatError(f"{path}: truncated or malformed ({exc})") from exc
    return arrays


def graph_state(graph):
    """Deep-copied checkpoint of a graph's weights and BN statistics."""
    return {name: arr.copy() for name, arr in collect_arrays(graph).items()}


def load_state(graph, arrays):
    """Write a checkpoint back into a graph, in place."""
    params = graph.parameters()
    states = graph.bn_states()
    for name, arr in arrays.items():
        if name in params:
            if params[name].data.shape != arr.shape:
                raise WeightFormatError(f"shape mismatch for {name}: {arr.shape} vs {params[name].data.shape}")
            params[name].data = arr.astype(params[name].data.dtype, copy=True)
        elif name.endswith(".moving_mean"):
            state = states[name[: -len(".moving_mean")]]
            state.moving_mean = arr.astype(state.moving_mean.dtype, copy=True)
            state.updated = True
        elif name.endswith(".moving_variance"):
            state = states[name[: -len(".moving_variance")]]
            state.moving_variance = arr.astype(state.moving_variance.dtype, copy=True)
        else:
            raise WeightFormatError(f"unknown record {name!r}")
