"""Binary checkpoint format.

Layout (all integers little-endian u32):

    magic "PIMK" | version | desc_len, desc bytes | tensor_count |
    per tensor: name_len, name, rank, extents..., float32 payload

The descriptor is the architecture description string, so a checkpoint is
self-describing for the pyramid/depth/component ablations.
"""

import struct

import numpy as np

from pim.encoders import Architecture, init_parameters

MAGIC = b"PIMK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params):
    desc = params.arch.describe().encode("utf-8")
    entries = list(params.named_tensors())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n, path, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Load a checkpoint into freshly allocated ModelParameters."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (dlen,) = struct.unpack("<I", _read_exact(f, 4, path, "descriptor length"))
        desc = _read_exact(f, dlen, path, "descriptor").decode("utf-8")
        try:
            arch = Architecture.from_description(desc)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed architecture descriptor: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "tensor count"))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, path, "name length"))
            name = _read_exact(f, nlen, path, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, path, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, path, "extents"))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
            payload = _read_exact(f, nbytes, path, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    params = init_parameters(0, arch)
    expected = dict(params.named_tensors())
    missing = set(expected) - set(tensors)
    extra = set(tensors) - set(expected)
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, tensor in expected.items():
        if tensors[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {tensors[name].shape}, expected {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(tensors[name])
    return params
