"""Binary tensor files and directory-based checkpoints.

File layout: magic ``SGSW``, version u16, rank u16, each dimension as u32,
then the payload as little-endian float32, row major.  A checkpoint is a
directory of one tensor file per named array plus a ``manifest.txt`` of
``key = value`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"SGSW"
VERSION = 1


def write_tensor(path, array):
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HH", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: not a tensor file (bad magic {blob[:4]!r})")
    version, rank = struct.unpack_from("<HH", blob, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported tensor file version {version}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    start = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    avail = (len(blob) - start) // 4
    if avail < count:
        raise ContractError(f"{path}: truncated payload ({avail} of {count} values)")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
    return arr.reshape(dims).copy()


def write_manifest(path, entries):
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(dirpath, arrays, meta):
    """Write named arrays plus a manifest; overwrites existing files."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    for name in names:
        write_tensor(d / f"{name}.sgsw", arrays[name])
    manifest = dict(meta)
    manifest["arrays"] = " ".join(names)
    write_manifest(d / "manifest.txt", manifest)


def load_checkpoint(dirpath):
    d = Path(dirpath)
    manifest = read_manifest(d / "manifest.txt")
    names = manifest.get("arrays", "").split()
    arrays = {name: read_tensor(d / f"{name}.sgsw") for name in names}
    return arrays, manifest
