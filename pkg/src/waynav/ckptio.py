"""Shared on-disk container: text header + raw little-endian float32 arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "waynav-checkpoint v1"
_END = "end-header"


class CheckpointError(Exception):
    pass


def save_arrays(path, meta: dict[str, str], arrays: dict[str, np.ndarray]) -> Path:
    """Write metadata and named arrays; array order is preserved."""
    path = Path(path)
    lines = [MAGIC]
    for key, value in meta.items():
        if "\n" in str(value):
            raise CheckpointError(f"metadata value for {key!r} contains a newline")
        lines.append(f"{key} = {value}")
    for name, arr in arrays.items():
        shape = "x".join(str(d) for d in np.asarray(arr).shape) or "scalar"
        lines.append(f"array {name} {shape}")
    lines.append(_END)
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_arrays(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read a container written by save_arrays; arrays come back as float32."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        header_end = blob.index((_END + "\n").encode("ascii"))
    except ValueError:
        raise CheckpointError(f"{path}: missing header terminator")
    header = blob[:header_end].decode("ascii").splitlines()
    body = blob[header_end + len(_END) + 1 :]
    if not header or header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic line")
    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:]:
        if line.startswith("array "):
            _, name, shape_s = line.split(" ", 2)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            specs.append((name, shape))
        else:
            key, _, value = line.partition(" = ")
            meta[key] = value
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated array data for {name!r}")
        arrays[name] = np.frombuffer(body[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after arrays")
    return meta, arrays
