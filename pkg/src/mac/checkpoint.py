"""Self-describing tensor container: plain-text manifest + raw payload.

File layout:

    MACCKPT 1 <manifest_bytes>\n
    <manifest: utf-8 text>
    <payload: little-endian IEEE-754 tensor bytes at recorded offsets>

Manifest lines (order-preserving):

    meta <key> <value>
    config <verbatim config line>
    tensor <name> <f4|f8> <dim0,dim1,...> <offset> <nbytes>

Round trips are bit-identical; offsets, sizes and shape products are
validated on load.
"""

from __future__ import annotations

import numpy as np

MAGIC = "MACCKPT"
VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed, truncated, or version-incompatible container."""


def _dtype_tag(dtype: np.dtype) -> str:
    for tag, dt in _DTYPES.items():
        if np.dtype(dtype) == dt or np.dtype(dtype).newbyteorder("=") == dt.newbyteorder("="):
            return tag
    raise CheckpointError(f"unsupported tensor dtype {dtype}")


def save(
    path: str,
    tensors: dict[str, np.ndarray],
    config_text: str = "",
    meta: dict[str, str] | None = None,
) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _dtype_tag(arr.dtype)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        shape = ",".join(str(n) for n in arr.shape) if arr.ndim else "-"
        if " " in name or "\n" in name:
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        entries.append(f"tensor {name} {tag} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)

    lines = []
    for key, value in (meta or {}).items():
        if "\n" in str(value) or " " in str(key):
            raise CheckpointError(f"meta entry {key!r} malformed")
        lines.append(f"meta {key} {value}")
    for cfg_line in config_text.splitlines():
        lines.append(f"config {cfg_line}")
    lines.extend(entries)
    manifest = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION} {len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load(path: str) -> tuple[dict[str, np.ndarray], str, dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing header line")
    header = blob[:nl].decode("ascii", errors="replace").split()
    if len(header) != 3 or header[0] != MAGIC:
        raise CheckpointError(f"bad magic in header: {header!r}")
    if header[1] != str(VERSION):
        raise CheckpointError(f"unsupported format version {header[1]} (expected {VERSION})")
    try:
        man_len = int(header[2])
    except ValueError as exc:
        raise CheckpointError(f"bad manifest length {header[2]!r}") from exc

    man_start = nl + 1
    if len(blob) < man_start + man_len:
        raise CheckpointError("truncated manifest")
    manifest = blob[man_start : man_start + man_len].decode("utf-8")
    payload = blob[man_start + man_len :]

    tensors: dict[str, np.ndarray] = {}
    config_lines: list[str] = []
    meta: dict[str, str] = {}
    expected_end = 0
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "config":
            config_lines.append(rest)
        elif kind == "tensor":
            parts = rest.split()
            if len(parts) != 5:
                raise CheckpointError(f"manifest line {lineno}: malformed tensor entry")
            name, tag, shape_s, off_s, nbytes_s = parts
            if tag not in _DTYPES:
                raise CheckpointError(f"manifest line {lineno}: unknown dtype {tag}")
            shape = () if shape_s == "-" else tuple(int(n) for n in shape_s.split(","))
            off, nbytes = int(off_s), int(nbytes_s)
            dt = _DTYPES[tag]
            if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != nbytes:
                raise CheckpointError(
                    f"integrity error: {name} shape {shape} does not match {nbytes} bytes"
                )
            if off + nbytes > len(payload):
                raise CheckpointError(
                    f"integrity error: {name} extends past payload "
                    f"({off}+{nbytes} > {len(payload)})"
                )
            tensors[name] = np.frombuffer(payload[off : off + nbytes], dtype=dt).reshape(shape).copy()
            expected_end = max(expected_end, off + nbytes)
        else:
            raise CheckpointError(f"manifest line {lineno}: unknown entry kind {kind!r}")
    if expected_end != len(payload):
        raise CheckpointError(
            f"integrity error: payload has {len(payload)} bytes, manifest covers {expected_end}"
        )
    return tensors, "\n".join(config_lines), meta
