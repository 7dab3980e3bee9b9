"""Single-file binary container: JSON header + raw float64 blocks.

Byte layout (all integers little-endian):

    offset 0   : 8-byte magic ``b"DIFFEM01"``
    offset 8   : uint32 header length H
    offset 12  : H bytes of UTF-8 JSON (the header dict)
    offset 12+H: concatenated raw little-endian float64 blocks, in the
                 order listed under header["blocks"]

The header always carries ``kind`` (e.g. "dataset", "checkpoint",
"samples"), ``version``, and ``blocks``: a list of ``{"name", "shape"}``
entries describing each float block. Datasets, model checkpoints, and
sample files all use this layout and differ only in header fields.
"""

import json

import numpy as np

from .errors import ConfigError

__all__ = ["write_container", "read_container"]

MAGIC = b"DIFFEM01"


def write_container(path, kind, header, blocks):
    """Write named float64 arrays with a JSON header.

    Args:
        path: output file path.
        kind: format discriminator stored in the header.
        header: dict of JSON-serializable metadata (copied, not mutated).
        blocks: list of (name, array) pairs, written in order.
    """
    meta = dict(header)
    meta["kind"] = kind
    meta.setdefault("version", 1)
    meta["blocks"] = [
        {"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in blocks
    ]
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(raw)).tobytes())
        f.write(raw)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path, kind=None):
    """Read a container; returns (header, {name: array}).

    Raises ConfigError on a bad magic, truncated file, or kind mismatch.
    """
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a container file (magic {magic!r})")
        hlen = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        try:
            meta = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: corrupt header: {exc}") from exc
        if kind is not None and meta.get("kind") != kind:
            raise ConfigError(
                f"{path}: expected kind {kind!r}, found {meta.get('kind')!r}")
        arrays = {}
        for spec in meta["blocks"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ConfigError(f"{path}: truncated block {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return meta, arrays
