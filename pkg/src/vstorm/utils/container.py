"""
Binary Container

Versioned on-disk format shared by checkpoints and datasets:

    magic (8 bytes) | version (u32) | header length (u64) | JSON header
    | array blocks (little-endian) | SHA-256 of everything before it

The JSON header carries the container kind, the caller's metadata and a table
of array blocks. Output bytes depend only on the inputs.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"VSTORM\x00\x01"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")
_DIGEST_SIZE = 32
_DTYPES = {"<f8": np.float64, "<i8": np.int64}


class ContainerError(ValueError):
    """Malformed, corrupted or mismatched container file."""


def write_container(path, kind, header, arrays):
    """
    Write a container file.

    Args:
        path: Destination path.
        kind: Container kind tag, e.g. "checkpoint" or "ktdataset".
        header: JSON-serializable metadata.
        arrays: Mapping of name to numpy array (float or integer).
    """
    table = []
    blocks = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        dtype = "<i8" if np.issubdtype(array.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset})
        blocks.append(data)
        offset += len(data)

    meta = json.dumps(
        {"kind": kind, "header": header, "arrays": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(meta)) + meta + b"".join(blocks)
    digest = hashlib.sha256(body).digest()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + digest)
    logger.info(f"Wrote {kind} container ({len(body) + _DIGEST_SIZE} bytes) to {path}")


def read_container(path, kind=None):
    """
    Read and verify a container file.

    Args:
        path: Container path.
        kind: Expected kind tag, or None to accept any.

    Returns:
        Tuple of (kind, header, arrays) with arrays as a dict of numpy arrays.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + _PREFIX.size + _DIGEST_SIZE or not raw.startswith(MAGIC):
        raise ContainerError(f"{path}: not a vstorm container")

    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch")

    version, meta_len = _PREFIX.unpack_from(body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")

    meta_start = len(MAGIC) + _PREFIX.size
    meta = json.loads(body[meta_start : meta_start + meta_len].decode("utf-8"))
    if kind is not None and meta["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind} container, found {meta['kind']}")

    payload = body[meta_start + meta_len :]
    arrays = {}
    for entry in meta["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise ContainerError(f"{path}: array {entry['name']} truncated at byte {end}")
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
            .reshape(entry["shape"])
            .copy()
        )
    return meta["kind"], meta["header"], arrays
