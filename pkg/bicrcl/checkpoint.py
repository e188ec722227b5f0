"""
Session checkpoints in the CRCLCK1 format

Layout: magic "CRCLCK1", header length ('<i8'), UTF-8 JSON header, then the
arrays listed in the header as raw little-endian float64 in header order.
"""

import json
from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import CheckpointError

CHECKPOINT_MAGIC = b"CRCLCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, header: Dict, arrays: Dict[str, np.ndarray]):
    """
    Write a checkpoint

    Args:
        path: Output file
        header: JSON-serializable metadata (session, rng state, beta, ...)
        arrays: Named float64 arrays
    """
    names = sorted(arrays)
    header = dict(header)
    header['version'] = CHECKPOINT_VERSION
    header['arrays'] = [{'name': name, 'shape': list(np.shape(arrays[name]))} for name in names]
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(np.array([len(encoded)], dtype="<i8").tobytes())
        handle.write(encoded)
        for name in names:
            handle.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def require_keys(header: Dict, keys: Sequence[str], path: str):
    """Raise CheckpointError naming every key the header lacks"""
    missing = [key for key in keys if key not in header]
    if missing:
        raise CheckpointError(f"checkpoint header lacks {', '.join(missing)}", path=path)


def load_checkpoint(path: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        (header, arrays)
    """
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except OSError as error:
        raise CheckpointError(f"cannot read checkpoint: {error}", path=path)

    if payload[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a CRCLCK1 checkpoint", path=path)
    offset = len(CHECKPOINT_MAGIC)
    if len(payload) < offset + 8:
        raise CheckpointError("truncated checkpoint header", path=path)
    length = int(np.frombuffer(payload, dtype="<i8", count=1, offset=offset)[0])
    offset += 8
    try:
        header = json.loads(payload[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"corrupt checkpoint header: {error}", path=path)
    if not isinstance(header, dict):
        raise CheckpointError("checkpoint header is not a JSON object", path=path)
    offset += length

    if header.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}",
                              path=path)

    require_keys(header, ("arrays",), path)
    arrays = {}
    for entry in header['arrays']:
        if not isinstance(entry, dict) or 'name' not in entry or 'shape' not in entry:
            raise CheckpointError(f"malformed array entry {entry!r}", path=path)
        shape = tuple(entry['shape'])
        count = int(np.prod(shape))
        if len(payload) < offset + 8 * count:
            raise CheckpointError(f"truncated array {entry['name']}", path=path)
        arrays[entry['name']] = np.frombuffer(payload, dtype="<f8", count=count,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError("trailing bytes after checkpoint arrays", path=path)
    return header, arrays
