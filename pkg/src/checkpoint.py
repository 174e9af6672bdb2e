"""
SFEL Checkpoint Container
=========================

Binary container shared by every artifact the laboratory writes: classifier,
SFE and detector checkpoints, example-pair files and feature exports.

File layout:
- Offset 0-3:   magic b"SFEL"
- Offset 4-7:   format version (uint32, little-endian)
- Offset 8-11:  header length L in bytes (uint32, little-endian)
- Offset 12..:  UTF-8 JSON header of length L:
                {"tensors": [{"name", "shape", "offset"}, ...], "meta": {...}}
- Offset 12+L:  payload; every tensor as raw little-endian float32, at its
                header offset relative to the payload start

Round trips are bit-exact for float32 data. Integer-valued arrays (labels,
flags) are stored as float32, which is exact below 2**24.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from errors import FormatError
from network import Network

logger = logging.getLogger(__name__)

MAGIC = b'SFEL'
FORMAT_VERSION = 1
PREAMBLE = struct.Struct('<4sII')
PAYLOAD_DTYPE = np.dtype('<f4')

PathLike = Union[str, Path]


def save_container(path: PathLike, tensors: Dict[str, np.ndarray], meta: dict = None) -> Path:
    """
    Write tensors and JSON-serialisable metadata to an SFEL file.

    Args:
        path: destination file (parent directories are created)
        tensors: name -> array; stored in insertion order
        meta: free-form metadata stored in the header

    Returns:
        The written path
    """
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype=PAYLOAD_DTYPE)
        entries.append({'name': name, 'shape': list(data.shape), 'offset': offset})
        raw = data.tobytes()
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps({'tensors': entries, 'meta': meta or {}}, sort_keys=True).encode('utf-8')
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)

    logger.debug(f"Saved SFEL container {path}: {len(entries)} tensors, {offset:,} payload bytes")
    return path


def load_container(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    """
    Read an SFEL file.

    Returns:
        (tensors, meta) with tensors as native float32 arrays

    Raises:
        FileNotFoundError: path does not exist
        FormatError: wrong magic, unsupported version, truncated header or
                     payload, undecodable header
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < PREAMBLE.size:
        raise FormatError(f"{path}: file too short for SFEL preamble ({len(blob)} bytes)")

    magic, version, header_len = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        logger.error(f"✗ Bad magic in {path}: {magic!r}")
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported SFEL version {version} (expected {FORMAT_VERSION})")

    start = PREAMBLE.size
    if start + header_len > len(blob):
        raise FormatError(f"{path}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(blob[start:start + header_len].decode('utf-8'))
        entries = header['tensors']
        meta = header.get('meta', {})
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e

    payload = memoryview(blob)[start + header_len:]
    tensors = {}
    expected_len = 0
    for entry in entries:
        shape = tuple(int(d) for d in entry['shape'])
        offset = int(entry['offset'])
        nbytes = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if offset < 0 or offset + nbytes > len(payload):
            raise FormatError(f"{path}: corrupt payload, tensor '{entry['name']}' "
                              f"[{offset}, {offset + nbytes}) exceeds {len(payload)} bytes")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=PAYLOAD_DTYPE).reshape(shape)
        tensors[entry['name']] = arr.astype(np.float32)
        expected_len = max(expected_len, offset + nbytes)
    if expected_len != len(payload):
        raise FormatError(f"{path}: corrupt payload, {len(payload)} bytes present, {expected_len} described")

    logger.debug(f"Loaded SFEL container {path}: {len(tensors)} tensors")
    return tensors, meta


def save_network(path: PathLike, networks: Dict[str, Network], meta: dict = None,
                 extra: Dict[str, np.ndarray] = None) -> Path:
    """
    Save one or more Networks into a single container.

    Tensors are stored as "<network key>/<param name>"; each network's
    architecture goes to meta["networks"][key]. `extra` tensors are stored
    under their own names and come back from load_networks as leftovers.
    """
    tensors = dict(extra or {})
    arch = {}
    for key, net in networks.items():
        arch[key] = net.config()
        for name, arr in net.state_dict().items():
            tensors[f"{key}/{name}"] = arr
    full_meta = dict(meta or {})
    full_meta['networks'] = arch
    return save_container(path, tensors, full_meta)


def load_networks(path: PathLike) -> Tuple[Dict[str, Network], Dict[str, np.ndarray], dict]:
    """
    Inverse of save_network.

    Returns:
        (networks by key, leftover tensors not owned by a network, meta)
    """
    tensors, meta = load_container(path)
    networks = {}
    for key, config in meta.get('networks', {}).items():
        net = Network.from_config(config)
        prefix = f"{key}/"
        state = {name[len(prefix):]: arr for name, arr in tensors.items() if name.startswith(prefix)}
        net.load_state_dict(state)
        networks[key] = net
    owned = {f"{key}/" for key in networks}
    extra = {name: arr for name, arr in tensors.items() if not any(name.startswith(p) for p in owned)}
    return networks, extra, meta
