"""
Versioned binary checkpoints.

Layout (little-endian):
    4 bytes   magic ``CXRK``
    uint32    format version
    uint64    length of the JSON header in bytes
    JSON      {"spec": NetworkSpec, "params": [{"name", "shape"}, ...], "frozen": [...]}
    float64   parameter data, in header order
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from .errors import CheckpointError, FormatVersionMismatchError
from .network import NetworkSpec, ResidualCNN

logger = logging.getLogger(__name__)

MAGIC = b"CXRK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _header(net: ResidualCNN) -> Dict[str, Any]:
    return {
        "spec": net.spec.to_dict(),
        "params": [{"name": name, "shape": list(t.shape)} for name, t in net.parameters().items()],
        "frozen": net.frozen_layers,
    }


def save_checkpoint(net: ResidualCNN, path: Union[str, Path]) -> Path:
    """Write atomically: a temp file in the target directory is renamed into place"""
    path = Path(path)
    header = json.dumps(_header(net), sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
                f.write(header)
                for tensor in net.parameters().values():
                    f.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"saved checkpoint {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> ResidualCNN:
    """
    Rebuild a network from a checkpoint with bit-identical parameters.

    Raises:
        FormatVersionMismatchError: the file was written by another format version
        CheckpointError: unreadable, truncated or malformed file
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path} is truncated ({len(blob)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a cxrkit checkpoint")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatchError(f"{path} has format version {version}, expected {FORMAT_VERSION}")

    start = _PREFIX.size
    if len(blob) < start + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        layout = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path} has a malformed header: {e}") from e

    payload = blob[start + header_len:]
    expected = 8 * sum(int(np.prod(shape)) for _, shape in layout)
    if len(payload) != expected:
        raise CheckpointError(f"{path} holds {len(payload)} parameter bytes, expected {expected}")

    net = ResidualCNN(spec)
    params = net.parameters()
    if [(n, tuple(t.shape)) for n, t in params.items()] != layout:
        raise CheckpointError(f"{path} parameter layout does not match its architecture")

    state, offset = {}, 0
    for name, shape in layout:
        count = int(np.prod(shape))
        state[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    net.load_state_dict(state)
    if header.get("frozen"):
        net.freeze(header["frozen"])
    return net
