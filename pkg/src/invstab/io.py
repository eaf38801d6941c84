"""Raw binary array container, CSV export and JSON helpers.

Container layout (little endian)::

    bytes 0-3    magic b"INVR"
    bytes 4-7    u32 rank (1 or 2)
    bytes 8-15   u32 dims[2]   (dims[1] == 1 for rank 1)
    bytes 16-    float64 payload, C order
"""

import json
import math
import struct
from pathlib import Path

import numpy as np

from invstab.errors import FormatError, ParameterError

MAGIC = b"INVR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_array(path, array):
    array = np.asarray(array, dtype="<f8")
    if array.ndim not in (1, 2):
        raise ParameterError(f"container holds rank 1 or 2 arrays, got rank {array.ndim}")
    rows = array.shape[0]
    cols = array.shape[1] if array.ndim == 2 else 1
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, array.ndim, rows, cols))
        fh.write(np.ascontiguousarray(array).tobytes())
    return path


def read_array(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, rank, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if rank not in (1, 2):
        raise FormatError(f"{path}: unsupported rank {rank}")
    count = rows * cols
    payload = data[_HEADER.size:]
    if len(payload) != 8 * count:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * count}")
    array = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return array.reshape(rows, cols) if rank == 2 else array


def format_float(x):
    """Shortest round-tripping decimal representation."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_vectors_csv(path, vectors):
    """One vector per row, comma separated, full precision."""
    with open(path, "w", newline="") as fh:
        for vec in vectors:
            fh.write(",".join(format_float(v) for v in np.ravel(vec)))
            fh.write("\n")
    return Path(path)


def read_vectors_csv(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    return [np.array(r) for r in rows]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else format_float(x)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(path, payload):
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")
    return Path(path)


def load_json(path):
    return json.loads(Path(path).read_text())
