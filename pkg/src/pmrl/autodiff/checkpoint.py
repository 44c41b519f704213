"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PMRL"                       magic
    u32                           format version
    repeated until EOF:
        u32   name length in bytes
        bytes UTF-8 name
        u32   rank
        u64 × rank   extents
        f64 × prod(extents)   row-major data

Adam moments are stored as extra records named ``<param>.m`` and
``<param>.v``; the optimizer step counter is a rank-0 record named
``__adam_step__``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..exceptions import ParseError
from .optim import ParamStore

MAGIC = b"PMRL"
VERSION = 1
STEP_RECORD = "__adam_step__"


def _pack(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.tobytes()


def write_records(path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks += [_pack(name, arr) for name, arr in records.items()]
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ParseError(path, 0, "missing PMRL magic bytes")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ParseError(path, 4, f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 8
    records: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise ParseError(path, pos, f"truncated {what}: need {n} bytes, have {len(buf) - pos}")

    while pos < len(buf):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len, "name")
        try:
            name = buf[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(path, pos, "name is not UTF-8") from exc
        pos += name_len
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count, f"data of {name!r}")
        data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        records[name] = data.reshape(shape)
    return records


def save_checkpoint(path, store: ParamStore, extra: dict[str, np.ndarray] | None = None) -> None:
    records: dict[str, np.ndarray] = {}
    for name, tensor in store.items():
        records[name] = tensor.data
        records[f"{name}.m"] = store.m[name]
        records[f"{name}.v"] = store.v[name]
    records[STEP_RECORD] = np.array(float(store.step))
    for name, value in (extra or {}).items():
        records[name] = np.asarray(value, dtype=np.float64)
    write_records(path, records)


def load_checkpoint(path, store: ParamStore) -> dict[str, np.ndarray]:
    """Fill ``store`` in place from ``path``; returns records that are not parameters."""
    records = read_records(path)
    missing = [name for name in store if name not in records]
    if missing:
        raise ParseError(path, 0, f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    store.set_arrays({name: records.pop(name) for name in list(store)})
    for name in list(store):
        store.m[name] = records.pop(f"{name}.m", np.zeros_like(store[name].data))
        store.v[name] = records.pop(f"{name}.v", np.zeros_like(store[name].data))
    store.step = int(np.asarray(records.pop(STEP_RECORD, 0.0)).reshape(-1)[0])
    return records
