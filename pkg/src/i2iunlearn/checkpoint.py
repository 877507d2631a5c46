"""Binary checkpoint format.

Layout (little-endian)::

    b"I2IU" | version u32 | count u32
    count x { name_len u16 | name utf-8 | rank u8 | dims u32 * rank | float64 * prod(dims) }
    crc32 u32 over every byte between the header and the checksum

Training metadata travels as one extra zero-length record whose name is
``__meta__`` followed by canonical JSON.
"""
import json
import struct
import zlib

import numpy as np

from .models import Model, Probe
from .numerics import Tensor

MAGIC = b"I2IU"
VERSION = 1
META_PREFIX = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(arrays, path, meta=None):
    records = []
    items = list(arrays.items())
    if meta is not None:
        blob = META_PREFIX + json.dumps(meta, sort_keys=True, separators=(",", ":"))
        items.append((blob, np.zeros(0)))
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"record {name[:40]!r} too large")
        records.append(struct.pack("<H", len(raw_name)) + raw_name
                       + struct.pack("<B", arr.ndim)
                       + struct.pack(f"<{arr.ndim}I", *arr.shape)
                       + arr.tobytes())
    body = b"".join(records)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(items)))
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Returns ``(arrays, meta)``; arrays keep their saved order."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    body = raw[12:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    arrays, meta, pos = {}, None, 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(body):
                raise CheckpointError(f"{path}: record {name!r} overruns file")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
            if name.startswith(META_PREFIX):
                meta = json.loads(name[len(META_PREFIX):])
            else:
                arrays[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return arrays, meta or {}


def save_model(model, path):
    save_checkpoint(model.arrays(), path, model.meta)


def load_model(path):
    arrays, meta = load_checkpoint(path)
    enc = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("encoder.")}
    dec = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("decoder.")}
    if not enc or not dec:
        raise CheckpointError(f"{path}: not a model checkpoint")
    return Model(enc, dec, meta)


def save_probe(probe, path):
    meta = dict(probe.meta, trained=probe.trained, num_classes=probe.num_classes)
    save_checkpoint(probe.arrays(), path, meta)


def load_probe(path):
    arrays, meta = load_checkpoint(path)
    if not all(k.startswith("probe.") for k in arrays) or not arrays:
        raise CheckpointError(f"{path}: not a probe checkpoint")
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return Probe(params, int(meta["num_classes"]), bool(meta.get("trained")), meta)
