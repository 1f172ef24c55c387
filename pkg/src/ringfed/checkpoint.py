"""Binary checkpoint format for models shipped between centers.

Layout (all integers little-endian)::

    b"RFCL"  format version u16  layer count u16  input channels u16
    per layer: kind u8, pathway u8, dim count u8, dims u32 each
    parameter count u64, parameters float32
    [optional SI block: b"SIX1", w_acc, omega, anchor, prev_final as float32,
     c f64, xi f64, center index u32]
    CRC32 of everything above, u32
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .nn import LAYER_KINDS, PATHWAYS, LayerSpec, ModelState
from .si import SIState

MAGIC = b"RFCL"
SI_TAG = b"SIX1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(model: ModelState, si: SIState | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<HHH", FORMAT_VERSION, len(model.layers), model.in_channels)]
    for layer in model.layers:
        parts.append(struct.pack("<BBB", LAYER_KINDS.index(layer.kind),
                                 PATHWAYS.index(layer.pathway), len(layer.dims)))
        parts.append(struct.pack(f"<{len(layer.dims)}I", *layer.dims))
    parts.append(struct.pack("<Q", model.n_params))
    parts.append(np.ascontiguousarray(model.theta, "<f4").tobytes())
    if si is not None:
        parts.append(SI_TAG)
        for vec in (si.w_acc, si.omega, si.anchor, si.prev_final):
            if len(vec) != model.n_params:
                raise CheckpointError("SI state does not match the model")
            parts.append(np.ascontiguousarray(vec, "<f4").tobytes())
        parts.append(struct.pack("<ddI", si.c, si.xi, si.center_index))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes) -> tuple[ModelState, SIState | None]:
    if len(raw) < 14 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch")
    version, n_layers, in_channels = struct.unpack_from("<HHH", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    pos = 10
    layers = []
    for _ in range(n_layers):
        kind, pathway, nd = struct.unpack_from("<BBB", body, pos)
        pos += 3
        dims = struct.unpack_from(f"<{nd}I", body, pos)
        pos += 4 * nd
        layers.append(LayerSpec(LAYER_KINDS[kind], dims, PATHWAYS[pathway]))
    (n,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    theta = np.frombuffer(body, "<f4", count=n, offset=pos).astype(np.float32)
    pos += 4 * n
    si = None
    if pos < len(body):
        if body[pos:pos + 4] != SI_TAG:
            raise CheckpointError("unknown extension block")
        pos += 4
        vecs = []
        for _ in range(4):
            vecs.append(np.frombuffer(body, "<f4", count=n, offset=pos).astype(np.float32))
            pos += 4 * n
        c, xi, idx = struct.unpack_from("<ddI", body, pos)
        pos += 20
        si = SIState(*vecs, c=c, xi=xi, center_index=idx)
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return ModelState(layers, theta, in_channels=in_channels), si


def save_checkpoint(path, model: ModelState, si: SIState | None = None) -> int:
    """Write atomically; returns the byte count."""
    raw = encode(model, si)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(raw)
    os.replace(tmp, path)
    model.version += 1
    return len(raw)


def load_checkpoint(path) -> tuple[ModelState, SIState | None]:
    return decode(Path(path).read_bytes())
