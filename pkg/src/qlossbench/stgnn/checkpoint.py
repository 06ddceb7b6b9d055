"""Parameter checkpoint file.

Layout: magic ``b"QLWM"`` | u16 version | u32 header length | UTF-8 JSON
header | flat little-endian float64 parameter array. The header holds the
code distance, the model config, the epoch counter, and a manifest of
``(name, offset, shape)`` entries into the flat array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from qlossbench.errors import BadMagicError, FormatError, TruncatedStreamError, VersionMismatchError
from qlossbench.lattice import build_layout
from qlossbench.stgnn.model import DTYPE, STGNN, ModelConfig

MAGIC = b"QLWM"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def serialize_model(model: STGNN, epoch: int = 0, extra: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, p in model.state_dict().items():
        if name not in dict(model.named_parameters()):
            continue  # buffers are rebuilt from the layout
        arr = p.detach().cpu().numpy().astype("<f8", copy=False).ravel()
        manifest.append({"name": name, "offset": offset, "shape": list(p.shape)})
        chunks.append(arr)
        offset += arr.size
    header = {
        "d": model.layout.d,
        "config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "n_values": offset,
        "manifest": manifest,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    flat = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + flat.astype("<f8").tobytes()


def deserialize_model(blob: bytes) -> tuple[STGNN, dict]:
    """Rebuild the model; also returns the header dict (epoch, extra, ...)."""
    if len(blob) < 4:
        raise TruncatedStreamError("stream shorter than the magic number")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _PREFIX.size:
        raise TruncatedStreamError("stream ends inside the prefix")
    _, version, hlen = _PREFIX.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    body_start = _PREFIX.size + hlen
    if len(blob) < body_start:
        raise TruncatedStreamError("stream ends inside the header")
    try:
        header = json.loads(blob[_PREFIX.size : body_start].decode())
        cfg = ModelConfig(**header["config"])
        n_values = int(header["n_values"])
        manifest = header["manifest"]
        d = int(header["d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    expected = body_start + 8 * n_values
    if len(blob) < expected:
        raise TruncatedStreamError(f"expected {expected} bytes, got {len(blob)}")
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after the parameters")
    flat = np.frombuffer(blob, dtype="<f8", count=n_values, offset=body_start)
    model = STGNN(build_layout(d), cfg)
    params = dict(model.named_parameters())
    if {e["name"] for e in manifest} != set(params):
        raise FormatError("checkpoint manifest does not match the model's parameters")
    with torch.no_grad():
        for e in manifest:
            p = params[e["name"]]
            size = int(np.prod(e["shape"], dtype=np.int64))
            if list(p.shape) != e["shape"] or e["offset"] + size > n_values:
                raise FormatError(f"bad manifest entry for {e['name']}")
            vals = flat[e["offset"] : e["offset"] + size].reshape(e["shape"])
            p.copy_(torch.from_numpy(vals.copy()).to(DTYPE))
    model.eval()
    return model, header


def save_model(path: str | Path, model: STGNN, epoch: int = 0, extra: dict | None = None) -> None:
    Path(path).write_bytes(serialize_model(model, epoch, extra))


def load_model(path: str | Path) -> tuple[STGNN, dict]:
    return deserialize_model(Path(path).read_bytes())
