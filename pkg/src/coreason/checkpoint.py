"""Binary checkpoint container.

Layout, in order:

    magic  b"CRSN"                      4 bytes
    format version                      u32 little-endian
    header length                       u64 little-endian
    header                              UTF-8 JSON, sorted keys
    payload                             raw little-endian arrays, packed
    digest                              sha256 over everything above

The header carries the model config, a name -> (dtype, shape, offset,
nbytes) index into the payload, the memory-cell counters, the optimizer
hyperparameters, the data-order RNG state, and the step/epoch counters.
Model parameters are stored under their parameter names, memory entries
under ``memory/q/entries`` and ``memory/r/entries``, optimizer moments
under ``optim/m/<param>`` and ``optim/v/<param>``.

Writes are atomic (temp file + rename). Loads verify the digest before
trusting anything else, re-read arrays bitwise, and raise
:class:`ParseError` with a byte offset for any structural damage.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError
from .model import Model, ModelConfig
from .optim import Adam

MAGIC = b"CRSN"
FORMAT_VERSION = 1
_DIGEST_BYTES = 32

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    tag = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
    if tag is None:
        raise InputError(f"checkpoint cannot store dtype {arr.dtype}")
    return tag


@dataclass
class Checkpoint:
    """Everything a saved training state contains, decoded."""
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    memory: dict
    optim_meta: dict | None
    rng: dict | None
    step: int
    epoch: int

    def restore_model(self, seed: int = 0) -> Model:
        """Rebuild a model carrying exactly the stored parameters and
        memory contents."""
        model = Model(self.config, seed=seed)
        for name, p in model.parameters():
            if name not in self.arrays:
                raise ParseError(f"checkpoint missing parameter {name!r}")
            stored = self.arrays[name]
            if stored.shape != p.data.shape:
                raise ParseError(f"checkpoint parameter {name!r} has shape "
                                 f"{stored.shape}, expected {p.data.shape}")
            p.data = stored.copy()
        for key, cell in (("q", model.memory_q), ("r", model.memory_r)):
            entries = self.arrays.get(f"memory/{key}/entries")
            cell.entries = [] if entries is None or entries.shape[0] == 0 \
                else [row.copy() for row in entries]
            cell.t = int(self.memory.get(key, {}).get("t", 0))
        return model

    def restore_optimizer(self, model: Model) -> Adam | None:
        if self.optim_meta is None:
            return None
        meta = self.optim_meta
        opt = Adam(model.parameters(), lr=meta["lr"], beta1=meta["beta1"],
                   beta2=meta["beta2"], eps=meta["eps"])
        opt.load_state_arrays(self.arrays, meta["t"])
        return opt


def _collect_arrays(model: Model, optimizer: Adam | None) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.parameters():
        arrays[name] = p.data
    d = model.config.d_model
    for key, cell in (("q", model.memory_q), ("r", model.memory_r)):
        stacked = np.stack(cell.entries, axis=0) if cell.entries \
            else np.zeros((0, d), dtype=model.embedding.dtype)
        arrays[f"memory/{key}/entries"] = stacked
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def save_checkpoint(path: str, model: Model, optimizer: Adam | None = None,
                    rng_state: dict | None = None, step: int = 0,
                    epoch: int = 0) -> None:
    """Serialize model (+ optional optimizer/RNG state) atomically."""
    arrays = _collect_arrays(model, optimizer)
    index = {}
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        index[name] = {"dtype": tag, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": model.config.to_dict(),
        "arrays": index,
        "memory": {"q": {"t": model.memory_q.t},
                   "r": {"t": model.memory_r.t}},
        "optimizer": optimizer.meta() if optimizer is not None else None,
        "rng": rng_state,
        "step": int(step),
        "epoch": int(epoch),
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<Q", len(header_raw))
    blob += header_raw
    for raw in chunks:
        blob += raw
    blob += hashlib.sha256(blob).digest()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Read, verify, and decode a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 4 + 8 + _DIGEST_BYTES:
        raise ParseError(f"checkpoint truncated: {len(blob)} bytes is "
                         f"below the fixed envelope size")
    if blob[:4] != MAGIC:
        raise ParseError(f"bad checkpoint magic at offset 0: {blob[:4]!r}")
    body, digest = blob[:-_DIGEST_BYTES], blob[-_DIGEST_BYTES:]
    actual = hashlib.sha256(body).digest()
    if actual != digest:
        raise ParseError(f"checkpoint digest mismatch at offset "
                         f"{len(body)}: file is corrupt")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise ParseError(f"checkpoint format version {version} is not "
                         f"supported (expected {FORMAT_VERSION})")
    header_len = struct.unpack_from("<Q", blob, 8)[0]
    header_end = 16 + header_len
    if header_end > len(body):
        raise ParseError(f"checkpoint header overruns file at offset 16: "
                         f"declared {header_len} bytes")
    try:
        header = json.loads(body[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"checkpoint header unreadable at offset 16: "
                         f"{e}") from e
    payload = body[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for name, spec in header["arrays"].items():
        tag = spec["dtype"]
        if tag not in _DTYPES:
            raise ParseError(f"array {name!r} has unknown dtype {tag!r}")
        lo, nbytes = spec["offset"], spec["nbytes"]
        if lo < 0 or lo + nbytes > len(payload):
            raise ParseError(f"array {name!r} overruns payload at offset "
                             f"{header_end + max(lo, 0)}")
        arr = np.frombuffer(payload[lo:lo + nbytes], dtype=_DTYPES[tag])
        expected = int(np.prod(spec["shape"], dtype=np.int64))
        if arr.size != expected:
            raise ParseError(f"array {name!r} has {arr.size} elements, "
                             f"header declares shape {spec['shape']}")
        arrays[name] = arr.reshape(spec["shape"]).copy()
    return Checkpoint(
        config=ModelConfig.from_dict(header["model_config"]),
        arrays=arrays,
        memory=header.get("memory", {}),
        optim_meta=header.get("optimizer"),
        rng=header.get("rng"),
        step=int(header.get("step", 0)),
        epoch=int(header.get("epoch", 0)),
    )
