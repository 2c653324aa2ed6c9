"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VGLM"                       magic
    u16  version
    u32  metadata length, then UTF-8 JSON (sorted keys)
    u32  tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  dtype tag (1 = float64)
        u8  frozen flag
        u8  rank, then rank x u32 dims
        prod(dims) x float64 payload
    32 bytes SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .abstractor import FUSION_ORDER
from .errors import CheckpointError, ChecksumError

MAGIC = b"VGLM"
VERSION = 1
DTYPE_F64 = 1
DIGEST = 32


def creation_timestamp() -> str:
    """ISO timestamp from SOURCE_DATE_EPOCH (default 0) so reruns stay byte-identical."""
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)

    # -- model bridge -------------------------------------------------------
    @classmethod
    def from_model(cls, model, extra: dict | None = None) -> "Checkpoint":
        meta = {
            "model_kind": "vlm",
            "model_config": model.config.to_dict(),
            "variant": model.config.variant,
            "fusion_order": list(FUSION_ORDER),
            "provenance": list(getattr(model, "provenance", [])),
            "created": creation_timestamp(),
        }
        meta.update(extra or {})
        tensors, frozen = {}, {}
        for name, p in model.named_parameters():
            tensors[name] = p.data.copy()
            frozen[name] = p.frozen
        return cls(meta, tensors, frozen)

    @classmethod
    def echo_oracle(cls) -> "Checkpoint":
        """Parameter-free checkpoint that evaluates as a model echoing every reference."""
        return cls({"model_kind": "echo_oracle", "provenance": [], "created": creation_timestamp()}, {}, {})

    def to_model(self):
        from .model import ModelConfig, VisionLanguageModel

        if self.metadata.get("model_kind") != "vlm":
            raise CheckpointError(f"checkpoint holds a {self.metadata.get('model_kind')!r}, not a vlm")
        model = VisionLanguageModel(ModelConfig.from_dict(self.metadata["model_config"]))
        self.load_into(model)
        model.provenance = list(self.metadata.get("provenance", []))
        return model

    def load_into(self, model) -> None:
        params = model.param_dict()
        if set(params) != set(self.tensors):
            missing = sorted(set(params) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(params))
            raise CheckpointError(f"parameter namespace mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, p in params.items():
            arr = self.tensors[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != model shape {p.shape}")
            p.tensor.data = arr.copy()
            p.freeze(self.frozen.get(name, p.frozen))
            p.optimizer_state = None

    # -- bytes --------------------------------------------------------------
    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta,
               struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out.append(struct.pack("<H", len(nb)) + nb)
            out.append(struct.pack("<BBB", DTYPE_F64, int(self.frozen.get(name, False)), arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        body = b"".join(out)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 2 + DIGEST or blob[:4] != MAGIC:
            raise CheckpointError("not a VGLM checkpoint (bad magic or too short)")
        body, digest = blob[:-DIGEST], blob[-DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupted)")
        (version,) = struct.unpack_from("<H", body, 4)
        if version != VERSION:
            raise CheckpointError(f"checkpoint format version {version} != supported version {VERSION}")
        pos = 6
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        metadata = json.loads(body[pos: pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors, frozen = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos: pos + nlen].decode("utf-8")
            pos += nlen
            tag, fr, ndim = struct.unpack_from("<BBB", body, pos)
            pos += 3
            if tag != DTYPE_F64:
                raise CheckpointError(f"{name}: unsupported dtype tag {tag}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            frozen[name] = bool(fr)
            pos += 8 * n
        if pos != len(body):
            raise CheckpointError(f"{len(body) - pos} trailing bytes after tensor table")
        return cls(metadata, tensors, frozen)

    def save(self, path: str | Path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return blob[-DIGEST:].hex()

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def checksum(self) -> str:
        return self.to_bytes()[-DIGEST:].hex()

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()
