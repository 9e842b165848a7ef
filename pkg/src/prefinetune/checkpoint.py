"""Binary checkpoint container.

Layout::

    b"PFTCKPT\\0"            8-byte magic
    <u8 little-endian>      length of the JSON header in bytes
    header                  UTF-8 JSON, sorted keys, compact separators
    blocks                  raw little-endian fp64 arrays, at header offsets

Header offsets are relative to the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import HeadTable, ModelConfig
from .scheduler import OptimizerState

MAGIC = b"PFTCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    heads: HeadTable
    params: dict
    optimizer: OptimizerState | None = None
    step: int = 0
    seed_lineage: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        blocks: list[tuple[str, np.ndarray]] = [(f"param/{k}", self.params[k]) for k in sorted(self.params)]
        opt_meta = None
        if self.optimizer is not None:
            o = self.optimizer
            opt_meta = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
            blocks += [(f"adam_m/{k}", o.m[k]) for k in sorted(o.m)]
            blocks += [(f"adam_v/{k}", o.v[k]) for k in sorted(o.v)]
        entries, payload, offset = [], [], 0
        for name, arr in blocks:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "config_digest": self.config.digest(),
            "model_config": self.config.to_dict(),
            "heads": self.heads.to_dict(),
            "optimizer": opt_meta,
            "step": self.step,
            "seed_lineage": list(self.seed_lineage),
            "tensors": entries,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(payload)

    @classmethod
    def from_bytes(cls, blob: bytes, expected_config: ModelConfig | None = None) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {header.get('format_version')}")
        config = ModelConfig(**header["model_config"])
        if config.digest() != header["config_digest"]:
            raise CheckpointError("model config does not match its recorded digest")
        if expected_config is not None and expected_config.digest() != header["config_digest"]:
            raise CheckpointError(
                f"config digest mismatch: checkpoint {header['config_digest'][:12]} vs expected {expected_config.digest()[:12]}"
            )
        base = 16 + hlen
        arrays = {}
        for e in header["tensors"]:
            start = base + e["offset"]
            arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype="<f8").astype(np.float64)
            arrays[e["name"]] = arr.reshape(e["shape"])
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        opt = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            opt = OptimizerState(
                o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
                {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
            )
        return cls(config, HeadTable.from_dict(header["heads"]), params, opt, header["step"], header["seed_lineage"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path, expected_config: ModelConfig | None = None) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), expected_config)
