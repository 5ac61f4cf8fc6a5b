"""Binary checkpoint holding both networks, feature statistics and a config echo.

Layout (little-endian):
    b"DSHD"  u32 version  u64 meta_len  meta JSON (utf-8, sorted keys)
    u32 n_sections, then per section:
        u16 name_len  name (utf-8)  u32 ndim  u64 * ndim shape  f64 * prod(shape)
Sections are written in sorted name order, so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costnet import CostNet
from .errors import CheckpointError
from .policy import PolicyNet
from .tablegen import FeatureStats

MAGIC = b"DSHD"
VERSION = 1


@dataclass
class Checkpoint:
    cost_net: CostNet
    policy: PolicyNet
    stats: FeatureStats
    config: dict = field(default_factory=dict)

    def sections(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.cost_net.params().items():
            out["cost." + k] = v
        for k, v in self.policy.params().items():
            out["policy." + k] = v
        return out

    def meta(self) -> dict:
        return {
            "config": self.config,
            "cost_arch": self.cost_net.arch(),
            "policy_arch": self.policy.arch(),
            "feature_stats": self.stats.to_list(),
        }

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta(), sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<IQ", VERSION, len(meta)), meta]
        secs = self.sections()
        parts.append(struct.pack("<I", len(secs)))
        for name in sorted(secs):
            arr = np.ascontiguousarray(secs[name], dtype="<f8")
            nb = name.encode()
            parts.append(struct.pack("<H", len(nb)) + nb)
            parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        r = _Reader(buf)
        if r.take(4) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        version, meta_len = r.unpack("<IQ")
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
        try:
            meta = json.loads(r.take(meta_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"bad checkpoint metadata: {e}") from e
        (n,) = r.unpack("<I")
        arrays = {}
        for _ in range(n):
            (nl,) = r.unpack("<H")
            name = r.take(nl).decode()
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}Q")
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if r.pos != len(buf):
            raise CheckpointError("trailing bytes after checkpoint")

        ca, pa = meta["cost_arch"], meta["policy_arch"]
        net = CostNet(
            reduction_tables=ca["reduction_tables"],
            reduction_devices=ca["reduction_devices"],
            feature_mask=ca["feature_mask"],
            table_out_relu=ca["table_out_relu"],
        )
        pol = PolicyNet(feature_mask=pa["feature_mask"], use_cost_features=pa["use_cost_features"])
        ck = cls(net, pol, FeatureStats.from_list(meta["feature_stats"]), meta["config"])
        expected = ck.sections()
        if set(expected) != set(arrays):
            raise CheckpointError("checkpoint sections do not match the architecture")
        for name, dst in expected.items():
            if dst.shape != arrays[name].shape:
                raise CheckpointError(f"section {name}: shape {arrays[name].shape}, expected {dst.shape}")
            dst[...] = arrays[name]
        return ck

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as e:
            raise CheckpointError(str(e)) from e


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(ck: Checkpoint, path) -> None:
    ck.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)
