"""Versioned binary checkpoints.

Layout (little-endian)::

    b"KINETCKP" | u32 version | u32 len + config text (INI) | u32 len + meta JSON
    | u32 tensor count | per tensor: u16 len + name, u8 ndim, u32 dims..., f32 data
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import DataError, StorageError
from .netcore import build_baseline, build_model, state_registry

MAGIC = b"KINETCKP"
VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    config: RunConfig
    tensors: dict  # slash-named float32 arrays: "model/..." and "optim/velocity/..."
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.config == other.config
            and self.meta == other.meta
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )

    @property
    def epoch(self):
        return self.meta.get("epoch", 0)

    @property
    def model_kind(self):
        return self.meta.get("model_kind", "kinet")

    def model_state(self):
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}

    def velocities(self):
        prefix = "optim/velocity/"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def build_model(self):
        builder = build_baseline if self.model_kind == "tsn" else build_model
        model = builder(self.config.model, seed=self.meta.get("seed", 0))
        load_model_state(model, self.model_state())
        return model

    def to_bytes(self):
        out = [MAGIC, struct.pack("<I", VERSION)]
        for blob in (self.config.to_text().encode(), json.dumps(self.meta, sort_keys=True).encode()):
            out.append(struct.pack("<I", len(blob)))
            out.append(blob)
        out.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            key = name.encode()
            out.append(struct.pack("<H", len(key)))
            out.append(key)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        reader = _Reader(data, source)
        if reader.take(len(MAGIC)) != MAGIC:
            raise DataError(f"{source}: not a kinet checkpoint (bad magic)")
        (version,) = reader.unpack("<I")
        if version != VERSION:
            raise DataError(f"{source}: unsupported checkpoint version {version}")
        config = RunConfig.from_text(reader.take(reader.unpack("<I")[0]).decode())
        meta = json.loads(reader.take(reader.unpack("<I")[0]).decode())
        tensors = {}
        for _ in range(reader.unpack("<I")[0]):
            name = reader.take(reader.unpack("<H")[0]).decode()
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I")
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).copy()
        if reader.pos != len(data):
            raise DataError(f"{source}: {len(data) - reader.pos} trailing bytes")
        return cls(config, tensors, meta)

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(self.to_bytes())
            tmp.replace(path)
        except OSError as exc:
            raise StorageError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from None
        return path

    @classmethod
    def load(cls, path):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
        return cls.from_bytes(data, str(path))


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DataError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_state_arrays(model):
    return {
        name: t.detach().cpu().numpy().astype("<f4", copy=True)
        for name, t in state_registry(model).items()
    }


def load_model_state(model, arrays):
    registry = state_registry(model)
    missing = set(registry) - set(arrays)
    extra = set(arrays) - set(registry)
    if missing or extra:
        raise DataError(
            f"checkpoint does not fit the model: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
        )
    with torch.no_grad():
        for name, t in registry.items():
            src = torch.from_numpy(np.asarray(arrays[name]))
            if tuple(src.shape) != tuple(t.shape):
                raise DataError(f"checkpoint tensor {name} has shape {tuple(src.shape)}, model wants {tuple(t.shape)}")
            t.copy_(src.to(t.dtype))
    return model
