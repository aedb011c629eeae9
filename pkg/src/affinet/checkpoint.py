"""Versioned binary checkpoints.

Layout: 8-byte magic, u32 version, length-prefixed JSON header (network and
training config, iteration, RNG states, provenance, tensor dtype), u32 tensor
count, then per tensor: u32 name length, name bytes, u32 rank, u32 dims, raw
little-endian scalars. Tensors are written sorted by name and the JSON header
is canonicalized, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import Network
from .optim import OptState

MAGIC = b"AFNETCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net_config: dict
    train_config: dict
    iteration: int
    rng_state: dict
    tensors: dict
    provenance: dict = field(default_factory=dict)

    @classmethod
    def snapshot(cls, net, opt_state, train_config, iteration, rng_state, provenance=None):
        tensors = {}
        for p in net.parameters():
            tensors[p.name] = p.data.copy()
            tensors["velocity." + p.name] = opt_state.velocity[p.name].copy()
        for name, state in net.bn_states():
            tensors[name + ".running_mean"] = state.running_mean.copy()
            tensors[name + ".running_var"] = state.running_var.copy()
            tensors[name + ".updates"] = np.array([state.updates], dtype=np.int64)
        return cls(
            net_config=net.config(),
            train_config=dict(train_config),
            iteration=int(iteration),
            rng_state=rng_state,
            tensors=tensors,
            provenance=dict(provenance or {}),
        )

    def _header(self):
        return {
            "format_version": VERSION,
            "net": self.net_config,
            "train": self.train_config,
            "iteration": self.iteration,
            "rng": self.rng_state,
            "provenance": self.provenance,
        }

    def save(self, path):
        header = json.dumps(
            self._header(), sort_keys=True, separators=(",", ":"), default=_jsonable
        ).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(struct.pack("<I", len(self.tensors)))
            for name in sorted(self.tensors):
                arr = self.tensors[name]
                raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                nb = name.encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(raw.tobytes())

    @classmethod
    def load(cls, path):
        try:
            return cls._load(path)
        except (struct.error, KeyError, json.JSONDecodeError, ValueError) as e:
            if isinstance(e, CheckpointError):
                raise
            raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e

    @classmethod
    def _load(cls, path):
        with open(path, "rb") as f:
            if f.read(8) != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            dtype = np.dtype(header["net"]["dtype"]).newbyteorder("<")
            (count,) = struct.unpack("<I", f.read(4))
            tensors = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode()
                (rank,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
                dt = np.dtype("<i8") if name.endswith(".updates") else dtype
                raw = f.read(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
                tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        return cls(
            net_config=header["net"],
            train_config=header["train"],
            iteration=header["iteration"],
            rng_state=header["rng"],
            tensors=tensors,
            provenance=header.get("provenance", {}),
        )

    def restore_network(self):
        net = Network.from_config(self.net_config)
        for p in net.parameters():
            p.data[...] = self.tensors[p.name]
        for name, state in net.bn_states():
            state.running_mean[...] = self.tensors[name + ".running_mean"]
            state.running_var[...] = self.tensors[name + ".running_var"]
            state.updates = int(self.tensors[name + ".updates"][0])
        return net

    def restore_opt_state(self, net):
        state = OptState.for_params(net.parameters())
        for name in state.velocity:
            state.velocity[name][...] = self.tensors["velocity." + name]
        return state


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")
