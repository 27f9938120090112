"""Versioned checkpoint container.

Layout::

    AMTPP-CHECKPOINT\\n
    <header: one line of JSON, keys sorted>\\n
    <payload: little-endian float64 blobs, concatenated in header order>

The header carries ``format_version``, the training configuration, epoch,
best validation NLL, optimizer scalars, the RNG state and a ``tensors`` list
of ``{name, shape, offset, count}`` entries locating each blob in the
payload.  Blob names are prefixed ``param/``, ``adam_m/``, ``adam_v/`` or are
the literal ``station_features``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState
from .config import TrainConfig

MAGIC = b"AMTPP-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    epoch: int
    best_val_nll: float
    features: np.ndarray | None = None
    forbidden_pairs: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        blobs: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in self.params.items()]
        blobs += [(f"adam_m/{k}", v) for k, v in self.adam.m.items()]
        blobs += [(f"adam_v/{k}", v) for k, v in self.adam.v.items()]
        if self.features is not None:
            blobs.append(("station_features", self.features))
        entries, chunks, offset = [], [], 0
        for name, arr in blobs:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                            "count": int(np.size(arr))})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "best_val_nll": self.best_val_nll,
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "step": self.adam.step},
            "rng_state": self.rng_state,
            "forbidden_pairs": [list(p) for p in self.forbidden_pairs],
            "meta": self.meta,
            "tensors": entries,
        }
        line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + line + b"\n" + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if not raw.startswith(MAGIC):
            raise CheckpointError("not an AMTPP checkpoint")
        end = raw.index(b"\n", len(MAGIC))
        header = json.loads(raw[len(MAGIC):end].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        payload = raw[end + 1:]
        params, m, v, features = {}, {}, {}, None
        for e in header["tensors"]:
            start = e["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=e["count"], offset=start)
            arr = arr.astype(np.float64).reshape(e["shape"])
            kind, _, name = e["name"].partition("/")
            if kind == "param":
                params[name] = arr
            elif kind == "adam_m":
                m[name] = arr
            elif kind == "adam_v":
                v[name] = arr
            elif e["name"] == "station_features":
                features = arr
            else:
                raise CheckpointError(f"unknown blob {e['name']!r}")
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m=m, v=v)
        return cls(TrainConfig.from_dict(header["config"]), params, adam, header["rng_state"],
                   header["epoch"], header["best_val_nll"], features,
                   [tuple(p) for p in header["forbidden_pairs"]], header.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
