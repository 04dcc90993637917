"""Checkpoint files (``*.lnckpt``).

Layout::

    LNCKPT <version>
    [config]
    key=value ...
    [meta]
    key=value ...
    [tensors]
    name<TAB>d0,d1,...<TAB>offset<TAB>nbytes
    END
    <payload: little-endian float32, offsets relative to the byte after END\\n>
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .network import ConfigError, LesionNet, NetworkConfig, build_network
from .optim import AdamState

MAGIC = "LNCKPT"
VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    tensors: "OrderedDict[str, np.ndarray]"
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def best_val_loss(self) -> float:
        return float(self.meta.get("best_val_loss", "inf"))


def capture(net: LesionNet, adam: Optional[AdamState] = None, meta: Optional[dict] = None) -> Checkpoint:
    """Snapshot parameters, BN statistics and (optionally) Adam moments."""
    tensors = OrderedDict()
    for name, p in net.registry.items():
        tensors[name] = p.value.copy()
    for name, buf in net.buffers().items():
        tensors[name] = buf.copy()
    meta = dict(meta or {})
    if adam is not None:
        meta.update({"adam.t": str(adam.t), "adam.beta1": repr(adam.beta1),
                     "adam.beta2": repr(adam.beta2), "adam.eps": repr(adam.eps)})
        for name in net.registry:
            if name in adam.m:
                tensors[f"adam.m/{name}"] = adam.m[name].copy()
                tensors[f"adam.v/{name}"] = adam.v[name].copy()
    return Checkpoint(net.config, tensors, {k: str(v) for k, v in meta.items()})


def restore(ckpt: Checkpoint, net: LesionNet, adam: Optional[AdamState] = None) -> None:
    """Copy checkpoint tensors into ``net`` (and ``adam``); names must match exactly."""
    check_config(ckpt.config, net.config)
    buffers = net.buffers()
    expected = set(net.registry) | set(buffers)
    for name, arr in ckpt.tensors.items():
        if name.startswith("adam."):
            continue
        if name not in expected:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        target = net.registry[name].value if name in net.registry else buffers[name]
        if target.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: shape {arr.shape} != {target.shape}")
        target[...] = arr
    missing = expected - set(ckpt.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {sorted(missing)[0]!r}")
    if adam is not None and "adam.t" in ckpt.meta:
        adam.t = int(ckpt.meta["adam.t"])
        adam.beta1 = float(ckpt.meta["adam.beta1"])
        adam.beta2 = float(ckpt.meta["adam.beta2"])
        adam.eps = float(ckpt.meta["adam.eps"])
        adam.m.clear()
        adam.v.clear()
        for name, p in net.registry.items():
            if f"adam.m/{name}" in ckpt.tensors:
                adam.m[name] = ckpt.tensors[f"adam.m/{name}"].astype(p.value.dtype)
                adam.v[name] = ckpt.tensors[f"adam.v/{name}"].astype(p.value.dtype)


def check_config(saved: NetworkConfig, current: NetworkConfig) -> None:
    a, b = saved.to_record(), current.to_record()
    for key in a:
        if a[key] != b.get(key):
            raise ConfigError(f"config field {key!r} differs: checkpoint has {a[key]}, network has {b.get(key)}")


def network_from_checkpoint(ckpt: Checkpoint) -> LesionNet:
    net = build_network(ckpt.config, np.random.default_rng(0))
    restore(ckpt, net)
    return net


def _check_value(text: str, what: str):
    if "\n" in text or "=" in what:
        raise CheckpointError(f"cannot store {what!r}={text!r} in header")


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    lines = [f"{MAGIC} {VERSION}", "[config]"]
    for k, v in ckpt.config.to_record().items():
        lines.append(f"{k}={v}")
    lines.append("[meta]")
    for k, v in ckpt.meta.items():
        _check_value(v, k)
        lines.append(f"{k}={v}")
    lines.append("[tensors]")
    offset = 0
    payload = []
    for name, arr in ckpt.tensors.items():
        if any(c in name for c in "\t\n"):
            raise CheckpointError(f"invalid tensor name {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}\t{len(raw)}")
        payload.append(raw)
        offset += len(raw)
    lines.append("END")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for raw in payload:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_header(path):
    """Parse the header; returns ``(config_record, meta, directory, raw_bytes, payload_start)``."""
    blob = Path(path).read_bytes()
    end = blob.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = blob[:end].decode("utf-8").split("\n")
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"{path}: format version {magic[1]} unsupported (expected {VERSION})")
    section = None
    config, meta, directory = {}, {}, []
    for line in header[1:]:
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section in ("config", "meta"):
            key, _, value = line.partition("=")
            (config if section == "config" else meta)[key] = value
        elif section == "tensors":
            name, shape, off, nbytes = line.split("\t")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            directory.append((name, dims, int(off), int(nbytes)))
        else:
            raise CheckpointError(f"{path}: stray header line {line!r}")
    return config, meta, directory, blob, end + len(b"\nEND\n")


def load_checkpoint(path) -> Checkpoint:
    config_rec, meta, directory, blob, start = read_header(path)
    try:
        config = NetworkConfig.from_record(config_rec)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config record: {exc}") from exc
    tensors = OrderedDict()
    for name, dims, off, nbytes in directory:
        count = int(np.prod(dims)) if dims else 1
        if nbytes != count * _PAYLOAD_DTYPE.itemsize:
            raise CheckpointError(f"{path}: tensor {name!r} size does not match its shape")
        lo = start + off
        if lo + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload at tensor {name!r}")
        arr = np.frombuffer(blob, dtype=_PAYLOAD_DTYPE, count=count, offset=lo)
        tensors[name] = arr.astype(np.float32).reshape(dims)
    return Checkpoint(config, tensors, meta)
