"""Checkpoint files: a text manifest followed by raw little-endian arrays.

Layout::

    geomgen-checkpoint
    format_version = 1
    model = {...}            JSON model config
    adam = {...}             JSON hyperparameters and step counter
    iteration = 1200
    rng = {...}              JSON numpy bit-generator state
    array <name> <dtype> <d0,d1,...> <offset> <nbytes>
    ...
    end
    <binary payload, arrays in manifest order>

Offsets count from the first payload byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ParameterStore

MAGIC = "geomgen-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParameterStore
    adam: object = None  # trainer.AdamState
    iteration: int = 0
    rng_state: dict | None = None


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(ckpt):
    params = ckpt.params
    dtype = np.dtype(params.dtype).newbyteorder("<")
    arrays = [(k, t.data) for k, t in params.items()]
    adam_header = None
    if ckpt.adam is not None:
        adam = ckpt.adam
        adam_header = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step}
        for k in params.names():
            if k in adam.m:
                arrays.append((f"adam.m.{k}", adam.m[k]))
                arrays.append((f"adam.v.{k}", adam.v[k]))
    lines = [
        MAGIC,
        f"format_version = {FORMAT_VERSION}",
        f"model = {_dumps(params.config.to_dict())}",
        f"adam = {_dumps(adam_header)}",
        f"iteration = {int(ckpt.iteration)}",
        f"rng = {_dumps(ckpt.rng_state)}",
    ]
    payload = []
    offset = 0
    for name, data in arrays:
        raw = np.ascontiguousarray(data, dtype=dtype).tobytes()
        shape = ",".join(str(s) for s in data.shape)
        lines.append(f"array {name} {dtype.str} {shape} {offset} {len(raw)}")
        payload.append(raw)
        offset += len(raw)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(payload)


def decode_checkpoint(blob):
    from .trainer import AdamState

    end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError("not a geomgen checkpoint")
    header = blob[:end].decode("ascii").split("\n")
    payload = blob[end + len(b"\nend\n") :]
    fields, arrays = {}, []
    for line in header[1:]:
        if line.startswith("array "):
            _, name, dtype, shape, offset, nbytes = line.split(" ")
            arrays.append((name, dtype, tuple(int(s) for s in shape.split(",") if s), int(offset), int(nbytes)))
        else:
            key, _, value = line.partition(" = ")
            fields[key] = value
    version = int(fields.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    data = {}
    for name, dtype, shape, offset, nbytes in arrays:
        raw = payload[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"truncated array {name}")
        native = np.dtype(dtype).newbyteorder("=")
        data[name] = np.frombuffer(raw, dtype=dtype).astype(native).reshape(shape)
    config = ModelConfig.from_dict(json.loads(fields["model"]))
    params = ParameterStore(
        config,
        [(k, ad.Tensor(v, requires_grad=True, dtype=v.dtype, name=k)) for k, v in data.items() if not k.startswith("adam.")],
    )
    adam = None
    adam_header = json.loads(fields["adam"])
    if adam_header is not None:
        adam = AdamState(
            lr=adam_header["lr"],
            beta1=adam_header["beta1"],
            beta2=adam_header["beta2"],
            eps=adam_header["eps"],
            step=adam_header["step"],
        )
        for k in params.names():
            if f"adam.m.{k}" in data:
                adam.m[k] = data[f"adam.m.{k}"]
                adam.v[k] = data[f"adam.v.{k}"]
    return Checkpoint(params, adam, int(fields["iteration"]), json.loads(fields["rng"]))


def save_checkpoint(path, ckpt):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
