"""Binary checkpoint format.

Layout::

    b"DAVIDCKP"  | uint16 version | uint32 header length | header | payload

The header is sorted-key JSON holding the architecture description, the
training metadata, optimizer scalars and a directory of tensors (name,
shape, dtype, offset, byte count).  The payload is the concatenated
little-endian tensor bytes in directory order.  Writing is deterministic,
so save -> load -> save reproduces the same file.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

from .architecture import model_config, model_from_config
from .engine import AdamState

MAGIC = b"DAVIDCKP"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(ValueError):
    pass


def _le_code(arr):
    code = np.dtype(arr.dtype).newbyteorder("<").str
    if code not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return code


def encode(architecture, tensors, meta=None, optimizer=None):
    """Serialize to bytes. ``tensors`` maps names to arrays."""
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _le_code(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset,
                          "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "architecture": architecture, "meta": meta or {},
              "optimizer": optimizer, "tensors": directory}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(text)) + text + b"".join(chunks)


def decode(blob):
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<HI")
    header = json.loads(blob[start:start + hlen])
    payload = memoryview(blob)[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"truncated checkpoint: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(_DTYPES[entry["dtype"]], copy=True)
    return header, tensors


class Checkpoint:
    """Decoded checkpoint: architecture, parameters, optimizer state, metadata."""

    def __init__(self, architecture, parameters, meta=None, optimizer=None):
        self.architecture = architecture
        self.parameters = parameters
        self.meta = meta or {}
        self.optimizer = optimizer

    @classmethod
    def from_model(cls, model, meta=None, adam=None):
        params = {k: v.data.copy() for k, v in model.parameters().items()}
        return cls(model_config(model), params, meta, adam)

    def to_bytes(self):
        tensors = {f"param/{k}": v for k, v in self.parameters.items()}
        opt = None
        if self.optimizer is not None:
            s = self.optimizer
            opt = {"beta1": s.beta1, "beta2": s.beta2, "epsilon": s.epsilon, "step_count": s.step_count}
            tensors.update({f"adam_m/{k}": v for k, v in s.first_moment.items()})
            tensors.update({f"adam_v/{k}": v for k, v in s.second_moment.items()})
        return encode(self.architecture, tensors, self.meta, opt)

    @classmethod
    def from_bytes(cls, blob):
        header, tensors = decode(blob)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        adam = None
        if header.get("optimizer") is not None:
            o = header["optimizer"]
            adam = AdamState(o["beta1"], o["beta2"], o["epsilon"], o["step_count"],
                             {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                             {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")})
        return cls(header["architecture"], params, header["meta"], adam)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    def build_model(self):
        dtype = next(iter(self.parameters.values())).dtype if self.parameters else np.float32
        model = model_from_config(self.architecture, dtype=dtype)
        load_parameters(model, self.parameters)
        return model


def save_checkpoint(path, model, meta=None, adam=None):
    return Checkpoint.from_model(model, meta, adam).save(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def load_parameters(model, params, prefix=""):
    """Copy ``params`` into ``model`` in place, requiring an exact name/shape match."""
    live = model.parameters()
    for name in sorted(set(live) | set(params)):
        if name not in params:
            raise CheckpointError(f"{prefix}parameter {name} missing from checkpoint")
        if name not in live:
            raise CheckpointError(f"{prefix}checkpoint parameter {name} has no counterpart in the model")
        if live[name].shape != params[name].shape:
            raise CheckpointError(f"{prefix}parameter {name}: model shape {live[name].shape}, "
                                  f"checkpoint shape {tuple(params[name].shape)}")
    for name, t in live.items():
        t.data[...] = params[name]
    return model
