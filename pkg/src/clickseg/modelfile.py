"""Bit-exact binary container for model weights.

Layout (all integers little-endian):

    magic   4 bytes  b"SQSM"
    version u16
    cfg_len u32
    cfg     cfg_len bytes of canonical JSON (sorted keys, no spaces)
    count   u32
    table   count entries of:
              name_len u16, name utf-8,
              dtype u8 (0=float32, 1=float64, 2=int8), ndim u8,
              dims u32 * ndim,
              offset u64 (from payload start), nbytes u64
    payload raw tensor bytes, packed contiguously in table order

The config JSON carries the architecture dict plus the ``folded`` and
``quantized`` flags, so a loaded file is self-describing.  Saving is
canonical: save(load(save(m))) is byte-identical to save(m).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from .model import ClickSegNet, ModelConfig
from .tensor import make_rng

MAGIC = b"SQSM"
VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("i1")}
_CODE_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int8): 2}

SCALE_SUFFIX = "@scale"


class ModelFormatError(ValueError):
    """Raised when a weight file is malformed; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


@dataclass
class ModelBundle:
    """A config blob plus an ordered name->array table, ready for disk."""

    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.tensors.values())


def _encode_array(a: np.ndarray) -> tuple[int, bytes]:
    dt = np.dtype(a.dtype)
    if dt not in _CODE_BY_KIND:
        raise ModelFormatError(f"unsupported tensor dtype {dt}")
    code = _CODE_BY_KIND[dt]
    wire = np.ascontiguousarray(a, dtype=_DTYPE_BY_CODE[code])
    return code, wire.tobytes()


def save_bundle(path: str, bundle: ModelBundle) -> int:
    """Write the bundle; returns the total byte count."""
    cfg = json.dumps(bundle.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    table = bytearray()
    payload = bytearray()
    for name, arr in bundle.tensors.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ModelFormatError(f"tensor name too long: {name[:40]}...")
        code, raw = _encode_array(arr)
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(payload), len(raw))
        payload += raw
    blob = (MAGIC + struct.pack("<H", VERSION) + struct.pack("<I", len(cfg)) + cfg
            + struct.pack("<I", len(bundle.tensors)) + bytes(table) + bytes(payload))
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_bundle(path: str) -> ModelBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic; not a model file", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        config = json.loads(r.take(cfg_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"config blob is not valid JSON: {exc}", cfg_at) from exc
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError("tensor name is not valid UTF-8", at) from exc
        code, ndim = r.unpack("<BB", "dtype/ndim")
        if code not in _DTYPE_BY_CODE:
            raise ModelFormatError(f"unknown dtype code {code} for {name!r}", r.pos - 2)
        dims = r.unpack(f"<{ndim}I", "dims")
        offset, nbytes = r.unpack("<QQ", "offset/size")
        want = int(np.prod(dims, dtype=np.int64)) * _DTYPE_BY_CODE[code].itemsize
        if want != nbytes:
            raise ModelFormatError(
                f"size mismatch for {name!r}: table says {nbytes}, shape needs {want}", r.pos - 16)
        entries.append((name, code, dims, offset, nbytes))
    payload_at = r.pos
    payload = data[payload_at:]
    spans = sorted((e[3], e[3] + e[4], e[0]) for e in entries)
    prev_end = 0
    for start, end, name in spans:
        if start < prev_end:
            raise ModelFormatError(f"tensor {name!r} overlaps the previous entry",
                                   payload_at + start)
        if end > len(payload):
            raise ModelFormatError(f"tensor {name!r} runs past end of file",
                                   payload_at + start)
        prev_end = end
    tensors: dict[str, np.ndarray] = {}
    for name, code, dims, offset, nbytes in entries:
        if name in tensors:
            raise ModelFormatError(f"duplicate tensor name {name!r}")
        raw = payload[offset:offset + nbytes]
        tensors[name] = np.frombuffer(raw, dtype=_DTYPE_BY_CODE[code]).reshape(dims).copy()
    return ModelBundle(config=config, tensors=tensors)


def _all_batchnorms_folded(net: B.Layer) -> bool:
    states = [child.folded for _, child in _walk_layers(net) if isinstance(child, B.BatchNorm2d)]
    if states and any(states) and not all(states):
        raise ValueError("model has a mix of folded and unfolded batchnorms")
    return bool(states) and all(states)


def _walk_layers(layer: B.Layer, prefix: str = ""):
    yield prefix, layer
    for name, child in layer._children.items():
        yield from _walk_layers(child, prefix + name + ".")


def bundle_from_model(net: ClickSegNet) -> ModelBundle:
    """Snapshot a float model: params then buffers, in registration order."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in net.named_parameters():
        tensors[name] = p.data
    for name, b in net.named_buffers():
        tensors[name] = b
    config = {"model": net.config.to_dict(), "folded": _all_batchnorms_folded(net),
              "quantized": False}
    return ModelBundle(config=config, tensors=tensors)


def model_from_bundle(bundle: ModelBundle) -> ClickSegNet:
    cfg_blob = bundle.config
    for key in ("model", "folded", "quantized"):
        if key not in cfg_blob:
            raise ModelFormatError(f"config blob missing {key!r} field")
    config = ModelConfig.from_dict(cfg_blob["model"])
    net = ClickSegNet(config, make_rng(0))
    if cfg_blob["folded"]:
        from .quantize import fold_all_batchnorms
        fold_all_batchnorms(net)
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    seen = set()
    for name, arr in bundle.tensors.items():
        if name.endswith(SCALE_SUFFIX):
            continue
        if arr.dtype == np.int8:
            scale_name = name + SCALE_SUFFIX
            if scale_name not in bundle.tensors:
                raise ModelFormatError(f"int8 tensor {name!r} has no {SCALE_SUFFIX} companion")
            arr = arr.astype(np.float32) * bundle.tensors[scale_name]
        if name in params:
            target = params[name]
            if tuple(target.data.shape) != tuple(arr.shape):
                raise ModelFormatError(
                    f"shape mismatch for {name!r}: file {arr.shape}, model {target.data.shape}")
            target.data = arr.astype(target.data.dtype)
        elif name in buffers:
            if tuple(buffers[name].shape) != tuple(arr.shape):
                raise ModelFormatError(
                    f"shape mismatch for buffer {name!r}: file {arr.shape}, "
                    f"model {buffers[name].shape}")
            buffers[name][...] = arr
        else:
            raise ModelFormatError(f"file names a tensor the model does not have: {name!r}")
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise ModelFormatError(f"file is missing tensors: {sorted(missing)[:5]}")
    return net


def save_model(path: str, net: ClickSegNet) -> int:
    return save_bundle(path, bundle_from_model(net))


def load_model(path: str) -> tuple[ClickSegNet, ModelBundle]:
    bundle = load_bundle(path)
    return model_from_bundle(bundle), bundle
