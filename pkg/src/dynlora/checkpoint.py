"""DLRA named-tensor checkpoint container.

Layout (little endian)::

    b"DLRA" | u32 version (=1) | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype | u8 ndim | ndim x u32 dims | payload

dtype codes: 0 = f32, 1 = f64, 2 = u8.

Model checkpoints store every backbone matrix *merged* (base + delta_W of its
adapter, if any).  Attached adapters are additionally kept unmerged under
``layer.<id>.lora.{base,a,b,w,active,alpha}`` so training can resume; an
adapter-free checkpoint has no ``lora`` entries at all.  Task heads are
``head.<t>``, and the model geometry is ``meta.model``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adapter import DynLoraAdapter, merge
from .model import GlyphTransformer, GlyphTransformerConfig, init_params
from .tensor import Tensor, precision

MAGIC = b"DLRA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_META_KEYS = ("image_side", "patch_side", "d_model", "n_heads", "n_layers", "d_ff")


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(entries: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    def need(off: int, n: int, what: str):
        if off + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", off)

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    off = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 2, "name")
        try:
            name = buf[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("entry name is not UTF-8", off) from exc
        off += nlen
        code, ndim = buf[off], buf[off + 1]
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code}", off)
        off += 2
        need(off, 4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(off, nbytes, f"payload of {name!r}")
        if name in entries:
            raise CheckpointFormatError(f"duplicate entry {name!r}", off)
        entries[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(buf):
        raise CheckpointFormatError(f"{len(buf) - off} trailing bytes", off)
    return entries


def write_entries(entries: dict[str, np.ndarray], path) -> int:
    data = encode(entries)
    Path(path).write_bytes(data)
    return len(data)


def read_entries(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def model_entries(model: GlyphTransformer, heads: list[np.ndarray] | None = None,
                  include_adapters: bool = True) -> dict[str, np.ndarray]:
    cfg = model.config
    entries = {"meta.model": np.array([getattr(cfg, k) for k in _META_KEYS], dtype=np.float64)}
    for name in model.backbone_names():
        entries[name] = model.params[name].data
    for lid, lin in model.linears.items():
        ad = lin.adapter
        if ad is None:
            continue
        entries[f"layer.{lid}"] = merge(ad)
        if include_adapters:
            pre = f"layer.{lid}.lora"
            entries[f"{pre}.base"] = ad.base.data
            entries[f"{pre}.a"] = ad.a.data
            entries[f"{pre}.b"] = ad.b.data
            entries[f"{pre}.w"] = ad.w.data
            entries[f"{pre}.active"] = ad.active.astype(np.uint8)
            entries[f"{pre}.alpha"] = np.array(ad.alpha, dtype=np.float64)
    for t, h in enumerate(heads if heads is not None else [model.params["head"].data]):
        entries[f"head.{t}"] = h
    return entries


def save_checkpoint(model: GlyphTransformer, path, heads: list[np.ndarray] | None = None,
                    include_adapters: bool = True) -> int:
    """Write ``model`` (and optionally every task head) to ``path``; returns the byte size."""
    return write_entries(model_entries(model, heads, include_adapters), path)


def model_from_entries(entries: dict[str, np.ndarray]) -> tuple[GlyphTransformer, list[np.ndarray]]:
    if "meta.model" not in entries:
        raise CheckpointFormatError("missing meta.model entry", 0)
    heads = []
    while f"head.{len(heads)}" in entries:
        heads.append(entries[f"head.{len(heads)}"])
    if not heads:
        raise CheckpointFormatError("checkpoint has no task head", 0)
    meta = dict(zip(_META_KEYS, (int(v) for v in entries["meta.model"])))
    cfg = GlyphTransformerConfig(**meta, n_classes=heads[-1].shape[0])
    dtype = entries["layer.0.q"].dtype if "layer.0.q" in entries else np.float32
    with precision(dtype):
        model = init_params(cfg, seed=0)
        for name in model.backbone_names():
            if name not in entries:
                raise CheckpointFormatError(f"missing tensor {name!r}", 0)
            model.params[name].data = entries[name].copy()
        model.params["head"].data = heads[-1].copy()
        for lid, lin in model.linears.items():
            pre = f"layer.{lid}.lora"
            if f"{pre}.a" not in entries:
                continue
            lin.weight.data = entries[f"{pre}.base"].copy()
            lin.adapter = DynLoraAdapter(
                lin.weight,
                Tensor(entries[f"{pre}.a"].copy(), requires_grad=True),
                Tensor(entries[f"{pre}.b"].copy(), requires_grad=True),
                Tensor(entries[f"{pre}.w"].copy(), requires_grad=True),
                entries[f"{pre}.active"].astype(bool),
                float(entries[f"{pre}.alpha"]),
                name=lid,
            )
    return model, [h.copy() for h in heads]


def load_checkpoint(path) -> tuple[GlyphTransformer, list[np.ndarray]]:
    """Rebuild the model (with any stored adapters attached) and its list of task heads."""
    return model_from_entries(read_entries(path))


def n_lora_entries(entries: dict[str, np.ndarray]) -> int:
    return sum(".lora." in k for k in entries)

