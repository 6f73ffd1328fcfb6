"""Binary checkpoints.

Layout::

    b"MLIONCK\\0"                    8-byte magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON (sorted keys)
    payload                          float64 little-endian arrays

The header lists every parameter (name, shape, group, trainable flag) in
store order; the payload holds their values in that order, followed by the
optimizer moments (``m`` then ``v``) of the names the header lists under
``optimizer``. ``save`` then ``load`` restores every byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import ParamStore
from .tensor import Rng

MAGIC = b"MLIONCK\x00"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TrailingDataError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    rng: Rng
    model_config: dict | None = None
    provenance: dict = field(default_factory=dict)
    opt_t: int = 0
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)


def _to_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_LE_F64).tobytes()


def dumps(params: ParamStore, rng: Rng, *, model_config: dict | None = None,
          provenance: dict | None = None, opt=None) -> bytes:
    """Serialise to bytes. ``opt`` is an object with ``t``, ``m``, ``v``."""
    tensors = [
        {"name": n, "shape": list(p.tensor.shape), "group": p.group, "trainable": p.trainable}
        for n, p in params.items()
    ]
    opt_names = [n for n in params if opt is not None and n in opt.m]
    header = {
        "format_version": FORMAT_VERSION,
        "tensors": tensors,
        "rng_state": rng.state,
        "model_config": model_config,
        "provenance": provenance or {},
        "optimizer": None if opt is None else {"t": opt.t, "names": opt_names},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(head)), head]
    chunks += [_to_bytes(params[n].data) for n in params]
    if opt is not None:
        chunks += [_to_bytes(opt.m[n]) for n in opt_names]
        chunks += [_to_bytes(opt.v[n]) for n in opt_names]
    return b"".join(chunks)


def save(path: str | Path, params: ParamStore, rng: Rng, **kw) -> str:
    """Write a checkpoint; returns the sha256 of the file."""
    data = dumps(params, rng, **kw)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_header(data: bytes) -> tuple[dict, int]:
    """Parse magic and header; returns (header, payload offset)."""
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("not a checkpoint: bad magic")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(data):
        raise CorruptHeaderError("header runs past the end of the file")
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptHeaderError(f"unreadable header: {e}") from None
    if not isinstance(header, dict) or "format_version" not in header:
        raise CorruptHeaderError("header lacks a format version")
    if header["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format {header['format_version']} (this build reads {FORMAT_VERSION})")
    for key in ("tensors", "rng_state"):
        if key not in header:
            raise CorruptHeaderError(f"header lacks {key!r}")
    return header, start + n


def _expected_size(header: dict) -> int:
    n = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    opt = header.get("optimizer")
    if opt:
        sizes = {t["name"]: int(np.prod(t["shape"])) for t in header["tensors"]}
        n += 2 * sum(sizes[name] for name in opt["names"])
    return 8 * n


def loads(data: bytes) -> Checkpoint:
    header, off = read_header(data)
    need = _expected_size(header)
    have = len(data) - off
    if have < need:
        raise TruncatedPayloadError(f"payload holds {have} bytes, header declares {need}")
    if have > need:
        raise TrailingDataError(f"{have - need} bytes after the declared payload")

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=_LE_F64, count=count, offset=off)
        off += 8 * count
        return arr.astype(np.float64).reshape(shape)

    store = ParamStore()
    shapes = {}
    try:
        for t in header["tensors"]:
            store.add(t["name"], take(t["shape"]), t["group"])
            p = store.param(t["name"])
            p.trainable = bool(t["trainable"])
            p.tensor.requires_grad = p.trainable
            shapes[t["name"]] = t["shape"]
    except (KeyError, TypeError) as e:
        raise CorruptHeaderError(f"bad tensor entry: {e}") from None
    ck = Checkpoint(store, Rng(0), header.get("model_config"), header.get("provenance") or {})
    ck.rng.state = int(header["rng_state"])
    opt = header.get("optimizer")
    if opt:
        ck.opt_t = int(opt["t"])
        ck.opt_m = {n: take(shapes[n]) for n in opt["names"]}
        ck.opt_v = {n: take(shapes[n]) for n in opt["names"]}
    return ck


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def describe(path: str | Path) -> dict:
    """Header summary for inspection; validates the payload size too."""
    ck = load(path)
    groups: dict[str, int] = {}
    for n, p in ck.params.items():
        groups[p.group] = groups.get(p.group, 0) + p.tensor.numel()
    return {
        "format_version": FORMAT_VERSION,
        "n_tensors": len(ck.params),
        "n_elements": ck.params.num_elements(),
        "groups": groups,
        "trainable": sorted({p.group for _, p in ck.params.items() if p.trainable}),
        "provenance": ck.provenance,
        "has_optimizer": bool(ck.opt_m),
        "sha256": file_hash(path),
    }
