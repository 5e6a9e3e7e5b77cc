"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"HYLG"  u32 version  u32 entry_count
    entry*:  u16 name_len  name (utf-8)  u8 rank  u32 dims[rank]  f32 payload[prod(dims)]

Parameters use their module path as name. Reserved prefixes carry the rest:
``adam.m/<param>``, ``adam.v/<param>``, ``adam.t``, ``__step__``,
``__actnorm__/<module>`` (1.0 once the data-dependent initialisation ran) and
``__config__``: UTF-8 JSON bytes, one byte per float, holding the config
snapshot and the Adam hyperparameters. Values are not checksummed in version 1: a flipped payload
byte only fails to load if it breaks the structure.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import FormatError
from .optim import AdamState

MAGIC = b"HYLG"
VERSION = 1
_CONFIG = "__config__"
_STEP = "__step__"
_ACTNORM = "__actnorm__/"
_ADAM_M = "adam.m/"
_ADAM_V = "adam.v/"
_ADAM_T = "adam.t"
_RESERVED = (_CONFIG, _STEP, _ACTNORM, _ADAM_M, _ADAM_V, _ADAM_T)


@dataclass
class CheckpointBundle:
    params: Dict[str, np.ndarray]
    config: dict
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    actnorm_initialized: Dict[str, bool] = field(default_factory=dict)


def encode_entries(entries: List[Tuple[str, np.ndarray]]) -> bytes:
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise FormatError(f"duplicate checkpoint entry {dup!r}")
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_entries(raw: bytes) -> List[Tuple[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries = []
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("checkpoint entry name is not UTF-8") from None
        if name in seen:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        seen.add(name)
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        entries.append((name, arr))
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last checkpoint entry")
    return entries


def bundle_entries(b: CheckpointBundle) -> List[Tuple[str, np.ndarray]]:
    entries = []
    for name, arr in b.params.items():
        if name.startswith(_RESERVED):
            raise FormatError(f"parameter name {name!r} uses a reserved prefix")
        entries.append((name, arr))
    for name, arr in b.adam.m.items():
        entries.append((_ADAM_M + name, arr))
    for name, arr in b.adam.v.items():
        entries.append((_ADAM_V + name, arr))
    a = b.adam
    entries.append((_ADAM_T, np.array(float(a.t))))
    entries.append((_STEP, np.array(float(b.step))))
    for name, flag in b.actnorm_initialized.items():
        entries.append((_ACTNORM + name, np.array(1.0 if flag else 0.0)))
    snapshot = {"config": b.config, "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}}
    cfg = json.dumps(snapshot, sort_keys=True).encode("utf-8")
    entries.append((_CONFIG, np.frombuffer(cfg, dtype=np.uint8).astype(np.float32)))
    return entries


def bundle_from_entries(entries: List[Tuple[str, np.ndarray]]) -> CheckpointBundle:
    params, m, v, actnorm = {}, {}, {}, {}
    snapshot, step, t = {}, 0, 0
    for name, arr in entries:
        if name.startswith(_ADAM_M):
            m[name[len(_ADAM_M):]] = arr
        elif name.startswith(_ADAM_V):
            v[name[len(_ADAM_V):]] = arr
        elif name.startswith(_ACTNORM):
            actnorm[name[len(_ACTNORM):]] = bool(arr.reshape(-1)[0])
        elif name == _ADAM_T:
            t = int(arr.reshape(-1)[0])
        elif name == _STEP:
            step = int(arr.reshape(-1)[0])
        elif name == _CONFIG:
            try:
                snapshot = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"unreadable config snapshot: {exc}") from None
        else:
            params[name] = arr
    adam = AdamState(t=t, m=m, v=v, **snapshot.get("adam", {}))
    return CheckpointBundle(params, snapshot.get("config", {}), adam, step, actnorm)


def save_checkpoint(path, bundle: CheckpointBundle) -> None:
    from .data import _atomic_write

    _atomic_write(Path(path), encode_entries(bundle_entries(bundle)))


def load_checkpoint(path) -> CheckpointBundle:
    return bundle_from_entries(decode_entries(Path(path).read_bytes()))
