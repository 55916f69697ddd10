"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MSRS" | version u32 | tensor count u64 | tensors...
            | optimizer tensor count u64 | tensors...
            | counter count u64 | (name, f64)...

A tensor is ``name_len u32, utf-8 name, ndim u32, dims u64 * ndim, f64 data``;
a counter is ``name_len u32, utf-8 name, f64 value``.
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .mask import MaskedParameter
from .optim import Moments
from .tasks import ACTIVATIONS, INIT_SCHEMES, Model, ModelSpec

__all__ = ["CheckpointError", "checkpoint_save", "checkpoint_load", "MAGIC", "VERSION"]

MAGIC = b"MSRS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _put_name(out: list, name: str) -> None:
    raw = name.encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)


def _put_tensor(out: list, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _put_name(out, name)
    out.append(struct.pack("<I", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.append(arr.tobytes())


def _spec_counters(spec: ModelSpec) -> dict:
    c = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        if f.name == "activation":
            v = ACTIVATIONS.index(v)
        elif f.name == "init":
            v = INIT_SCHEMES.index(v)
        c["spec." + f.name] = float(v)
    return c


def _spec_from_counters(c: dict) -> ModelSpec:
    kw = {}
    for f in fields(ModelSpec):
        v = c["spec." + f.name]
        if f.name == "activation":
            kw[f.name] = ACTIVATIONS[int(v)]
        elif f.name == "init":
            kw[f.name] = INIT_SCHEMES[int(v)]
        elif f.type in ("bool", bool):
            kw[f.name] = bool(v)
        elif f.type in ("int", int):
            kw[f.name] = int(v)
        else:
            kw[f.name] = float(v)
    return ModelSpec(**kw)


def checkpoint_save(path, model: Model, moments: dict[str, Moments] | None = None,
                    counters: dict | None = None, masks: dict | None = None) -> None:
    """Write model parameters, optional masks, optimizer moments and counters."""
    tensors: list[tuple[str, np.ndarray]] = []
    for k, mp in model.masked.items():
        tensors.append(("theta/" + k, mp.theta))
        tensors.append(("phi/" + k, mp.phi))
    for k, v in model.plain.items():
        tensors.append(("plain/" + k, v))
    for k, m in (masks or {}).items():
        tensors.append(("mask/" + k, m))
    opt: list[tuple[str, np.ndarray]] = []
    scalars = dict(_spec_counters(model.spec))
    first = next(iter(model.masked.values()))
    scalars["l_fwd"], scalars["l_bwd"] = float(first.l_fwd), float(first.l_bwd)
    for k, mom in (moments or {}).items():
        opt.append(("m/" + k, mom.m))
        opt.append(("v/" + k, mom.v))
        scalars["t/" + k] = float(mom.t)
    for k, v in (counters or {}).items():
        scalars[k] = float(v)

    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(tensors))]
    for name, arr in tensors:
        _put_tensor(out, name, arr)
    out.append(struct.pack("<Q", len(opt)))
    for name, arr in opt:
        _put_tensor(out, name, arr)
    out.append(struct.pack("<Q", len(scalars)))
    for name, v in scalars.items():
        _put_name(out, name)
        out.append(struct.pack("<d", v))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint reading {what} at offset {self.pos}: "
                f"expected {n} bytes, got {len(self.buf) - self.pos}")
        raw = self.buf[self.pos:self.pos + n]
        self.pos += n
        return raw

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self) -> str:
        (n,) = self.unpack("<I", "name length")
        return self.take(n, "name").decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.name()
        (ndim,) = self.unpack("<I", f"ndim of {name}")
        dims = self.unpack(f"<{ndim}Q", f"dims of {name}") if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(self.take(8 * count, f"data of {name}"), dtype="<f8")
        return name, data.astype(np.float64).reshape(dims)


def checkpoint_load(path) -> tuple[Model, dict[str, Moments], dict, dict]:
    """Inverse of :func:`checkpoint_save`: ``(model, moments, counters, masks)``."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4, expected {VERSION}")
    (n,) = r.unpack("<Q", "tensor count")
    tensors = dict(r.tensor() for _ in range(n))
    (n_opt,) = r.unpack("<Q", "optimizer tensor count")
    opt = dict(r.tensor() for _ in range(n_opt))
    (n_c,) = r.unpack("<Q", "counter count")
    scalars = {}
    for _ in range(n_c):
        name = r.name()
        (scalars[name],) = r.unpack("<d", f"counter {name}")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after offset {r.pos}")

    model = Model(spec=_spec_from_counters(scalars))
    masks = {}
    for key, arr in tensors.items():
        kind, name = key.split("/", 1)
        if kind == "theta":
            model.masked[name] = MaskedParameter(arr, tensors["phi/" + name], scalars["l_fwd"],
                                                 scalars["l_bwd"], name=name)
            model.roles[name] = "weight"
        elif kind == "plain":
            model.plain[name] = arr
        elif kind == "mask":
            masks[name] = arr
    for name in model.plain:
        model.roles[name] = _role(name)
    moments = {}
    for key in opt:
        if key.startswith("m/"):
            k = key[2:]
            moments[k] = Moments(opt[key], opt["v/" + k], int(scalars["t/" + k]))
    counters = {k: v for k, v in scalars.items()
                if not (k.startswith("spec.") or k.startswith("t/") or k in ("l_fwd", "l_bwd"))}
    return model, moments, counters, masks


def _role(name: str) -> str:
    if name.endswith(".ls"):
        return "layerscale"
    if ".ln." in name:
        return "norm"
    return "bias"
