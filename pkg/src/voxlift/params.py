"""Named parameter store, Adam optimizer, and CKPT1 checkpoint format."""

from __future__ import annotations

import io
import struct

import numpy as np

from .autodiff import Tensor

__all__ = ["ParameterStore", "save_checkpoint", "load_checkpoint"]

_CKPT_MAGIC = b"CKPT1"


class ParameterStore:
    """Named trainable tensors plus per-parameter Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def parameter(self, name: str, init: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(init, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Standard Adam with bias correction; gradients are cleared after."""
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"adam_step with missing gradients: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.grad = None


def save_checkpoint(store: ParameterStore, path, extra: dict | None = None) -> None:
    """CKPT1: named-tensor table + float32 blobs, optimizer state included.

    Optimizer moments are stored as ``adam_m:<name>`` / ``adam_v:<name>``
    entries; ``extra`` holds small float arrays (e.g. schedule constants).
    """
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in store.params.items():
        entries.append((name, p.data))
    for name in store.params:
        entries.append((f"adam_m:{name}", store.m[name]))
        entries.append((f"adam_v:{name}", store.v[name]))
    for name, arr in (extra or {}).items():
        entries.append((f"extra:{name}", np.asarray(arr, dtype=np.float32)))

    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<QI", store.step_count, len(entries)))
    offset = 0
    blobs = []
    for name, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(struct.pack("<Q", offset))
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    for blob in blobs:
        buf.write(blob)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    """Returns ({name: float32 array}, step_count); names as written."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a CKPT1 checkpoint")
    off = len(_CKPT_MAGIC)
    step_count, count = struct.unpack_from("<QI", raw, off)
    off += struct.calcsize("<QI")
    metas = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        (data_off,) = struct.unpack_from("<Q", raw, off)
        off += 8
        metas.append((name, shape, data_off))
    base = off
    out = {}
    for name, shape, data_off in metas:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=base + data_off)
        out[name] = arr.reshape(shape).copy()
    return out, step_count


def restore_store(named: dict[str, np.ndarray], step_count: int) -> ParameterStore:
    """Rebuild a ParameterStore from :func:`load_checkpoint` output."""
    store = ParameterStore()
    store.step_count = step_count
    for name, arr in named.items():
        if name.startswith(("adam_m:", "adam_v:", "extra:")):
            continue
        store.parameter(name, arr)
    for name in list(store.params):
        if f"adam_m:{name}" in named:
            store.m[name] = named[f"adam_m:{name}"].copy()
            store.v[name] = named[f"adam_v:{name}"].copy()
    return store


def apply_checkpoint(store: ParameterStore, named: dict[str, np.ndarray], step_count: int) -> None:
    """Load weights/moments into an already-constructed store, shape-checked."""
    for name, p in store.params.items():
        if name not in named:
            raise KeyError(f"checkpoint missing parameter {name}")
        if named[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data[...] = named[name]
        store.m[name][...] = named[f"adam_m:{name}"]
        store.v[name][...] = named[f"adam_v:{name}"]
    store.step_count = step_count
