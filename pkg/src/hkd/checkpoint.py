"""Binary checkpoint of named tensors plus a JSON sidecar.

Binary layout (little-endian)::

    b"HKD1"
    u32  tensor count
    per tensor:
        u16  name length, then the UTF-8 name
        u8   rank
        u32  each dimension
        f32  values, row-major

The sidecar ``<basename>.json`` holds the format version, model config,
label and vocabulary lists, and training metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from hkd.corpus import LabelSet, Vocabulary
from hkd.model import HierarchicalLabeler, ModelConfig

MAGIC = b"HKD1"
FORMAT_VERSION = 1


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return tensors


def save_checkpoint(path, model: HierarchicalLabeler, vocab: Vocabulary, labels: LabelSet, metadata=None, optimizer=None) -> None:
    path = Path(path)
    write_tensors(path, model.state_dict())
    side = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "labels": list(labels.labels),
        "vocab": vocab.tokens[2:],
        "metadata": metadata or {},
    }
    if optimizer is not None:
        st = optimizer.state
        opt_tensors = {f"m/{k}": v for k, v in st.m.items()}
        opt_tensors.update({f"v/{k}": v for k, v in st.v.items()})
        write_tensors(path.with_suffix(".optim"), opt_tensors)
        side["optimizer"] = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
    sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, vocab, labels, sidecar dict)."""
    path = Path(path)
    side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    if side.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {side.get('format_version')}")
    config = ModelConfig.from_dict(side["config"])
    model = HierarchicalLabeler(config, seed=0, dtype=dtype)
    model.load_state_dict(read_tensors(path))
    return model, Vocabulary(side["vocab"]), LabelSet(side["labels"]), side


def file_hash(path) -> str:
    h = hashlib.sha256()
    for p in (Path(path), sidecar_path(path)):
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()
