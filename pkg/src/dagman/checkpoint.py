"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"DGMN" | u32 version | u32 meta_len | meta JSON | u32 n_tensors | entries | sha256 digest

Each entry is ``u16 name_len, name, u8 dtype_len, dtype, u8 ndim, u64 * ndim shape,
u64 nbytes, payload``. The digest covers everything between the magic and itself.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import PretrainConfig
from .errors import CheckpointError, ConfigMismatchError

MAGIC = b"DGMN"
VERSION = 1

_DTYPES = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.int64: "i64",
    torch.uint8: "u8",
}
_NP = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "u1"}


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> PretrainConfig:
        return PretrainConfig.from_dict(self.meta["config"])

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    body = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    body.write(struct.pack("<II", VERSION, len(meta)))
    body.write(meta)
    body.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        tag = _DTYPES[t.dtype].encode()
        payload = t.numpy().astype(_NP[_DTYPES[t.dtype]], copy=False).tobytes()
        nb = name.encode("utf-8")
        body.write(struct.pack("<H", len(nb)) + nb)
        body.write(struct.pack("<B", len(tag)) + tag)
        body.write(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}Q", *t.shape))
        body.write(struct.pack("<Q", len(payload)) + payload)
    raw = body.getvalue()
    Path(path).write_bytes(MAGIC + raw + hashlib.sha256(raw).digest())


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing file: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a DGMN checkpoint")
    if len(data) < 4 + 8 + 32:
        raise CheckpointError("truncated checkpoint")
    raw, digest = data[4:-32], data[-32:]
    if hashlib.sha256(raw).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, meta_len = struct.unpack_from("<II", raw, 0)
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    off = 8
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2:off + 2 + nl].decode("utf-8")
            off += 2 + nl
            (tl,) = struct.unpack_from("<B", raw, off)
            tag = raw[off + 1:off + 1 + tl].decode()
            off += 1 + tl
            (ndim,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{ndim}Q", raw, off + 1)
            off += 1 + 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", raw, off)
            off += 8
            arr = np.frombuffer(raw[off:off + nbytes], dtype=_NP[tag]).reshape(shape)
            off += nbytes
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt payload: {exc}") from exc
    if off != len(raw):
        raise CheckpointError("corrupt payload: trailing bytes")
    return Checkpoint(tensors, meta)


def _flatten(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def save_checkpoint(trainer, path) -> Checkpoint:
    """Snapshot a :class:`~dagman.trainer.Trainer` (student, teacher, centers, AdamW moments, RNG)."""
    tensors = {}
    tensors.update(_flatten("student", trainer.student.state_dict()))
    tensors.update(_flatten("teacher", trainer.teacher.state_dict()))
    tensors.update(_flatten("center", trainer.centers))
    name_of = {id(p): n for n, p in trainer.student.named_parameters()}
    for group in trainer.optimizer.param_groups:
        for p in group["params"]:
            st = trainer.optimizer.state.get(p)
            if not st:
                continue
            n = name_of[id(p)]
            for key, val in st.items():
                tensors[f"optim.{n}.{key}"] = torch.as_tensor(val)
    tensors["rng.torch"] = torch.get_rng_state()
    meta = {
        "format_version": VERSION,
        "step": trainer.step_num,
        "config": trainer.cfg.to_dict(),
        "counters": dict(trainer.counters),
    }
    ckpt = Checkpoint(tensors, meta)
    write_checkpoint(ckpt, path)
    return ckpt


def check_config(ckpt: Checkpoint, expected: PretrainConfig, section: str = "encoder") -> None:
    """Raise :class:`ConfigMismatchError` naming the first differing field of ``section``."""
    have = ckpt.meta["config"].get(section, {})
    want = expected.to_dict().get(section, {})
    for key in sorted(set(have) | set(want)):
        if have.get(key) != want.get(key):
            raise ConfigMismatchError(
                f"{section}.{key}: checkpoint has {have.get(key)!r}, expected {want.get(key)!r}",
                field=f"{section}.{key}",
            )


def load_checkpoint(path, expected: PretrainConfig | None = None):
    """Rebuild a :class:`~dagman.trainer.Trainer` from disk, optionally validating its encoder config."""
    from .trainer import Trainer

    ckpt = read_checkpoint(path)
    if expected is not None:
        check_config(ckpt, expected)
    trainer = Trainer(ckpt.config)
    trainer.student.load_state_dict(ckpt.group("student"))
    trainer.teacher.load_state_dict(ckpt.group("teacher"))
    trainer.centers = {k: v.clone() for k, v in ckpt.group("center").items()}
    name_to_param = dict(trainer.student.named_parameters())
    optim = ckpt.group("optim")
    for n, p in name_to_param.items():
        st = {key.rsplit(".", 1)[1]: v.clone() for key, v in optim.items() if key.rsplit(".", 1)[0] == n}
        if st:
            trainer.optimizer.state[p] = st
    if "rng.torch" in ckpt.tensors:
        torch.set_rng_state(ckpt.tensors["rng.torch"])
    trainer.step_num = ckpt.step
    trainer.counters.update(ckpt.meta.get("counters", {}))
    return trainer
