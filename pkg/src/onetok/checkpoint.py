"""Bit-exact checkpoint container.

Layout (all integers little-endian):

    magic "RPTK" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u32 dims
                | product(dims) float32 IEEE-754 values
    UTF-8 metadata blob
    u64 byte offset of the metadata blob (last 8 bytes of the file)

The metadata blob is structured text: the run-config echo followed by a
``[meta]`` section holding phase, step counter and any extra key = value
pairs (latent stats source, etc.). Tensors round-trip bit-exactly; loading
validates bounds before returning anything, so a truncated file never yields
partial state.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import DataFormatError

MAGIC = b"RPTK"
VERSION = 1
META_HEADER = "[meta]"


@dataclass
class Checkpoint:
    phase: str
    step: int
    tensors: dict
    config_text: str = ""
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _meta_blob(ckpt: Checkpoint) -> bytes:
    lines = [META_HEADER, f"phase = {ckpt.phase}", f"step = {ckpt.step}"]
    for k, v in ckpt.meta.items():
        lines.append(f"{k} = {v}")
    text = ckpt.config_text.rstrip("\n")
    blob = (text + "\n" if text else "") + "\n".join(lines) + "\n"
    return blob.encode("utf-8")


def _parse_meta_blob(blob: bytes, base_offset: int) -> tuple[str, dict]:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError("metadata blob is not valid UTF-8", offset=base_offset) from e
    lines = text.split("\n")
    try:
        split_at = len(lines) - 1 - lines[::-1].index(META_HEADER)
    except ValueError:
        raise DataFormatError("metadata blob missing [meta] section", offset=base_offset)
    config_text = "\n".join(lines[:split_at])
    meta = {}
    for line in lines[split_at + 1 :]:
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"malformed metadata line {line!r}", offset=base_offset)
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    return config_text, meta


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize atomically (temp file + rename); tensors stored as float32."""
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, tensor in ckpt.tensors.items():
        data = np.asarray(
            tensor.detach().cpu().to(torch.float32).numpy() if isinstance(tensor, Tensor) else tensor,
            dtype="<f4",
        )
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        if data.ndim > 0xFF:
            raise ValueError(f"tensor rank {data.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    meta_offset = sum(len(p) for p in parts)
    parts.append(_meta_blob(ckpt))
    parts.append(struct.pack("<Q", meta_offset))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 20:
        raise DataFormatError("file too short for header and trailer", offset=len(buf))
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    count = r.u32("tensor count")
    (meta_offset,) = struct.unpack("<Q", buf[-8:])
    if not 12 <= meta_offset <= len(buf) - 8:
        raise DataFormatError(f"metadata offset {meta_offset} out of bounds", offset=len(buf) - 8)
    tensors = {}
    for i in range(count):
        name_len = r.u16(f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        rank = r.u8(f"tensor {name!r} rank")
        dims = [r.u32(f"tensor {name!r} dim {j}") for j in range(rank)]
        numel = 1
        for d in dims:
            numel *= d
        raw = r.take(4 * numel, f"tensor {name!r} data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(tuple(dims)).copy()
        tensors[name] = torch.from_numpy(arr)
    if r.pos != meta_offset:
        raise DataFormatError(
            f"tensor section ends at {r.pos} but metadata offset says {meta_offset}", offset=r.pos
        )
    config_text, meta = _parse_meta_blob(buf[meta_offset:-8], meta_offset)
    phase = meta.pop("phase", None)
    step = meta.pop("step", None)
    if phase is None or step is None:
        raise DataFormatError("metadata missing phase or step", offset=meta_offset)
    try:
        step = int(step)
    except ValueError:
        raise DataFormatError(f"metadata step {step!r} is not an integer", offset=meta_offset)
    return Checkpoint(
        phase=phase, step=step, tensors=tensors, config_text=config_text, meta=meta, version=version
    )


def split_prefix(tensors: dict, prefix: str) -> dict:
    """Sub-store of tensors under ``prefix``, with the prefix stripped."""
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
