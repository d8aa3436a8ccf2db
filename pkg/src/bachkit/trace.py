"""Attention traces and their binary container.

A trace holds per-(step, layer) attention internals captured during a
denoising run: head-averaged video-to-text weight slices, attention outputs,
and pre-rotary key/value rows. Traces round-trip bit-exactly through a small
binary container (magic "BVTR"): a fixed-size little-endian entry table
followed by raw float32 payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dit import Hooks
from .tensorops import DTYPE

MAGIC = b"BVTR"
VERSION = 1

FIELD_V2T = 1
FIELD_ATTN_OUT = 2
FIELD_PRE_K = 3
FIELD_PRE_V = 4

FIELD_NAMES = {
    FIELD_V2T: "v2t",
    FIELD_ATTN_OUT: "attn_out",
    FIELD_PRE_K: "pre_k",
    FIELD_PRE_V: "pre_v",
}
FIELD_TAGS = {name: tag for tag, name in FIELD_NAMES.items()}

_HEADER = struct.Struct("<4sHHI")
_ENTRY = struct.Struct("<IIHHIIQ")


def write_container(entries: list[tuple[int, int, int, np.ndarray]], path) -> None:
    """Write (step, layer, field-tag, matrix) entries; sorted, f32 LE."""
    norm = []
    for step, layer, tag, arr in entries:
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        if a.ndim != 2:
            raise ValueError(f"container entries must be matrices, got shape {a.shape}")
        if tag not in FIELD_NAMES:
            raise ValueError(f"unknown field tag {tag}")
        norm.append((int(step), int(layer), int(tag), a))
    norm.sort(key=lambda e: (e[0], e[1], e[2]))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, len(norm)))
        offset = 0
        for step, layer, tag, a in norm:
            fh.write(_ENTRY.pack(step, layer, tag, 0, a.shape[0], a.shape[1], offset))
            offset += a.nbytes
        for _, _, _, a in norm:
            fh.write(a.tobytes())


def read_container(path) -> list[tuple[int, int, int, np.ndarray]]:
    """Read back (step, layer, field-tag, matrix) entries from a container."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ValueError("not a trace container (bad magic)")
    magic, version, _, count = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    table_end = _HEADER.size + count * _ENTRY.size
    out = []
    for i in range(count):
        step, layer, tag, _, rows, cols, offset = _ENTRY.unpack_from(
            raw, _HEADER.size + i * _ENTRY.size
        )
        start = table_end + offset
        end = start + rows * cols * 4
        if end > len(raw):
            raise ValueError("container truncated")
        a = np.frombuffer(raw[start:end], dtype="<f4").reshape(rows, cols).astype(DTYPE)
        out.append((step, layer, tag, a))
    return out


@dataclass(frozen=True)
class CaptureFlags:
    """What a recorder keeps. `steps`/`layers` of None capture everything."""

    v2t: bool = True
    attn_out: bool = False
    pre_k: bool = False
    pre_v: bool = False
    steps: frozenset[int] | None = None
    layers: frozenset[int] | None = None

    @classmethod
    def all(cls) -> "CaptureFlags":
        return cls(v2t=True, attn_out=True, pre_k=True, pre_v=True)

    def wants(self, step: int, layer: int) -> bool:
        if self.steps is not None and step not in self.steps:
            return False
        if self.layers is not None and layer not in self.layers:
            return False
        return self.v2t or self.attn_out or self.pre_k or self.pre_v


@dataclass
class AttentionTrace:
    """Captured attention internals keyed by (step, layer, field name)."""

    entries: dict[tuple[int, int, str], np.ndarray] = field(default_factory=dict)

    def put(self, step: int, layer: int, name: str, value: np.ndarray) -> None:
        if name not in FIELD_TAGS:
            raise ValueError(f"unknown trace field {name!r}")
        self.entries[(step, layer, name)] = value

    def get(self, step: int, layer: int, name: str) -> np.ndarray:
        key = (step, layer, name)
        if key not in self.entries:
            raise KeyError(f"trace holds no {name!r} at step {step} layer {layer}")
        return self.entries[key]

    def has(self, step: int, layer: int, name: str) -> bool:
        return (step, layer, name) in self.entries

    def layer_slices(self, step: int, layers, name: str) -> list[np.ndarray]:
        return [self.get(step, layer, name) for layer in layers]

    def steps(self) -> list[int]:
        return sorted({k[0] for k in self.entries})

    def layers(self) -> list[int]:
        return sorted({k[1] for k in self.entries})

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.entries.values())

    def save(self, path) -> None:
        write_container(
            [(s, l, FIELD_TAGS[n], a) for (s, l, n), a in self.entries.items()], path
        )

    @classmethod
    def load(cls, path) -> "AttentionTrace":
        trace = cls()
        for step, layer, tag, a in read_container(path):
            trace.put(step, layer, FIELD_NAMES[tag], a)
        return trace


class TraceRecorder(Hooks):
    """Observation hook filling an AttentionTrace; never alters the run."""

    def __init__(self, flags: CaptureFlags | None = None):
        self.flags = flags if flags is not None else CaptureFlags()
        self.trace = AttentionTrace()

    def observe(self, step, layer, *, v2t, attn_out, pre_k, pre_v) -> None:
        f = self.flags
        if not f.wants(step, layer):
            return
        if f.v2t:
            self.trace.put(step, layer, "v2t", v2t.copy())
        if f.attn_out:
            self.trace.put(step, layer, "attn_out", attn_out.copy())
        if f.pre_k:
            self.trace.put(step, layer, "pre_k", pre_k.copy())
        if f.pre_v:
            self.trace.put(step, layer, "pre_v", pre_v.copy())
