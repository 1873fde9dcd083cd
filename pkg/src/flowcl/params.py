"""Flat parameter vectors with named segments, bindings, and checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tape, Tensor, current_tape
from .errors import CheckpointError, ShapeMismatch

_MAGIC = b"FLOWCKPT1\n"
_VERSION = 1


class Segment:
    __slots__ = ("name", "offset", "shape", "size")

    def __init__(self, name: str, offset: int, shape: tuple):
        self.name = name
        self.offset = offset
        self.shape = tuple(int(s) for s in shape)
        self.size = int(np.prod(self.shape)) if self.shape else 1


class ParamVector:
    """All trainable weights as one flat float64 vector with named slices.

    Segments are contiguous, non-overlapping, and cover the full vector;
    the layout is fixed for a given architecture.
    """

    def __init__(self, values: np.ndarray, segments: list[Segment]):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.segments = segments
        self._by_name = {s.name: s for s in segments}
        self._validate()

    def _validate(self):
        offset = 0
        for seg in self.segments:
            if seg.offset != offset:
                raise ValueError(f"segment '{seg.name}' not contiguous at {offset}")
            offset += seg.size
        if offset != self.values.size:
            raise ValueError(f"segments cover {offset} values, vector has {self.values.size}")
        if len(self._by_name) != len(self.segments):
            raise ValueError("duplicate segment names")

    @classmethod
    def build(cls, named_arrays: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        segments, chunks, offset = [], [], 0
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            segments.append(Segment(name, offset, arr.shape))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, segments)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def view(self, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped to its declared shape."""
        seg = self._by_name[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def segment_of_index(self, i: int) -> str:
        for seg in self.segments:
            if seg.offset <= i < seg.offset + seg.size:
                return seg.name
        raise IndexError(i)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.segments)

    def same_layout(self, other: "ParamVector") -> bool:
        return (len(self) == len(other)
                and all(a.name == b.name and a.shape == b.shape
                        for a, b in zip(self.segments, other.segments)))


class ParamBinding:
    """Per-evaluation bridge from a ParamVector to differentiable leaves.

    Each segment becomes one leaf tensor viewing the flat vector. After
    ``backward`` the per-segment gradients reassemble into a ParamVector
    with the same layout.
    """

    def __init__(self, params: ParamVector, tape: Optional[Tape] = None):
        self.params = params
        tape = tape if tape is not None else current_tape()
        self.leaves: dict[str, Tensor] = {}
        for seg in params.segments:
            t = Tensor(params.view(seg.name), requires=tape is not None, op="leaf")
            self.leaves[seg.name] = t
            if tape is not None:
                tape.register_leaf(t)
        if tape is not None:
            if tape.binding is not None:
                raise ValueError("tape already has a parameter binding")
            tape.binding = self

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def grad_vector(self) -> ParamVector:
        grad = np.zeros(len(self.params))
        for seg in self.params.segments:
            g = self.leaves[seg.name].grad
            if g is not None:
                grad[seg.offset:seg.offset + seg.size] = g.ravel()
        return ParamVector(grad, self.params.segments)


def save_checkpoint(params: ParamVector, path: str):
    """Write a versioned binary checkpoint; float64 round-trips bit-exact.

    The write is atomic (temp file + rename) so concurrent readers never see
    a partial file.
    """
    header = {
        "version": _VERSION,
        "dtype": "<f8",
        "total": len(params),
        "segments": [
            {"name": s.name, "offset": s.offset, "shape": list(s.shape)}
            for s in params.segments
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = params.values.astype("<f8").tobytes()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> ParamVector:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header["total"]:
        raise CheckpointError(f"{path}: payload has {values.size} values, "
                              f"header says {header['total']}")
    segments = [Segment(s["name"], s["offset"], tuple(s["shape"]))
                for s in header["segments"]]
    return ParamVector(values.copy(), segments)
