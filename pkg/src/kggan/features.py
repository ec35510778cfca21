"""Labelled feature matrices and their text / binary file formats."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["FeatureSet", "PROVENANCES", "load_features", "save_features"]

PROVENANCES = ("seen", "unseen", "synthetic")
_BINARY_MAGIC = b"KGFEATS1"


@dataclass(frozen=True)
class FeatureSet:
    x: np.ndarray                 # (rows, dim)
    labels: tuple[str, ...]
    provenance: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {x.shape}")
        if len(self.labels) != x.shape[0] or len(self.provenance) != x.shape[0]:
            raise ValueError("labels and provenance need one entry per row")
        bad = set(self.provenance) - set(PROVENANCES)
        if bad:
            raise ValueError(f"unknown provenance tag(s) {sorted(bad)}")
        object.__setattr__(self, "x", x)

    @classmethod
    def build(cls, x, labels: Iterable[str], provenance: str | Iterable[str]) -> "FeatureSet":
        labels = tuple(labels)
        if isinstance(provenance, str):
            provenance = (provenance,) * len(labels)
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            x = x.reshape(len(labels), -1)
        return cls(x, labels, tuple(provenance))

    @classmethod
    def empty(cls, dim: int, dtype=np.float64) -> "FeatureSet":
        return cls(np.zeros((0, dim), dtype=dtype), (), ())

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def label_set(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.labels))

    def select(self, mask) -> "FeatureSet":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return FeatureSet(self.x[idx], tuple(self.labels[i] for i in idx),
                          tuple(self.provenance[i] for i in idx))

    def with_labels(self, labels: Sequence[str]) -> "FeatureSet":
        keep = set(labels)
        return self.select(np.array([y in keep for y in self.labels], dtype=bool))

    def rows_of(self, label: str) -> np.ndarray:
        return self.x[np.array([y == label for y in self.labels], dtype=bool)]

    @staticmethod
    def concat(parts: Sequence["FeatureSet"]) -> "FeatureSet":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        dims = {p.dim for p in parts}
        if len(dims) != 1:
            raise ValueError(f"feature dimensions differ: {sorted(dims)}")
        return FeatureSet(np.concatenate([p.x for p in parts], axis=0),
                          tuple(y for p in parts for y in p.labels),
                          tuple(t for p in parts for t in p.provenance))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.x.shape}".encode())
        h.update("\n".join(self.labels).encode())
        h.update("\n".join(self.provenance).encode())
        h.update(np.ascontiguousarray(self.x, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (self.labels == other.labels and self.provenance == other.provenance
                and self.x.shape == other.x.shape and np.array_equal(self.x, other.x))

    __hash__ = None


def save_features(fs: FeatureSet, path, binary: bool = False) -> None:
    """Text: ``features <rows> <dim>`` then ``label<TAB>prov<TAB>v1<TAB>v2...``.

    Binary: magic, uint32 rows/dim, length-prefixed UTF-8 label and
    provenance per row, then a float32 little-endian row-major payload.
    """
    path = Path(path)
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC)
            fh.write(struct.pack("<II", len(fs), fs.dim))
            for y, p in zip(fs.labels, fs.provenance):
                for s in (y, p):
                    b = s.encode("utf-8")
                    fh.write(struct.pack("<H", len(b)))
                    fh.write(b)
            fh.write(np.ascontiguousarray(fs.x, dtype="<f4").tobytes())
        return
    lines = [f"features {len(fs)} {fs.dim}"]
    for y, p, row in zip(fs.labels, fs.provenance, fs.x):
        lines.append("\t".join([y, p] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path) -> FeatureSet:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(_BINARY_MAGIC))
    if head == _BINARY_MAGIC:
        return _load_binary(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "features":
            raise ValueError("expected header 'features <rows> <dim>'")
        rows, dim = int(header[1]), int(header[2])
        labels, prov, data = [], [], []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != dim + 2:
                raise ValueError(f"line {lineno}: expected {dim} values, got {len(parts) - 2}")
            labels.append(parts[0])
            prov.append(parts[1])
            data.append([float(v) for v in parts[2:]])
    if len(labels) != rows:
        raise ValueError(f"header declares {rows} rows, found {len(labels)}")
    return FeatureSet(np.array(data, dtype=float).reshape(rows, dim), tuple(labels), tuple(prov))


def _load_binary(path: Path) -> FeatureSet:
    buf = path.read_bytes()
    off = len(_BINARY_MAGIC)
    rows, dim = struct.unpack_from("<II", buf, off)
    off += 8
    labels, prov = [], []
    for _ in range(rows):
        for out in (labels, prov):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            out.append(buf[off:off + n].decode("utf-8"))
            off += n
    x = np.frombuffer(buf, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
    return FeatureSet(x.astype(np.float32), tuple(labels), tuple(prov))
