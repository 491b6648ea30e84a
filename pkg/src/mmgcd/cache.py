"""Binary cache of frozen visual and pseudo text embeddings per instance.

Layout (little endian)::

    magic       8 bytes  b"MMGCDEMB"
    version     uint32
    n           uint64
    dim_v       uint32
    dim_t       uint32
    float width uint32   (always 4)
    ids         n records of (uint32 byte length, utf-8 bytes), sorted
    z_v         n * dim_v float32, row-major
    z_t         n * dim_t float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidStateError

MAGIC = b"MMGCDEMB"
VERSION = 1
FLOAT_WIDTH = 4
_HEADER = struct.Struct("<8sIQIII")
_LEN = struct.Struct("<I")


@dataclass
class EmbeddingCache:
    ids: list
    z_v: np.ndarray
    z_t: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.z_v = np.ascontiguousarray(self.z_v, dtype="<f4")
        self.z_t = np.ascontiguousarray(self.z_t, dtype="<f4")
        n = len(self.ids)
        if self.z_v.ndim != 2 or self.z_t.ndim != 2:
            raise ValueError("embedding payloads must be 2-D")
        if self.z_v.shape[0] != n or self.z_t.shape[0] != n:
            raise ValueError(f"{n} ids but {self.z_v.shape[0]}/{self.z_t.shape[0]} embedding rows")
        if self.ids != sorted(self.ids):
            raise ValueError("cache ids must be sorted")
        if len(set(self.ids)) != n:
            raise ValueError("cache ids must be unique")

    @property
    def n(self):
        return len(self.ids)

    @property
    def dims(self):
        return self.z_v.shape[1], self.z_t.shape[1]

    def row(self, instance_id):
        """``(z_v, z_t)`` for one instance id."""
        pos = self._positions().get(str(instance_id))
        if pos is None:
            raise KeyError(instance_id)
        return self.z_v[pos], self.z_t[pos]

    def take(self, ids):
        """Stack rows for ``ids`` in the given order."""
        pos = self._positions()
        try:
            rows = [pos[str(i)] for i in ids]
        except KeyError as exc:
            raise KeyError(f"id {exc.args[0]!r} is not in the cache") from None
        return self.z_v[rows], self.z_t[rows]

    def _positions(self):
        return {i: r for r, i in enumerate(self.ids)}

    @classmethod
    def from_unsorted(cls, ids, z_v, z_t):
        order = np.argsort(np.asarray([str(i) for i in ids]), kind="stable")
        ids = [str(ids[r]) for r in order]
        return cls(ids, np.asarray(z_v)[order], np.asarray(z_t)[order])


def write_cache(cache: EmbeddingCache, path):
    dim_v, dim_t = cache.dims
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, cache.n, dim_v, dim_t, FLOAT_WIDTH))
            for i in cache.ids:
                raw = i.encode("utf-8")
                fh.write(_LEN.pack(len(raw)))
                fh.write(raw)
            fh.write(cache.z_v.tobytes(order="C"))
            fh.write(cache.z_t.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write embedding cache {path}: {exc}") from exc


def read_cache(path) -> EmbeddingCache:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise InvalidStateError(f"embedding cache {path} does not exist") from None
    except OSError as exc:
        raise OSError(f"cannot read embedding cache {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, dim_v, dim_t, width = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path} is not an embedding cache")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    if width != FLOAT_WIDTH:
        raise ValueError(f"{path}: unsupported float width {width}")
    off = _HEADER.size
    ids = []
    for _ in range(n):
        if off + _LEN.size > len(data):
            raise ValueError(f"{path}: truncated id table")
        (length,) = _LEN.unpack_from(data, off)
        off += _LEN.size
        ids.append(data[off:off + length].decode("utf-8"))
        off += length
    payload = n * (dim_v + dim_t) * FLOAT_WIDTH
    if len(data) - off != payload:
        raise ValueError(f"{path}: payload is {len(data) - off} bytes, expected {payload}")
    z_v = np.frombuffer(data, dtype="<f4", count=n * dim_v, offset=off).reshape(n, dim_v)
    z_t = np.frombuffer(data, dtype="<f4", count=n * dim_t, offset=off + n * dim_v * 4).reshape(n, dim_t)
    return EmbeddingCache(ids, z_v.copy(), z_t.copy())


def export_embeddings(tes, dataset, encoders=None) -> EmbeddingCache:
    """Frozen joint embeddings and pseudo text embeddings for every instance."""
    import torch

    from .data import dataset_payloads

    if not dataset:
        raise ValueError("dataset is empty")
    encoders = tes.encoders if encoders is None else encoders
    ids = [inst.instance_id for inst in dataset]
    with torch.no_grad():
        _, z_v = encoders.encode_images(dataset_payloads(dataset))
        z_t = tes.synthesize(z_v)
    return EmbeddingCache.from_unsorted(ids, z_v.cpu().numpy(), z_t.cpu().numpy())
