"""Constant-size hashed embedding tables.

Raw 64-bit IDs are mapped to rows by ``splitmix64(id ^ splitmix64(seed)) mod
n_slots``. Each table carries per-coordinate Adagrad state and tracks which
raw IDs and slots it has seen, so parameter growth and collision rates can be
reported for any training run.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

CKPT_MAGIC = b"UCREMBT\x00"
CKPT_VERSION = 1
# magic(8) | version u16 | flags u16 | dim u32 | n_slots u64 | hash_seed u64
_CKPT_HEADER = struct.Struct("<8sHHIQQ")
FLAG_OPTIMIZER_STATE = 1

_EMPTY = np.uint64(0xFFFFFFFFFFFFFFFF)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GrowthReport:
    distinct_raw_ids: int
    active_params: int
    collision_rate: float
    distinct_slots: int


class HyperLogLog:
    """Cardinality sketch over uint64 IDs (2**p registers)."""

    def __init__(self, p: int = 14, seed: int = 0x5EED):
        self.p = p
        self.seed = seed
        self.registers = np.zeros(1 << p, dtype=np.uint8)

    def add(self, ids: np.ndarray) -> None:
        h = kernels.mix64(np.asarray(ids, dtype=np.uint64) ^ np.uint64(self.seed))
        idx = (h >> np.uint64(64 - self.p)).astype(np.int64)
        rest = (h << np.uint64(self.p)) | np.uint64(1 << (self.p - 1))
        # rank = leading zeros of the remaining bits + 1; the sentinel bit bounds it
        lz = np.zeros(len(h), dtype=np.uint8)
        for shift in (32, 16, 8, 4, 2, 1):
            top_clear = (rest >> np.uint64(64 - shift)) == 0
            lz[top_clear] += shift
            rest[top_clear] <<= np.uint64(shift)
        np.maximum.at(self.registers, idx, lz + 1)

    def estimate(self) -> float:
        m = len(self.registers)
        alpha = 0.7213 / (1 + 1.079 / m)
        est = alpha * m * m / np.sum(2.0 ** -self.registers.astype(np.float64))
        zeros = int(np.count_nonzero(self.registers == 0))
        if est <= 2.5 * m and zeros:
            est = m * np.log(m / zeros)
        return float(est)


class HashedEmbeddingTable:
    def __init__(self, n_slots: int, dim: int, hash_seed: int = 0, dtype="float32",
                 tracker: str = "exact", allocate: bool = True):
        if n_slots < 1 or dim < 1:
            raise ValueError("n_slots and dim must be positive")
        if tracker not in ("exact", "hll"):
            raise ValueError(f"unknown tracker {tracker!r}")
        self.n_slots = int(n_slots)
        self.dim = int(dim)
        self.hash_seed = int(hash_seed)
        self.dtype = np.dtype(dtype)
        self.tracker = tracker
        if allocate:
            self.values = np.zeros((self.n_slots, self.dim), dtype=self.dtype)
            self.acc = np.zeros((self.n_slots, self.dim), dtype=self.dtype)
        self.reset_tracking()

    def reset_tracking(self) -> None:
        self._owner = np.full(self.n_slots, _EMPTY, dtype=np.uint64)
        self._occupied = np.zeros(self.n_slots, dtype=bool)
        self._distinct_slots = 0
        self._seen: set[int] = set()
        self._hll = HyperLogLog() if self.tracker == "hll" else None
        self.collisions = 0

    # -- hashing / lookup -------------------------------------------------

    def slots(self, raw_ids) -> np.ndarray:
        return kernels.hash_slots(np.asarray(raw_ids, dtype=np.uint64).ravel(),
                                  self.hash_seed, self.n_slots)

    def init(self, scale: float | None = None, rng: np.random.Generator | None = None):
        """Fill rows i.i.d. uniform on [-scale, scale]; scale defaults to 1/sqrt(d)."""
        scale = 1.0 / np.sqrt(self.dim) if scale is None else float(scale)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.values[...] = rng.uniform(-scale, scale, size=self.values.shape)
        self.acc[...] = 0
        return self

    def lookup(self, raw_id):
        """Row for a single raw ID as a read-only view."""
        slot = int(self.slots([raw_id])[0])
        self.track([raw_id], np.array([slot]))
        row = self.values[slot]
        row.flags.writeable = False
        return row

    def lookup_batch(self, raw_ids: np.ndarray, track: bool = True):
        """Rows for an array of raw IDs; returns ``(slots, rows)`` shaped like the input."""
        raw_ids = np.asarray(raw_ids, dtype=np.uint64)
        slots = self.slots(raw_ids)
        if track:
            self.track(raw_ids.ravel(), slots)
        return slots.reshape(raw_ids.shape), self.values[slots].reshape(*raw_ids.shape, self.dim)

    def track(self, raw_ids, slots) -> None:
        raw_ids = np.asarray(raw_ids, dtype=np.uint64).ravel()
        slots = np.asarray(slots, dtype=np.int64).ravel()
        if len(raw_ids) == 0:
            return
        known = self._owner[slots] == raw_ids
        if known.all():
            return
        cand, first = np.unique(raw_ids[~known], return_index=True)
        cand_slots = slots[~known][first]
        if self._hll is not None:
            self._hll.add(cand)
        for rid, s in zip(cand.tolist(), cand_slots.tolist()):
            if self._hll is None:
                if rid in self._seen:
                    continue
                self._seen.add(rid)
            if self._occupied[s]:
                if self._hll is None:
                    self.collisions += 1
            else:
                self._occupied[s] = True
                self._owner[s] = rid
                self._distinct_slots += 1

    # -- optimisation -------------------------------------------------------

    def apply_sparse_grads(self, slots, grads, lr: float, eps: float = 1e-8) -> None:
        """Adagrad step on the given rows; duplicate slots are summed first."""
        slots = np.asarray(slots, dtype=np.int64).ravel()
        grads = np.asarray(grads, dtype=np.float64).reshape(len(slots), self.dim)
        if len(slots) == 0:
            return
        bad = ~np.isfinite(grads).all(axis=1)
        if bad.any():
            raise TrainingError(f"non-finite gradient for slot {int(slots[bad][0])}")
        uniq, inv = np.unique(slots, return_inverse=True)
        summed = np.zeros((len(uniq), self.dim), dtype=np.float64)
        np.add.at(summed, inv, grads)
        kernels.adagrad_rows(self.values, self.acc, uniq, summed.astype(self.dtype), lr, eps)

    # -- accounting -------------------------------------------------------

    @property
    def allocated_params(self) -> int:
        return self.n_slots * self.dim

    def distinct_raw_ids(self) -> int:
        if self._hll is not None:
            return int(round(self._hll.estimate()))
        return len(self._seen)

    def report_growth(self) -> GrowthReport:
        n_raw = self.distinct_raw_ids()
        n_slots = self._distinct_slots
        if n_raw == 0:
            rate = 0.0
        else:
            rate = max(0.0, 1.0 - n_slots / n_raw)
        return GrowthReport(n_raw, n_slots * self.dim, rate, n_slots)

    # -- checkpoint ---------------------------------------------------------

    def to_bytes(self, with_optimizer: bool = True) -> bytes:
        flags = FLAG_OPTIMIZER_STATE if with_optimizer else 0
        parts = [
            _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, flags, self.dim, self.n_slots,
                              self.hash_seed & 0xFFFFFFFFFFFFFFFF),
            self.values.astype("<f4").tobytes(),
        ]
        if with_optimizer:
            parts.append(self.acc.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, dtype="float32", tracker: str = "exact"):
        if len(data) < _CKPT_HEADER.size:
            raise ValueError("truncated embedding checkpoint")
        magic, version, flags, dim, n_slots, seed = _CKPT_HEADER.unpack_from(data)
        if magic != CKPT_MAGIC or version != CKPT_VERSION:
            raise ValueError(f"unsupported embedding checkpoint ({magic!r}, v{version})")
        n = n_slots * dim
        body = np.frombuffer(data, dtype="<f4", offset=_CKPT_HEADER.size)
        expected = n * (2 if flags & FLAG_OPTIMIZER_STATE else 1)
        if body.size != expected:
            raise ValueError(f"embedding checkpoint holds {body.size} floats, expected {expected}")
        table = cls(n_slots, dim, seed, dtype=dtype, tracker=tracker, allocate=False)
        table.values = body[:n].reshape(n_slots, dim).astype(dtype)
        if flags & FLAG_OPTIMIZER_STATE:
            table.acc = body[n:].reshape(n_slots, dim).astype(dtype)
        else:
            table.acc = np.zeros((n_slots, dim), dtype=dtype)
        return table

    def save(self, path: str | os.PathLike, with_optimizer: bool = True) -> None:
        Path(path).write_bytes(self.to_bytes(with_optimizer))

    @classmethod
    def load(cls, path: str | os.PathLike, **kw) -> "HashedEmbeddingTable":
        return cls.from_bytes(Path(path).read_bytes(), **kw)


def expected_occupied_slots(n_slots: int, n_ids: int) -> float:
    """Expected number of occupied slots after hashing ``n_ids`` distinct IDs."""
    return n_slots * (1.0 - (1.0 - 1.0 / n_slots) ** n_ids)
