"""Domain types, configuration, RNG derivation and the event-log dataset."""
from __future__ import annotations

import enum
import io
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SECONDS_PER_DAY = 86_400
CSV_COLUMNS = ("user_id", "item_id", "timestamp", "engagement_type", "label")

# 16-byte header: magic(8) | version u16 | record size u16 | reserved u32
LOG_MAGIC = b"UCREVLOG"
LOG_VERSION = 1
EVENT_DTYPE = np.dtype(
    [
        ("user_id", "<u8"),
        ("item_id", "<u8"),
        ("timestamp", "<i8"),
        ("engagement_type", "u1"),
        ("label", "u1"),
    ]
)
_HEADER = struct.Struct("<8sHHI")


class Formulation(str, enum.Enum):
    IC = "IC"
    UC = "UC"
    HYBRID = "HYBRID"


class Pooling(str, enum.Enum):
    SUM = "SUM"
    ATTENTION = "ATTENTION"


class ConfigError(ValueError):
    """Invalid configuration, detected before any data is touched."""


class DataRangeError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    timestamp: int
    engagement_type: int
    label: int


@dataclass
class DatasetMeta:
    num_tasks: int
    day_boundaries: list[int]
    user_count: int
    item_count: int

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be positive")
        b = self.day_boundaries
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ConfigError("day_boundaries must be strictly increasing")

    @property
    def num_days(self) -> int:
        return max(len(self.day_boundaries) - 1, 0)


@dataclass
class ChannelList:
    """A padded, time-causal engagement list attached to one example.

    ``entity_ids`` and ``time_deltas`` hold ``valid_len`` real entries, oldest
    first; ``padded()`` returns capacity-length arrays plus the validity mask.
    """

    entity_ids: np.ndarray
    time_deltas: np.ndarray
    capacity: int = 1024

    def __post_init__(self):
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.uint64)
        self.time_deltas = np.asarray(self.time_deltas, dtype=np.int64)
        if self.capacity < 1:
            raise ConfigError("capacity must be positive")
        if len(self.entity_ids) != len(self.time_deltas):
            raise ValueError("entity_ids and time_deltas differ in length")
        if len(self.entity_ids) > self.capacity:
            raise ValueError("list exceeds capacity")
        if len(self.time_deltas) and self.time_deltas.min() < 0:
            raise ValueError("negative time delta")

    @property
    def valid_len(self) -> int:
        return len(self.entity_ids)

    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ids = np.zeros(self.capacity, dtype=np.uint64)
        deltas = np.zeros(self.capacity, dtype=np.int64)
        mask = np.zeros(self.capacity, dtype=bool)
        n = self.valid_len
        ids[:n] = self.entity_ids
        deltas[:n] = self.time_deltas
        mask[:n] = True
        return ids, deltas, mask


@dataclass
class ModelConfig:
    formulation: Formulation = Formulation.UC
    pooling: Pooling = Pooling.ATTENTION
    embed_dim: int = 32
    hash_size: int = 1 << 20
    num_heads: int = 1
    list_capacity: int = 1024
    num_tasks: int = 1
    interaction_hidden_dims: list[int] = field(default_factory=lambda: [64, 32])
    learning_rate: float = 0.05
    dense_learning_rate: float = 0.01
    adagrad_eps: float = 1e-8
    init_scale: float | None = None
    time_encoding: bool = False
    time_buckets: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        self.formulation = Formulation(self.formulation)
        self.pooling = Pooling(self.pooling)
        for name in ("embed_dim", "hash_size", "num_heads", "list_capacity", "num_tasks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if any(h < 1 for h in self.interaction_hidden_dims):
            raise ConfigError("hidden layer widths must be positive")
        self.interaction_hidden_dims = [int(h) for h in self.interaction_hidden_dims]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formulation"] = self.formulation.value
        d["pooling"] = self.pooling.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# RNG


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key) & 0xFFFFFFFFFFFFFFFF


def seed_rng(seed: int, *keys) -> np.random.Generator:
    """Return a generator derived from ``seed`` and an optional key path.

    Streams with different key paths are statistically independent and the
    same (seed, keys) always reproduces the same stream.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# String IDs


class IdDictionary:
    """Persistent string -> 64-bit ID mapping for external data with non-numeric keys.

    IDs are assigned densely from ``start`` in first-seen order, so encoding
    the same stream against the same saved dictionary is reproducible.
    File format: a ``UCRIDS 1`` header line, then ``<id>\\t<key>`` lines.
    """

    HEADER = "UCRIDS 1"

    def __init__(self, start: int = 1):
        self.start = int(start)
        self._ids: dict[str, int] = {}
        self._keys: list[str] = []

    def __len__(self) -> int:
        return len(self._keys)

    def encode(self, keys: Sequence[str], grow: bool = True) -> np.ndarray:
        out = np.empty(len(keys), dtype=np.uint64)
        for n, key in enumerate(keys):
            i = self._ids.get(key)
            if i is None:
                if not grow:
                    raise KeyError(f"unknown id {key!r}")
                if "\t" in key or "\n" in key:
                    raise ValueError(f"id {key!r} contains a tab or newline")
                i = self.start + len(self._keys)
                self._ids[key] = i
                self._keys.append(key)
            out[n] = i
        return out

    def decode(self, ids) -> list[str]:
        return [self._keys[int(i) - self.start] for i in np.asarray(ids, dtype=np.uint64)]

    def save(self, path: str | os.PathLike) -> None:
        lines = [self.HEADER] + [f"{self.start + n}\t{k}" for n, k in enumerate(self._keys)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "IdDictionary":
        lines = Path(path).read_text().split("\n")
        if lines[0] != cls.HEADER:
            raise ValueError(f"{path}: not an id dictionary (header {lines[0]!r})")
        entries = [ln.split("\t", 1) for ln in lines[1:] if ln]
        d = cls(start=int(entries[0][0]) if entries else 1)
        for n, (i, key) in enumerate(entries):
            if int(i) != d.start + n:
                raise ValueError(f"{path}:{n + 2}: ids must be dense and ascending")
            d._ids[key] = int(i)
            d._keys.append(key)
        return d


# ---------------------------------------------------------------------------
# Event log


class EventLog:
    """Columnar, time-ordered interaction log backed by a numpy record array."""

    def __init__(self, records: np.ndarray | None = None):
        if records is None:
            records = np.zeros(0, dtype=EVENT_DTYPE)
        self.records = np.ascontiguousarray(records, dtype=EVENT_DTYPE)

    @classmethod
    def from_columns(cls, user_id, item_id, timestamp, engagement_type=None, label=None,
                     sort: bool = True) -> "EventLog":
        n = len(user_id)
        rec = np.zeros(n, dtype=EVENT_DTYPE)
        rec["user_id"] = user_id
        rec["item_id"] = item_id
        rec["timestamp"] = timestamp
        rec["engagement_type"] = 0 if engagement_type is None else engagement_type
        rec["label"] = 1 if label is None else label
        if sort:
            rec = rec[np.argsort(rec["timestamp"], kind="stable")]
        return cls(rec)

    @classmethod
    def from_events(cls, events: Sequence[InteractionEvent]) -> "EventLog":
        rec = np.array(
            [(e.user_id, e.item_id, e.timestamp, e.engagement_type, e.label) for e in events],
            dtype=EVENT_DTYPE,
        )
        return cls(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[InteractionEvent]:
        for r in self.records:
            yield InteractionEvent(int(r[0]), int(r[1]), int(r[2]), int(r[3]), int(r[4]))

    def __getitem__(self, idx) -> "EventLog":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return EventLog(self.records[idx])

    def __eq__(self, other) -> bool:
        return isinstance(other, EventLog) and np.array_equal(self.records, other.records)

    @property
    def user_id(self) -> np.ndarray:
        return self.records["user_id"]

    @property
    def item_id(self) -> np.ndarray:
        return self.records["item_id"]

    @property
    def timestamp(self) -> np.ndarray:
        return self.records["timestamp"]

    @property
    def engagement_type(self) -> np.ndarray:
        return self.records["engagement_type"]

    @property
    def label(self) -> np.ndarray:
        return self.records["label"]

    def is_time_ordered(self) -> bool:
        return bool(np.all(np.diff(self.timestamp) >= 0))

    def validate(self, num_tasks: int) -> None:
        if not self.is_time_ordered():
            raise ValueError("events are not in non-decreasing timestamp order")
        if len(self) and int(self.label.max()) > 1:
            raise ValueError("labels must be 0 or 1")
        if len(self) and int(self.engagement_type.max()) >= num_tasks:
            raise ValueError(f"engagement_type must be < {num_tasks}")

    def concat(self, other: "EventLog") -> "EventLog":
        return EventLog(np.concatenate([self.records, other.records]))

    def meta(self, num_tasks: int | None = None) -> DatasetMeta:
        k = num_tasks or (int(self.engagement_type.max()) + 1 if len(self) else 1)
        return DatasetMeta(
            num_tasks=k,
            day_boundaries=day_boundaries(self.timestamp),
            user_count=int(len(np.unique(self.user_id))),
            item_count=int(len(np.unique(self.item_id))),
        )

    # -- serialization ----------------------------------------------------

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            if len(self):
                cols = np.column_stack(
                    [self.records[c].astype(np.uint64 if c != "timestamp" else np.int64).astype(object)
                     for c in CSV_COLUMNS]
                )
                buf = io.StringIO()
                np.savetxt(buf, cols, fmt="%d", delimiter=",")
                fh.write(buf.getvalue())

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "EventLog":
        with open(path) as fh:
            header = fh.readline().strip()
            if tuple(header.split(",")) != CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected header {header!r}")
            rows = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
                try:
                    rows.append(tuple(int(p) for p in parts))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        return cls(np.array(rows, dtype=EVENT_DTYPE) if rows else None)

    def write_binary(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(LOG_MAGIC, LOG_VERSION, EVENT_DTYPE.itemsize, 0))
            fh.write(self.records.tobytes())

    @classmethod
    def read_binary(cls, path: str | os.PathLike) -> "EventLog":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, recsize, _ = _HEADER.unpack_from(data)
        if magic != LOG_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != LOG_VERSION or recsize != EVENT_DTYPE.itemsize:
            raise ValueError(f"{path}: unsupported version {version} / record size {recsize}")
        body = data[_HEADER.size:]
        if len(body) % recsize:
            raise ValueError(f"{path}: trailing partial record")
        return cls(np.frombuffer(body, dtype=EVENT_DTYPE).copy())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EventLog":
        with open(path, "rb") as fh:
            head = fh.read(8)
        return cls.read_binary(path) if head == LOG_MAGIC else cls.read_csv(path)


def day_boundaries(timestamps: np.ndarray) -> list[int]:
    """Calendar-day edges (epoch seconds) covering ``timestamps``."""
    if len(timestamps) == 0:
        return []
    first = int(timestamps.min()) // SECONDS_PER_DAY
    last = int(timestamps.max()) // SECONDS_PER_DAY
    return [d * SECONDS_PER_DAY for d in range(first, last + 2)]


def split_by_days(events: EventLog, boundaries: Sequence[int]) -> list[EventLog]:
    """Partition ``events`` into ``len(boundaries) - 1`` half-open day windows."""
    if len(events) == 0:
        return [EventLog() for _ in range(max(len(boundaries) - 1, 0))]
    if not events.is_time_ordered():
        raise ValueError("events must be time-ordered")
    b = np.asarray(boundaries, dtype=np.int64)
    ts = events.timestamp
    if len(b) < 2 or ts[0] < b[0] or ts[-1] >= b[-1]:
        bad = ts[0] if len(b) < 2 or ts[0] < b[0] else ts[-1]
        raise DataRangeError(f"timestamp {int(bad)} lies outside the day boundaries")
    cuts = np.searchsorted(ts, b[1:-1], side="left")
    return [EventLog(part) for part in np.split(events.records, cuts)]
