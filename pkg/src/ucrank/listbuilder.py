"""Engagement index and ChannelList construction.

Three strategies are supported: IC recency sampling (a user's most recent
engaged items), UC reservoir sampling (a uniform sample of an item's
engaged users, redrawn for every example) and UC clustering (engaged users
replaced by their cluster IDs).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .core import ChannelList, EventLog

UNASSIGNED = np.uint64(0xFFFFFFFFFFFFFFFF)


class _History:
    """Append-only, time-ordered (time, id) sequence with amortised growth."""

    __slots__ = ("times", "ids", "n")

    def __init__(self):
        self.times = np.empty(4, dtype=np.int64)
        self.ids = np.empty(4, dtype=np.uint64)
        self.n = 0

    def append(self, t: int, entity: int) -> None:
        if self.n == len(self.times):
            self.times = np.resize(self.times, 2 * self.n)
            self.ids = np.resize(self.ids, 2 * self.n)
        if self.n and t < self.times[self.n - 1]:
            raise ValueError("history appends must be time-ordered")
        self.times[self.n] = t
        self.ids[self.n] = entity
        self.n += 1

    def before(self, t: int) -> int:
        """Number of entries strictly earlier than ``t``."""
        return int(np.searchsorted(self.times[: self.n], t, side="left"))


_EMPTY_HISTORY = _History()


class EngagementIndex:
    """Both views of the positive-engagement graph, per engagement type.

    ``users[(u, k)]`` holds the items user ``u`` engaged with type ``k``;
    ``items[(i, k)]`` holds the users who engaged item ``i`` with type ``k``.
    Only events with label 1 are indexed.
    """

    def __init__(self):
        self.users: dict[tuple[int, int], _History] = {}
        self.items: dict[tuple[int, int], _History] = {}
        self.activity: dict[int, int] = {}

    def add(self, user: int, item: int, t: int, etype: int, label: int) -> None:
        self.activity[user] = self.activity.get(user, 0) + 1
        if not label:
            return
        h = self.users.get((user, etype))
        if h is None:
            h = self.users[(user, etype)] = _History()
        h.append(t, item)
        h = self.items.get((item, etype))
        if h is None:
            h = self.items[(item, etype)] = _History()
        h.append(t, user)

    def add_events(self, events: EventLog) -> None:
        for u, i, t, k, y in zip(events.user_id.tolist(), events.item_id.tolist(),
                                 events.timestamp.tolist(), events.engagement_type.tolist(),
                                 events.label.tolist()):
            self.add(u, i, t, k, y)

    def user_history(self, user: int, etype: int) -> _History:
        return self.users.get((user, etype), _EMPTY_HISTORY)

    def item_history(self, item: int, etype: int) -> _History:
        return self.items.get((item, etype), _EMPTY_HISTORY)

    def activity_counts(self) -> dict[int, int]:
        """Interactions (any label) per user seen so far."""
        return dict(self.activity)


def _recent(h: _History, t: int, cap: int):
    n = h.before(t)
    lo = max(0, n - cap)
    return h.ids[lo:n], t - h.times[lo:n]


def build_ic_list(index: EngagementIndex, user: int, t: int, etype: int, cap: int) -> ChannelList:
    """The ``cap`` most recent items ``user`` engaged with before ``t``, newest last."""
    ids, deltas = _recent(index.user_history(user, etype), t, cap)
    return ChannelList(ids.copy(), deltas, capacity=cap)


def build_uc_sampled_list(index: EngagementIndex, item: int, t: int, etype: int, cap: int,
                          seed: int, ordinal: int) -> ChannelList:
    """Users who engaged ``item`` before ``t``; a fresh uniform sample of ``cap`` if longer.

    The sample is drawn with a stream keyed by (seed, item, ordinal) so every
    example gets its own draw while runs stay reproducible.
    """
    h = index.item_history(item, etype)
    n = h.before(t)
    if n <= cap:
        return ChannelList(h.ids[:n].copy(), t - h.times[:n], capacity=cap)
    idx = kernels.reservoir_indices(n, cap, kernels.stream_key(seed, item, ordinal))
    return ChannelList(h.ids[idx], t - h.times[idx], capacity=cap)


def collapse_runs(ids: np.ndarray, deltas: np.ndarray):
    """Drop consecutive repeats, keeping the first (oldest) entry of each run."""
    if len(ids) == 0:
        return ids, deltas
    keep = np.empty(len(ids), dtype=bool)
    keep[0] = True
    np.not_equal(ids[1:], ids[:-1], out=keep[1:])
    return ids[keep], deltas[keep]


def build_uc_clustered_list(index: EngagementIndex, cluster_map, item: int, t: int, etype: int,
                            cap: int) -> ChannelList:
    h = index.item_history(item, etype)
    n = h.before(t)
    clusters = cluster_map.map_users(h.ids[:n])
    ids, deltas = collapse_runs(clusters, t - h.times[:n])
    return ChannelList(ids[-cap:], deltas[-cap:], capacity=cap)


# ---------------------------------------------------------------------------
# Batched, causal featurization


@dataclass
class ListSpec:
    num_types: int = 1
    ic_cap: int = 0
    uc_cap: int = 0
    uc_mode: str = "sampling"
    seed: int = 0

    def __post_init__(self):
        if self.uc_mode not in ("sampling", "clustering"):
            raise ValueError(f"unknown uc_mode {self.uc_mode!r}")


@dataclass
class ChannelBlock:
    """K padded channels for a batch: arrays shaped (K, B, L)."""

    ids: np.ndarray
    deltas: np.ndarray
    mask: np.ndarray

    @classmethod
    def empty(cls, k: int, b: int, cap: int) -> "ChannelBlock":
        return cls(np.zeros((k, b, cap), np.uint64), np.zeros((k, b, cap), np.int64),
                   np.zeros((k, b, cap), bool))

    def put(self, k: int, row: int, lst: ChannelList) -> None:
        n = lst.valid_len
        self.ids[k, row, :n] = lst.entity_ids
        self.deltas[k, row, :n] = lst.time_deltas
        self.mask[k, row, :n] = True

    def take(self, idx) -> "ChannelBlock":
        return ChannelBlock(self.ids[:, idx], self.deltas[:, idx], self.mask[:, idx])


@dataclass
class Examples:
    user_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    tasks: np.ndarray
    labels: np.ndarray
    ordinals: np.ndarray
    activity: np.ndarray
    ic: ChannelBlock | None = None
    uc: ChannelBlock | None = None
    num_tasks: int = 1

    def __len__(self) -> int:
        return len(self.user_ids)

    def take(self, idx) -> "Examples":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = v[idx]
            elif isinstance(v, ChannelBlock):
                v = v.take(idx)
            kw[f.name] = v
        return Examples(**kw)

    @property
    def task_mask(self) -> np.ndarray:
        m = np.zeros((len(self), self.num_tasks))
        m[np.arange(len(self)), self.tasks] = 1.0
        return m

    @property
    def label_matrix(self) -> np.ndarray:
        return np.repeat(self.labels.astype(np.float64)[:, None], self.num_tasks, axis=1)


def featurize(events: EventLog, index: EngagementIndex, spec: ListSpec, ordinal_offset: int = 0,
              cluster_map=None, update_index: bool = True) -> Examples:
    """Build channel lists for every event, replaying the log causally.

    Each event sees only index entries strictly earlier than its timestamp;
    when ``update_index`` is set the event is appended after its lists are
    built.
    """
    b = len(events)
    k_types = spec.num_types
    ic = ChannelBlock.empty(k_types, b, spec.ic_cap) if spec.ic_cap else None
    uc = ChannelBlock.empty(k_types, b, spec.uc_cap) if spec.uc_cap else None
    if uc is not None and spec.uc_mode == "clustering" and cluster_map is None:
        raise ValueError("clustering mode needs a cluster map")
    activity = np.zeros(b, dtype=np.int64)
    # activeness counts are frozen at the start of the slice
    prior_activity = dict(index.activity)
    cols = zip(events.user_id.tolist(), events.item_id.tolist(), events.timestamp.tolist(),
               events.engagement_type.tolist(), events.label.tolist())
    for row, (u, i, t, et, y) in enumerate(cols):
        activity[row] = prior_activity.get(u, 0)
        for k in range(k_types):
            if ic is not None:
                ic.put(k, row, build_ic_list(index, u, t, k, spec.ic_cap))
            if uc is not None:
                if spec.uc_mode == "sampling":
                    lst = build_uc_sampled_list(index, i, t, k, spec.uc_cap, spec.seed,
                                                ordinal_offset + row)
                else:
                    lst = build_uc_clustered_list(index, cluster_map, i, t, k, spec.uc_cap)
                uc.put(k, row, lst)
        if update_index:
            index.add(u, i, t, et, y)
    return Examples(
        user_ids=events.user_id.copy(),
        item_ids=events.item_id.copy(),
        timestamps=events.timestamp.copy(),
        tasks=events.engagement_type.astype(np.int64),
        labels=events.label.astype(np.int64),
        ordinals=np.arange(ordinal_offset, ordinal_offset + b, dtype=np.int64),
        activity=activity,
        ic=ic,
        uc=uc,
        num_tasks=k_types,
    )
