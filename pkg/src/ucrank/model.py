"""Single-tower ranking model with hand-written backward pass.

One code path serves all three formulations. A *channel group* is a set of
K engagement lists that share an embedding table with the target entity
used as attention query:

* ``uc`` group: user table; target user as query; lists of engaged users
  (or cluster IDs) per item.
* ``ic`` group: item table; target item as query; lists of engaged items
  per user.

The IC formulation has only the ``ic`` group, UC only ``uc`` and HYBRID both
(``uc`` features first). Pooled channels are concatenated with the target
embeddings and fed through a ReLU MLP into K sigmoid task heads.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, Formulation, ModelConfig, Pooling, seed_rng
from .embeddings import HashedEmbeddingTable, TrainingError
from .listbuilder import Examples

MODEL_FORMAT = "ucrank-model"
MODEL_VERSION = 1

GROUPS = {
    "uc": ("user", "user_ids", "uc"),
    "ic": ("item", "item_ids", "ic"),
}


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def time_buckets(deltas, n_buckets: int) -> np.ndarray:
    """0 for a zero delta, else 1 + floor(log2(delta)), capped at ``n_buckets - 1``."""
    d = np.asarray(deltas, dtype=np.int64)
    b = np.zeros(d.shape, dtype=np.int64)
    pos = d > 0
    b[pos] = 1 + np.floor(np.log2(d[pos])).astype(np.int64)
    return np.minimum(b, n_buckets - 1)


# ---------------------------------------------------------------------------
# Pooling operators (batched: E is (B, L, d), mask (B, L))


def sum_pool(E, mask):
    """Masked mean over valid positions; an empty list pools to zero."""
    E = np.asarray(E, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    single = E.ndim == 2
    if single:
        E, mask = E[None], mask[None]
    n = mask.sum(axis=1)
    pooled = np.einsum("bl,bld->bd", mask.astype(np.float64), E) / np.maximum(n, 1)[:, None]
    return pooled[0] if single else pooled


def _attn_forward(E, Kin, mask, query, Wq, Wk, Wv, Wo, heads):
    b, L, d = E.shape
    dh = d // heads
    q = (query @ Wq).reshape(b, heads, dh)
    k = (Kin @ Wk).reshape(b, L, heads, dh)
    v = (E @ Wv).reshape(b, L, heads, dh)
    s = np.einsum("bhd,blhd->bhl", q, k) / np.sqrt(dh)
    m = mask[:, None, :]
    s_m = np.where(m, s, -np.inf)
    smax = np.max(s_m, axis=-1, keepdims=True) if L else np.zeros((b, heads, 1))
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.where(m, np.exp(np.where(m, s - smax, 0.0)), 0.0)
    den = e.sum(axis=-1, keepdims=True)
    w = np.divide(e, den, out=np.zeros_like(e), where=den > 0)
    o = np.einsum("bhl,blhd->bhd", w, v).reshape(b, d)
    return o @ Wo, dict(q=q, k=k, v=v, w=w, o=o, dh=dh)


def attentive_pool(E, mask, query, heads: int = 1, Wq=None, Wk=None, Wv=None, Wo=None,
                   key_offset=None):
    """Targeted scaled dot-product attention of a list w.r.t. ``query``.

    Projections default to identity. Returns ``(pooled, weights)`` with
    weights shaped (heads, L) per example; masked positions get weight 0 and
    an all-masked list pools to the zero vector.
    """
    E = np.asarray(E, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    query = np.asarray(query, dtype=np.float64)
    single = E.ndim == 2
    if single:
        E, mask, query = E[None], mask[None], query[None]
        if key_offset is not None:
            key_offset = np.asarray(key_offset)[None]
    d = E.shape[-1]
    eye = np.eye(d)
    Kin = E if key_offset is None else E + key_offset
    pooled, c = _attn_forward(E, Kin, mask, query,
                              eye if Wq is None else Wq, eye if Wk is None else Wk,
                              eye if Wv is None else Wv, eye if Wo is None else Wo, heads)
    if single:
        return pooled[0], c["w"][0]
    return pooled, c["w"]


# ---------------------------------------------------------------------------


@dataclass
class ChannelTrace:
    slots: np.ndarray
    mask: np.ndarray
    E: np.ndarray
    pooled: np.ndarray
    buckets: np.ndarray | None = None
    kin: np.ndarray | None = None
    cache: dict | None = None

    @property
    def weights(self):
        return None if self.cache is None else self.cache["w"]


@dataclass
class ForwardTrace:
    target_slots: dict[str, np.ndarray] = field(default_factory=dict)
    target_emb: dict[str, np.ndarray] = field(default_factory=dict)
    channels: dict[str, list[ChannelTrace]] = field(default_factory=dict)
    layer_in: list[np.ndarray] = field(default_factory=list)
    preact: list[np.ndarray] = field(default_factory=list)
    hidden: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    ordinals: np.ndarray | None = None


@dataclass
class Gradients:
    dense: dict[str, np.ndarray]
    sparse: dict[str, tuple[np.ndarray, np.ndarray]]


class RankingModel:
    def __init__(self, config: ModelConfig, table_dtype="float32", table_tracker: str = "exact"):
        self.config = cfg = config
        self.table_dtype = np.dtype(table_dtype)
        rng = seed_rng(cfg.rng_seed, "init")
        d, K = cfg.embed_dim, cfg.num_tasks
        if cfg.formulation == Formulation.IC:
            self.groups = ["ic"]
        elif cfg.formulation == Formulation.UC:
            self.groups = ["uc"]
        else:
            self.groups = ["uc", "ic"]
        self.tables: dict[str, HashedEmbeddingTable] = {}
        for g in self.groups:
            name = GROUPS[g][0]
            t = HashedEmbeddingTable(cfg.hash_size, d, hash_seed=cfg.rng_seed + len(self.tables),
                                     dtype=self.table_dtype, tracker=table_tracker)
            t.init(cfg.init_scale, seed_rng(cfg.rng_seed, "table", name))
            self.tables[name] = t

        p: dict[str, np.ndarray] = {}
        for g in self.groups:
            for k in range(K):
                if cfg.pooling == Pooling.ATTENTION:
                    for w in ("Wq", "Wk", "Wv", "Wo"):
                        p[f"{g}.{k}.{w}"] = np.eye(d)
                    if cfg.time_encoding:
                        p[f"{g}.{k}.T"] = np.zeros((cfg.time_buckets, d))
        width = d * len(self.groups) * (1 + K)
        for li, h in enumerate(cfg.interaction_hidden_dims):
            lim = np.sqrt(6.0 / width)
            p[f"mlp.{li}.W"] = rng.uniform(-lim, lim, size=(width, h))
            p[f"mlp.{li}.b"] = np.full(h, 0.01)
            width = h
        lim = np.sqrt(6.0 / (width + K))
        p["head.W"] = rng.uniform(-lim, lim, size=(width, K))
        p["head.b"] = np.zeros(K)
        self.params = p
        self.opt_state = {n: np.zeros_like(v) for n, v in p.items()}
        self.input_width = d * len(self.groups) * (1 + K)

    # -- bookkeeping --------------------------------------------------------

    @property
    def dense_param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _check_batch(self, batch: Examples) -> None:
        for g in self.groups:
            block = getattr(batch, GROUPS[g][2])
            if block is None:
                raise ConfigError(f"{self.config.formulation.value} model needs {g} channels")
            if block.ids.shape[0] != self.config.num_tasks:
                raise ConfigError(f"{g} block has {block.ids.shape[0]} channels, "
                                  f"model expects {self.config.num_tasks}")

    # -- forward ------------------------------------------------------------

    def forward(self, batch: Examples, track: bool = False) -> ForwardTrace:
        cfg = self.config
        self._check_batch(batch)
        tr = ForwardTrace(ordinals=batch.ordinals)
        feats = []
        for g in self.groups:
            tname, target_attr, block_attr = GROUPS[g]
            table = self.tables[tname]
            block = getattr(batch, block_attr)
            t_slots, t_emb = table.lookup_batch(getattr(batch, target_attr), track=track)
            t_emb = t_emb.astype(np.float64)
            tr.target_slots[g], tr.target_emb[g] = t_slots, t_emb
            feats.append(t_emb)
            chans = []
            for k in range(cfg.num_tasks):
                mask = block.mask[k]
                slots, E = table.lookup_batch(block.ids[k], track=False)
                if track:
                    table.track(block.ids[k][mask], slots[mask])
                E = E.astype(np.float64) * mask[..., None]
                if cfg.pooling == Pooling.ATTENTION:
                    pre = f"{g}.{k}."
                    buckets = kin = None
                    if cfg.time_encoding:
                        buckets = time_buckets(block.deltas[k], cfg.time_buckets)
                        kin = E + self.params[pre + "T"][buckets]
                    pooled, cache = _attn_forward(
                        E, E if kin is None else kin, mask, t_emb,
                        self.params[pre + "Wq"], self.params[pre + "Wk"],
                        self.params[pre + "Wv"], self.params[pre + "Wo"], cfg.num_heads)
                    chans.append(ChannelTrace(slots, mask, E, pooled, buckets, kin, cache))
                else:
                    chans.append(ChannelTrace(slots, mask, E, sum_pool(E, mask)))
                feats.append(chans[-1].pooled)
            tr.channels[g] = chans
        h = np.concatenate(feats, axis=1)
        for li in range(len(cfg.interaction_hidden_dims)):
            tr.layer_in.append(h)
            z = h @ self.params[f"mlp.{li}.W"] + self.params[f"mlp.{li}.b"]
            tr.preact.append(z)
            h = np.maximum(z, 0.0)
        tr.hidden = h
        tr.logits = h @ self.params["head.W"] + self.params["head.b"]
        tr.probs = sigmoid(tr.logits)
        return tr

    def predict(self, batch: Examples) -> np.ndarray:
        """Per-task probabilities (B, K) on frozen parameters."""
        return self.forward(batch, track=False).probs

    # -- loss / backward ------------------------------------------------------

    @staticmethod
    def loss_terms(logits, labels, task_mask):
        z = np.asarray(logits, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        m = np.asarray(task_mask, dtype=np.float64)
        bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        n_sup = m.sum(axis=1)
        w = np.divide(1.0, n_sup, out=np.zeros_like(n_sup), where=n_sup > 0)
        n_eff = max(int(np.count_nonzero(n_sup)), 1)
        per_example = (bce * m).sum(axis=1) * w
        return per_example, w, n_eff

    def loss(self, batch: Examples, labels=None, task_mask=None) -> float:
        tr = self.forward(batch)
        labels = batch.label_matrix if labels is None else labels
        task_mask = batch.task_mask if task_mask is None else task_mask
        per_example, _, n_eff = self.loss_terms(tr.logits, labels, task_mask)
        return float(per_example.sum() / n_eff)

    def loss_and_backward(self, tr: ForwardTrace, labels, task_mask):
        """Mean (over supervised tasks, then examples) BCE and exact gradients."""
        cfg = self.config
        P = self.params
        labels = np.asarray(labels, dtype=np.float64)
        task_mask = np.asarray(task_mask, dtype=np.float64)
        per_example, w, n_eff = self.loss_terms(tr.logits, labels, task_mask)
        if not np.all(np.isfinite(per_example)):
            bad = int(np.flatnonzero(~np.isfinite(per_example))[0])
            ex = bad if tr.ordinals is None else int(tr.ordinals[bad])
            raise TrainingError(f"non-finite loss for example {ex}")
        loss = float(per_example.sum() / n_eff)

        g: dict[str, np.ndarray] = {}
        dz = task_mask * (tr.probs - labels) * w[:, None] / n_eff
        g["head.W"] = tr.hidden.T @ dz
        g["head.b"] = dz.sum(axis=0)
        dh = dz @ P["head.W"].T
        for li in reversed(range(len(cfg.interaction_hidden_dims))):
            dpre = dh * (tr.preact[li] > 0)
            g[f"mlp.{li}.W"] = tr.layer_in[li].T @ dpre
            g[f"mlp.{li}.b"] = dpre.sum(axis=0)
            dh = dpre @ P[f"mlp.{li}.W"].T

        d = cfg.embed_dim
        sparse: dict[str, tuple[list, list]] = {}
        off = 0
        for grp in self.groups:
            tname = GROUPS[grp][0]
            d_target = dh[:, off:off + d].copy()
            off += d
            s_slots, s_grads = sparse.setdefault(tname, ([], []))
            for k, ch in enumerate(tr.channels[grp]):
                dpooled = dh[:, off:off + d]
                off += d
                if cfg.pooling == Pooling.ATTENTION:
                    dE, dq = self._attn_backward(grp, k, ch, tr.target_emb[grp], dpooled, g)
                    d_target += dq
                else:
                    n = np.maximum(ch.mask.sum(axis=1), 1)[:, None, None]
                    dE = ch.mask[..., None] * dpooled[:, None, :] / n
                s_slots.append(ch.slots[ch.mask])
                s_grads.append(dE[ch.mask])
            s_slots.append(tr.target_slots[grp])
            s_grads.append(d_target)
        sparse_out = {
            t: (np.concatenate(sl), np.concatenate(gr).reshape(-1, d)) for t, (sl, gr) in sparse.items()
        }
        return loss, Gradients(g, sparse_out)

    def _attn_backward(self, grp, k, ch: ChannelTrace, query, dpooled, g):
        cfg = self.config
        pre = f"{grp}.{k}."
        Wq, Wk, Wv, Wo = (self.params[pre + n] for n in ("Wq", "Wk", "Wv", "Wo"))
        c = ch.cache
        b, L, d = ch.E.shape
        H, dh = cfg.num_heads, c["dh"]
        kin = ch.E if ch.kin is None else ch.kin
        g[pre + "Wo"] = c["o"].T @ dpooled
        do = (dpooled @ Wo.T).reshape(b, H, dh)
        w = c["w"]
        dw = np.einsum("bhd,blhd->bhl", do, c["v"])
        dv = np.einsum("bhl,bhd->blhd", w, do).reshape(b, L, d)
        ds = w * (dw - np.sum(w * dw, axis=-1, keepdims=True)) / np.sqrt(dh)
        dq = np.einsum("bhl,blhd->bhd", ds, c["k"]).reshape(b, d)
        dk = np.einsum("bhl,bhd->blhd", ds, c["q"]).reshape(b, L, d)
        g[pre + "Wq"] = query.T @ dq
        g[pre + "Wk"] = kin.reshape(-1, d).T @ dk.reshape(-1, d)
        g[pre + "Wv"] = ch.E.reshape(-1, d).T @ dv.reshape(-1, d)
        dkin = dk @ Wk.T
        dE = (dkin + dv @ Wv.T) * ch.mask[..., None]
        if ch.buckets is not None:
            dT = np.zeros_like(self.params[pre + "T"])
            np.add.at(dT, ch.buckets[ch.mask], dkin[ch.mask])
            g[pre + "T"] = dT
        return dE, dq @ Wq.T

    # -- optimisation ---------------------------------------------------------

    def apply_gradients(self, grads: Gradients) -> None:
        cfg = self.config
        for name, (slots, gr) in grads.sparse.items():
            self.tables[name].apply_sparse_grads(slots, gr, cfg.learning_rate, cfg.adagrad_eps)
        for name, gr in grads.dense.items():
            if not np.all(np.isfinite(gr)):
                raise TrainingError(f"non-finite gradient in {name}")
            acc = self.opt_state[name]
            acc += gr * gr
            self.params[name] -= cfg.dense_learning_rate * gr / np.sqrt(acc + cfg.adagrad_eps)

    def train_step(self, batch: Examples) -> float:
        tr = self.forward(batch, track=True)
        loss, grads = self.loss_and_backward(tr, batch.label_matrix, batch.task_mask)
        self.apply_gradients(grads)
        return loss

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        arrays = {
            "format": np.frombuffer(MODEL_FORMAT.encode(), dtype=np.uint8),
            "version": np.array([MODEL_VERSION]),
            "config": np.frombuffer(json.dumps(self.config.to_dict()).encode(), dtype=np.uint8),
            "table_dtype": np.frombuffer(self.table_dtype.name.encode(), dtype=np.uint8),
        }
        for n, v in self.params.items():
            arrays[f"param/{n}"] = v
            arrays[f"opt/{n}"] = self.opt_state[n]
        for n, t in self.tables.items():
            arrays[f"table/{n}"] = np.frombuffer(t.to_bytes(with_optimizer=True), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RankingModel":
        with np.load(path) as z:
            if bytes(z["format"]).decode() != MODEL_FORMAT:
                raise ValueError(f"{path}: not a model checkpoint")
            version = int(z["version"][0])
            if version != MODEL_VERSION:
                raise ValueError(f"{path}: model checkpoint version {version} unsupported")
            cfg = ModelConfig.from_dict(json.loads(bytes(z["config"]).decode()))
            dtype = bytes(z["table_dtype"]).decode()
            m = cls.__new__(cls)
            m.config = cfg
            m.table_dtype = np.dtype(dtype)
            m.groups = ["ic"] if cfg.formulation == Formulation.IC else (
                ["uc"] if cfg.formulation == Formulation.UC else ["uc", "ic"])
            m.params, m.opt_state, m.tables = {}, {}, {}
            for key in z.files:
                if key.startswith("param/"):
                    m.params[key[6:]] = z[key].copy()
                elif key.startswith("opt/"):
                    m.opt_state[key[4:]] = z[key].copy()
                elif key.startswith("table/"):
                    m.tables[key[6:]] = HashedEmbeddingTable.from_bytes(z[key].tobytes(), dtype=dtype)
            m.input_width = cfg.embed_dim * len(m.groups) * (1 + cfg.num_tasks)
        return m


# ---------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failing


def _rel_err(a, n, floor=1e-6) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def grad_check(model: RankingModel, batch: Examples, h: float = 1e-4, tol: float = 1e-4,
               grads: Gradients | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences, per parameter group.

    Dense groups are checked element by element; embedding tables over every
    row the batch touches. ``grads`` may be supplied to check a
    precomputed (e.g. deliberately corrupted) gradient.
    """
    labels, tmask = batch.label_matrix, batch.task_mask
    if grads is None:
        _, grads = model.loss_and_backward(model.forward(batch), labels, tmask)

    def f():
        return model.loss(batch, labels, tmask)

    errors = {}
    for name, p in model.params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        errors[name] = _rel_err(grads.dense.get(name, np.zeros_like(p)), num)

    for tname, table in model.tables.items():
        slots, gr = grads.sparse.get(tname, (np.zeros(0, np.int64), np.zeros((0, table.dim))))
        uniq, inv = np.unique(slots, return_inverse=True)
        analytic = np.zeros((len(uniq), table.dim))
        np.add.at(analytic, inv, gr)
        num = np.zeros_like(analytic)
        for r, s in enumerate(uniq):
            for c in range(table.dim):
                old = table.values[s, c]
                table.values[s, c] = old + h
                up = f()
                table.values[s, c] = old - h
                down = f()
                table.values[s, c] = old
                num[r, c] = (up - down) / (2 * h)
        errors[f"table/{tname}"] = _rel_err(analytic, num)
    return GradCheckReport(errors, tol)
