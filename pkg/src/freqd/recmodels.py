"""BPRMF and LightGCN embedding backbones with analytic BPR gradients and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import CheckpointError, IndexOutOfRange, NoNegativeAvailable
from .graphcore import build_bipartite_graph, normalized_adjacency

BPRMF = "BPRMF"
LIGHTGCN = "LightGCN"
SCORE_CLAMP = 40.0


@dataclass
class EmbeddingModel:
    """User/item embedding tables plus an optional propagation operator.

    For LightGCN the final representation is the mean of layers 0..L of
    ``E_{l+1} = A_hat E_l`` over the stacked [users; items] table, with
    ``A_hat`` the symmetric-normalized bipartite adjacency.
    """

    user_emb: np.ndarray
    item_emb: np.ndarray
    backbone: str = BPRMF
    layers: int = 0
    propagation: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.user_emb = np.asarray(self.user_emb, dtype=np.float64)
        self.item_emb = np.asarray(self.item_emb, dtype=np.float64)
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2:
            raise ValueError("embedding tables must be 2-D")
        if self.user_emb.shape[1] != self.item_emb.shape[1] or self.user_emb.shape[1] < 1:
            raise ValueError("user and item embeddings need the same dimension d >= 1")
        if self.backbone not in (BPRMF, LIGHTGCN):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == LIGHTGCN and self.layers > 0 and self.propagation is None:
            raise ValueError("LightGCN needs a propagation matrix")

    @property
    def n_users(self):
        return self.user_emb.shape[0]

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    @property
    def dim(self):
        return self.user_emb.shape[1]

    def copy(self):
        return EmbeddingModel(self.user_emb.copy(), self.item_emb.copy(),
                              self.backbone, self.layers, self.propagation)

    def params(self):
        return {"user_emb": self.user_emb, "item_emb": self.item_emb}

    def _propagate(self, stacked):
        if self.backbone == BPRMF or self.layers == 0:
            return stacked
        acc = stacked.copy()
        cur = stacked
        for _ in range(self.layers):
            cur = self.propagation @ cur
            acc += cur
        return acc / (self.layers + 1)

    def final_embeddings(self):
        """Final (user, item) representations used for scoring and distillation."""
        if self.backbone == BPRMF or self.layers == 0:
            return self.user_emb, self.item_emb
        out = self._propagate(np.vstack([self.user_emb, self.item_emb]))
        return out[:self.n_users], out[self.n_users:]

    def backprop(self, grad_users, grad_items):
        """Map gradients w.r.t. final representations to the embedding tables.

        The layer-mean operator is a polynomial in a symmetric matrix, so it
        is its own transpose.
        """
        if self.backbone == BPRMF or self.layers == 0:
            return grad_users, grad_items
        g = self._propagate(np.vstack([grad_users, grad_items]))
        return g[:self.n_users], g[self.n_users:]

    def score_matrix(self, users=None):
        uf, itf = self.final_embeddings()
        if users is not None:
            uf = uf[users]
        return uf @ itf.T


def lightgcn_propagation(train):
    return normalized_adjacency(build_bipartite_graph(train))


def init_model(n_users, n_items, dim, backbone=BPRMF, layers=0, train=None, rng=None, std=0.01):
    """Gaussian-initialized model; LightGCN builds its operator from ``train``."""
    rng = np.random.default_rng(rng)
    user_emb = rng.normal(0.0, std, size=(n_users, dim))
    item_emb = rng.normal(0.0, std, size=(n_items, dim))
    prop = None
    if backbone == LIGHTGCN and layers > 0:
        if train is None:
            raise ValueError("LightGCN initialization needs training interactions")
        prop = lightgcn_propagation(train)
    return EmbeddingModel(user_emb, item_emb, backbone, layers, prop)


@dataclass(frozen=True)
class TrainTriple:
    user: int
    pos_item: int
    neg_item: int


def _check_index(idx, size, what):
    if not 0 <= idx < size:
        raise IndexOutOfRange(f"{what} index {idx} outside [0, {size})")


def score(model, user, item):
    _check_index(user, model.n_users, "user")
    _check_index(item, model.n_items, "item")
    uf, itf = model.final_embeddings()
    return float(uf[user] @ itf[item])


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bpr_loss(model, triple):
    """``-ln sigmoid(score(u, pos) - score(u, neg))`` for one triple."""
    diff = score(model, triple.user, triple.pos_item) - score(model, triple.user, triple.neg_item)
    diff = np.clip(diff, -SCORE_CLAMP, SCORE_CLAMP)
    return float(-log_sigmoid(diff))


def bpr_batch_grad(user_final, item_final, users, pos, neg):
    """Mean BPR loss over a batch and its gradient w.r.t. the final representations."""
    u = user_final[users]
    diff = np.einsum("ij,ij->i", u, item_final[pos] - item_final[neg])
    diff = np.clip(diff, -SCORE_CLAMP, SCORE_CLAMP)
    loss = float(np.mean(-log_sigmoid(diff)))
    # d/dx [-ln sigmoid(x)] = sigmoid(x) - 1
    coef = (sigmoid(diff) - 1.0) / len(users)
    g_user = np.zeros_like(user_final)
    g_item = np.zeros_like(item_final)
    np.add.at(g_user, users, coef[:, None] * (item_final[pos] - item_final[neg]))
    np.add.at(g_item, pos, coef[:, None] * u)
    np.add.at(g_item, neg, -coef[:, None] * u)
    return loss, g_user, g_item


def bpr_gradients(model, batch):
    """Mean BPR loss and gradients w.r.t. ``user_emb`` / ``item_emb``."""
    users = np.array([t.user for t in batch], dtype=np.int64)
    pos = np.array([t.pos_item for t in batch], dtype=np.int64)
    neg = np.array([t.neg_item for t in batch], dtype=np.int64)
    uf, itf = model.final_embeddings()
    loss, gu, gi = bpr_batch_grad(uf, itf, users, pos, neg)
    gu, gi = model.backprop(gu, gi)
    return loss, {"user_emb": gu, "item_emb": gi}


class Adam:
    """Adam over a dict of named arrays (updated in place).

    ``weight_decay`` is an L2 penalty: ``weight_decay * p`` joins the gradient
    of every parameter before the moment updates.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if self.weight_decay:
                g = self.weight_decay * p if g is None else g + self.weight_decay * p
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def train_step(model, batch, lr=1e-3, weight_decay=0.0, optimizer=None):
    """One Adam update on the mean BPR loss of ``batch``; returns (model, loss).

    Pass a persistent ``optimizer`` to carry moment estimates across steps.
    """
    if lr <= 0:
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        loss = float(np.mean([bpr_loss(model, t) for t in batch])) if batch else 0.0
        return model, loss
    opt = optimizer or Adam(lr=lr, weight_decay=weight_decay)
    if batch:
        loss, grads = bpr_gradients(model, batch)
    else:
        loss, grads = 0.0, {}
    opt.step(model.params(), grads)
    return model, loss


def sample_negatives(interactions, user, count=1, seed=None):
    """Uniform draws (with replacement) from items ``user`` has not interacted with."""
    rng = np.random.default_rng(seed)
    seen = np.unique(interactions.items[interactions.users == user])
    candidates = np.setdiff1d(np.arange(interactions.n_items), seen, assume_unique=True)
    if len(candidates) == 0:
        raise NoNegativeAvailable(user)
    return candidates[rng.integers(len(candidates), size=count)]


def sample_batch_negatives(users, n_items, positive_keys, rng, max_rounds=100):
    """Vectorized rejection sampling of one negative per user.

    ``positive_keys`` is the sorted array from :meth:`InteractionSet.keys`.
    Each accepted draw is uniform over the user's non-interacted items.
    """
    neg = rng.integers(n_items, size=len(users))
    for _ in range(max_rounds):
        keys = users * n_items + neg
        pos = np.searchsorted(positive_keys, keys)
        pos = np.minimum(pos, len(positive_keys) - 1)
        bad = positive_keys[pos] == keys
        if not bad.any():
            return neg
        neg[bad] = rng.integers(n_items, size=int(bad.sum()))
    raise NoNegativeAvailable(int(users[bad][0]))


_MAGIC = b"FRQD"
_VERSION = 1
_KIND_TAG = {BPRMF: 0, LIGHTGCN: 1}


def save_checkpoint(path, model):
    """Binary checkpoint: magic, u32 version/|U|/|I|/d/backbone tag, float64 LE tables.

    The backbone tag packs the kind in the low 16 bits and the LightGCN layer
    count in the high 16 bits.
    """
    tag = _KIND_TAG[model.backbone] | (int(model.layers) << 16)
    header = _MAGIC + struct.pack("<5I", _VERSION, model.n_users, model.n_items, model.dim, tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(model.user_emb, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.item_emb, dtype="<f8").tobytes())


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        head = fh.read(24)
    if len(head) != 24 or head[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a FRQD checkpoint")
    version, nu, ni, d, tag = struct.unpack("<5I", head[4:])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    kinds = {v: k for k, v in _KIND_TAG.items()}
    if tag & 0xFFFF not in kinds:
        raise CheckpointError(f"{path}: unknown backbone tag {tag}")
    return {"n_users": nu, "n_items": ni, "dim": d,
            "backbone": kinds[tag & 0xFFFF], "layers": tag >> 16}


def load_checkpoint(path, train=None):
    """Load a checkpoint; LightGCN models rebuild propagation from ``train``."""
    meta = read_checkpoint_header(path)
    nu, ni, d = meta["n_users"], meta["n_items"], meta["dim"]
    with open(path, "rb") as fh:
        fh.seek(24)
        raw = fh.read()
    if len(raw) != 8 * d * (nu + ni):
        raise CheckpointError(f"{path}: truncated or oversized payload")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    user_emb = flat[:nu * d].reshape(nu, d).copy()
    item_emb = flat[nu * d:].reshape(ni, d).copy()
    prop = None
    if meta["backbone"] == LIGHTGCN and meta["layers"] > 0:
        if train is None:
            raise CheckpointError("LightGCN checkpoint needs training interactions to rebuild propagation")
        prop = lightgcn_propagation(train)
    return EmbeddingModel(user_emb, item_emb, meta["backbone"], meta["layers"], prop)
