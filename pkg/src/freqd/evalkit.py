"""Full-ranking top-N evaluation and early stopping."""

from __future__ import annotations

import math

import numpy as np

from .errors import EmptyRelevant, NotEnoughItems

DEFAULT_NS = (10, 20)


def topn_from_scores(scores, n, excluded=()):
    """Indices of the ``n`` best non-excluded items; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    excluded = np.asarray(list(excluded) if not isinstance(excluded, np.ndarray) else excluded,
                          dtype=np.int64)
    if n < 1:
        raise ValueError("N must be >= 1")
    allowed = len(scores) - len(np.unique(excluded))
    if allowed < n:
        raise NotEnoughItems(f"only {allowed} rankable items for N={n}")
    masked = scores.copy()
    masked[excluded] = -np.inf
    order = np.argsort(-masked, kind="stable")
    return order[:n]


def rank_topn(model, user, n, excluded=()):
    return topn_from_scores(model.score_matrix([user])[0], n, excluded)


def recall_at_n(topn, relevant):
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise EmptyRelevant("recall needs at least one relevant item")
    hits = sum(1 for i in topn if int(i) in relevant)
    return hits / len(relevant)


def ndcg_at_n(topn, relevant):
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise EmptyRelevant("NDCG needs at least one relevant item")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(topn) if int(i) in relevant)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(topn), len(relevant))))
    return dcg / idcg


def _user_lists(data, n_users):
    lists = [[] for _ in range(n_users)]
    for u, i in zip(data.users.tolist(), data.items.tolist()):
        lists[u].append(i)
    return lists


def evaluate_scores(score_fn, n_users, n_items, relevant, excluded, ns=DEFAULT_NS, chunk=512):
    """Mean Recall@N / NDCG@N over users with a nonempty relevant set.

    ``score_fn(users)`` returns a (len(users), n_items) score block;
    ``relevant`` and ``excluded`` are per-user item lists.
    """
    ns = tuple(sorted(ns))
    n_max = ns[-1]
    sums = {(m, n): 0.0 for m in ("recall", "ndcg") for n in ns}
    users = np.array([u for u in range(n_users) if len(relevant[u])], dtype=np.int64)
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        scores = np.array(score_fn(block), dtype=np.float64, copy=True)
        for row, u in enumerate(block):
            if len(excluded[u]):
                scores[row, excluded[u]] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :n_max]
        for row, u in enumerate(block):
            rel = set(relevant[u])
            for n in ns:
                top = order[row, :n].tolist()
                sums[("recall", n)] += recall_at_n(top, rel)
                sums[("ndcg", n)] += ndcg_at_n(top, rel)
    if len(users) == 0:
        return {key: 0.0 for key in sums}, 0
    return {key: val / len(users) for key, val in sums.items()}, len(users)


def evaluate(model, split, ns=DEFAULT_NS, on="test"):
    """Full-ranking metrics on ``test`` (train and validation excluded) or ``validation``."""
    n_users, n_items = split.n_users, split.n_items
    excluded = _user_lists(split.train, n_users)
    if on == "test":
        val = _user_lists(split.validation, n_users)
        excluded = [a + b for a, b in zip(excluded, val)]
        relevant = _user_lists(split.test, n_users)
    elif on == "validation":
        relevant = _user_lists(split.validation, n_users)
    else:
        raise ValueError("on must be 'test' or 'validation'")
    uf, itf = model.final_embeddings()
    metrics, _ = evaluate_scores(lambda us: uf[us] @ itf.T, n_users, n_items,
                                 relevant, excluded, ns)
    return metrics


def metrics_csv(metrics):
    lines = ["metric,N,value"]
    for (name, n), value in sorted(metrics.items(), key=lambda kv: (kv[0][0] != "recall", kv[0][1])):
        label = "Recall" if name == "recall" else "NDCG"
        lines.append(f"{label},{n},{value:.6f}")
    return "\n".join(lines) + "\n"


def metrics_summary(metrics):
    ns = sorted({n for _, n in metrics})
    rows = [f"{'N':>4} {'Recall':>8} {'NDCG':>8}"]
    for n in ns:
        rows.append(f"{n:>4} {metrics[('recall', n)]:8.4f} {metrics[('ndcg', n)]:8.4f}")
    return "\n".join(rows)


class EarlyStopper:
    """Track the best validation score; stop after ``patience`` epochs without improvement."""

    def __init__(self, patience=30):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch, value):
        """Record ``value``; returns True when it is a new best."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience
