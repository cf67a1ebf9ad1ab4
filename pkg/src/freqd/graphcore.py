"""Sparse graphs, normalized Laplacians and polynomial graph filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, EmptyEmbedding, InvalidFilter, IsolatedNode

USER_KNN = "UserKNN"
ITEM_KNN = "ItemKNN"
BIPARTITE = "Bipartite"
GRAPH_KINDS = (USER_KNN, ITEM_KNN, BIPARTITE)


@dataclass(frozen=True)
class SparseGraph:
    """Undirected unit-weight graph stored as both edge directions.

    ``src``/``dst``/``weight`` list every directed edge, sorted by (src, dst).
    """

    node_count: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    kind: str = USER_KNN

    def __post_init__(self):
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {self.kind!r}")
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        w = np.asarray(self.weight, dtype=np.float64)
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        for arr in (src, dst, w):
            arr.setflags(write=False)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weight", w)

    @classmethod
    def from_undirected(cls, node_count, pairs, kind=USER_KNN, weights=None):
        """Build from undirected pairs (i, j), i != j; duplicates collapse."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise ValueError("self-loops are not allowed")
        if len(pairs) and (pairs.min() < 0 or pairs.max() >= node_count):
            raise IndexError("edge endpoint outside [0, node_count)")
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        und, first = np.unique(np.stack([lo, hi], axis=1), axis=0, return_index=True)
        if weights is None:
            w = np.ones(len(und))
        else:
            w = np.asarray(weights, dtype=np.float64)[first]
            if np.any(w <= 0):
                raise ValueError("edge weights must be positive")
        src = np.concatenate([und[:, 0], und[:, 1]])
        dst = np.concatenate([und[:, 1], und[:, 0]])
        return cls(int(node_count), src, dst, np.concatenate([w, w]), kind)

    @property
    def edge_count(self):
        """Number of undirected edges."""
        return len(self.src) // 2

    def undirected_edges(self):
        keep = self.src < self.dst
        return np.stack([self.src[keep], self.dst[keep]], axis=1), self.weight[keep]

    def adjacency(self):
        n = self.node_count
        return sp.csr_matrix((self.weight, (self.src, self.dst)), shape=(n, n))

    def degree(self):
        return np.bincount(self.src, weights=self.weight, minlength=self.node_count)

    def edge_set(self):
        """Set of frozenset({i, j}) for each undirected edge."""
        pairs, _ = self.undirected_edges()
        return {frozenset((int(i), int(j))) for i, j in pairs}

    def permuted(self, perm):
        """Relabel node ``v`` as ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return SparseGraph(self.node_count, perm[self.src], perm[self.dst], self.weight, self.kind)


@dataclass(frozen=True)
class Laplacian:
    """Symmetric normalized Laplacian ``I - D^-1/2 A D^-1/2`` in CSR form."""

    matrix: sp.csr_matrix
    degree: np.ndarray

    @property
    def node_count(self):
        return self.matrix.shape[0]

    def dense(self):
        return self.matrix.toarray()


@dataclass(frozen=True)
class GraphFilter:
    """Polynomial filter ``H(L) = sum_k coeffs[k] L^k``."""

    coeffs: tuple
    family: str = "Custom"

    @property
    def order(self):
        return len(self.coeffs) - 1

    def response(self, lam):
        """Scalar response ``h(lambda)``, vectorized over ``lam``."""
        lam = np.asarray(lam, dtype=np.float64)
        out = np.zeros_like(lam)
        for c in reversed(self.coeffs):
            out = out * lam + c
        return out

    def is_non_increasing(self, lo=0.0, hi=2.0, tol=1e-12):
        """Exact check that ``h`` is non-increasing on ``[lo, hi]``.

        The maximum of ``h'`` over an interval is attained at an endpoint or
        at a real root of ``h''``, so those points suffice.
        """
        poly = np.polynomial.Polynomial(self.coeffs)
        d1 = poly.deriv()
        pts = [lo, hi]
        if self.order >= 3:
            for r in d1.deriv().roots():
                if abs(r.imag) < 1e-12 and lo <= r.real <= hi:
                    pts.append(r.real)
        return max(d1(p) for p in pts) <= tol

    def __str__(self):
        if self.family == "Identity":
            return "identity"
        if self.family == "Linear":
            return f"linear:{-self.coeffs[1]:g}"
        if self.family == "Quadratic":
            return f"quadratic:{self.coeffs[2]:g},{self.coeffs[1]:g}"
        return "custom:" + ",".join(f"{c:g}" for c in self.coeffs)


def identity_filter():
    return GraphFilter((1.0,), "Identity")


def linear_filter(alpha):
    """``h(lambda) = 1 - alpha * lambda`` with ``0 <= alpha <= 0.5``."""
    alpha = float(alpha)
    if not 0.0 <= alpha <= 0.5:
        raise InvalidFilter(f"linear filter needs 0 <= alpha <= 0.5, got {alpha}")
    return GraphFilter((1.0, -alpha), "Linear")


def quadratic_filter(a, b):
    """``h(lambda) = a lambda^2 + b lambda + 1``, required non-increasing on [0, 2]."""
    f = GraphFilter((1.0, float(b), float(a)), "Quadratic")
    if not f.is_non_increasing():
        raise InvalidFilter(f"quadratic filter a={a}, b={b} is not non-increasing on [0, 2]")
    return f


def custom_filter(coeffs, require_decreasing=True):
    f = GraphFilter(tuple(float(c) for c in coeffs), "Custom")
    if not f.coeffs:
        raise InvalidFilter("filter needs at least one coefficient")
    if require_decreasing and not f.is_non_increasing():
        raise InvalidFilter("filter response must be non-increasing on [0, 2]")
    return f


def parse_filter(text):
    """Parse ``identity``, ``linear:ALPHA``, ``quadratic:A,B`` or ``custom:c0,c1,...``."""
    text = text.strip().lower()
    name, _, arg = text.partition(":")
    try:
        if name == "identity" and not arg:
            return identity_filter()
        if name == "linear":
            return linear_filter(float(arg))
        if name == "quadratic":
            a, b = (float(v) for v in arg.split(","))
            return quadratic_filter(a, b)
        if name == "custom":
            return custom_filter([float(v) for v in arg.split(",")])
    except ValueError as exc:
        if isinstance(exc, InvalidFilter):
            raise
        raise InvalidFilter(f"cannot parse filter {text!r}") from None
    raise InvalidFilter(f"unknown filter {text!r}")


def pairwise_sq_distances(x, y=None):
    y = x if y is None else y
    xx = np.einsum("ij,ij->i", x, x)
    yy = np.einsum("ij,ij->i", y, y)
    d = xx[:, None] + yy[None, :] - 2.0 * (x @ y.T)
    np.maximum(d, 0.0, out=d)
    return d


def build_knn_graph(embeddings, k=10, kind=USER_KNN, chunk=1024):
    """Exact Euclidean KNN graph, union-symmetrized, unit weights.

    Self is excluded; distance ties resolve to the lower node index.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise EmptyEmbedding("embedding matrix is empty")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to build a KNN graph")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(int(k), n - 1)
    src, dst = [], []
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d = pairwise_sq_distances(x[lo:hi], x)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
        src.append(np.repeat(np.arange(lo, hi), k))
        dst.append(nbrs.ravel())
    pairs = np.stack([np.concatenate(src), np.concatenate(dst)], axis=1)
    return SparseGraph.from_undirected(n, pairs, kind)


def build_bipartite_graph(interactions):
    """User-item graph with items offset by ``n_users``; one unit edge per pair."""
    if len(interactions) == 0:
        raise ValueError("no interactions")
    pairs = np.stack([interactions.users, interactions.items + interactions.n_users], axis=1)
    return SparseGraph.from_undirected(interactions.n_users + interactions.n_items, pairs, BIPARTITE)


def normalized_laplacian(g, allow_isolated=False):
    """``I - D^-1/2 A D^-1/2``.

    Isolated nodes raise :class:`IsolatedNode` unless ``allow_isolated``, in
    which case their row is the unit row (a lone eigenvalue of 1).
    """
    deg = g.degree()
    isolated = np.flatnonzero(deg <= 0)
    if len(isolated) and not allow_isolated:
        raise IsolatedNode(isolated[0])
    inv_sqrt = np.zeros_like(deg, dtype=np.float64)
    inv_sqrt[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    vals = -g.weight * inv_sqrt[g.src] * inv_sqrt[g.dst]
    n = g.node_count
    off = sp.csr_matrix((vals, (g.src, g.dst)), shape=(n, n))
    mat = (sp.identity(n, format="csr") + off).tocsr()
    mat.sort_indices()
    return Laplacian(mat, deg)


def normalized_adjacency(g):
    """``D^-1/2 A D^-1/2`` with zero rows for isolated nodes."""
    deg = g.degree()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    vals = g.weight * inv_sqrt[g.src] * inv_sqrt[g.dst]
    n = g.node_count
    return sp.csr_matrix((vals, (g.src, g.dst)), shape=(n, n))


def edge_dropout(g, rate=0.1, seed=None):
    """Keep each undirected edge with probability ``1 - rate``.

    Nodes left without edges (but which had some before) get back one of
    their original edges, chosen uniformly. ``seed`` may be an int or a
    ``numpy.random.Generator``; the latter is advanced in place.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    pairs, w = g.undirected_edges()
    keep = rng.random(len(pairs)) >= rate
    if keep.all():
        return g
    kept_deg = np.bincount(pairs[keep].ravel(), minlength=g.node_count)
    orig_deg = np.bincount(pairs.ravel(), minlength=g.node_count)
    for v in np.flatnonzero((kept_deg == 0) & (orig_deg > 0)):
        if kept_deg[v] > 0:
            continue
        incident = np.flatnonzero((pairs[:, 0] == v) | (pairs[:, 1] == v))
        e = incident[rng.integers(len(incident))]
        keep[e] = True
        kept_deg[pairs[e]] += 1
    return SparseGraph.from_undirected(g.node_count, pairs[keep], g.kind, weights=w[keep])


def apply_filter(filt, lap, x):
    """Compute ``sum_k theta_k L^k x`` with K sparse products (Horner form).

    The identity filter returns ``x`` itself, so downstream results match the
    unfiltered computation bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    n = lap.node_count
    if x.shape[0] != n:
        raise DimensionMismatch(f"feature rows {x.shape[0]} != graph nodes {n}")
    coeffs = filt.coeffs
    if len(coeffs) == 1:
        return x if coeffs[0] == 1.0 else coeffs[0] * x
    out = coeffs[-1] * x
    for c in reversed(coeffs[:-1]):
        out = lap.matrix @ out
        out += c * x
    return out


def write_graph(path, g):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"nodes {g.node_count}\n")
        for i, j, w in zip(g.src, g.dst, g.weight):
            fh.write(f"{i}\t{j}\t{w:.17g}\n")


def read_graph(path, kind=USER_KNN):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "nodes":
            raise ValueError(f"{path}: expected 'nodes <n>' header")
        n = int(header[1])
        rows = [line.split("\t") for line in fh if line.strip()]
    src = np.array([int(r[0]) for r in rows], dtype=np.int64)
    dst = np.array([int(r[1]) for r in rows], dtype=np.int64)
    w = np.array([float(r[2]) for r in rows])
    g = SparseGraph(n, src, dst, w, kind)
    fwd = set(zip(g.src.tolist(), g.dst.tolist(), g.weight.tolist()))
    if any((j, i, w) not in fwd for i, j, w in fwd):
        raise ValueError(f"{path}: edge list is not symmetric")
    if np.any(g.src == g.dst) or (len(src) and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n)):
        raise ValueError(f"{path}: invalid edge endpoints")
    return g
