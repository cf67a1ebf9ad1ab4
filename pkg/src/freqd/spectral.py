"""Dense spectral decomposition, frequency components and decomposition checks.

Everything here materializes the full eigenbasis, so it is meant for desk-scale
graphs (a few thousand nodes at most). Training at scale goes through
:func:`freqd.graphcore.apply_filter` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, NonMonotoneWeights, TooLarge
from .graphcore import apply_filter

DEFAULT_MAX_NODES = 4096
THEOREM3_MAX_NODES = 64


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self):
        return len(self.eigenvalues)


@dataclass(frozen=True)
class FrequencyComponent:
    index: int
    component: np.ndarray


@dataclass(frozen=True)
class KnowledgeGroups:
    """Four consecutive frequency bands, as 0-based half-open index ranges."""

    n: int
    bounds: tuple

    def ranges(self):
        b = self.bounds
        return [range(b[i], b[i + 1]) for i in range(4)]

    def one_based(self):
        return [list(range(r.start + 1, r.stop + 1)) for r in self.ranges()]


@dataclass(frozen=True)
class VerificationReport:
    name: str
    lhs: float
    rhs: float
    rel_err: float

    def passed(self, tol):
        return self.rel_err <= tol

    def lines(self):
        return [f"lhs={self.lhs!r}", f"rhs={self.rhs!r}", f"rel_err={self.rel_err!r}"]


def relative_error(lhs, rhs):
    scale = max(abs(lhs), abs(rhs))
    if scale == 0.0:
        return 0.0
    return abs(lhs - rhs) / scale


def canonicalize_signs(vectors, tol=1e-12):
    """Flip columns so that the first entry with magnitude above ``tol`` is positive."""
    v = np.array(vectors, dtype=np.float64, copy=True)
    big = np.abs(v) > tol
    first = np.argmax(big, axis=0)
    signs = np.sign(v[first, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    v *= signs
    return v


def eigendecompose(lap, max_nodes=DEFAULT_MAX_NODES):
    """Full eigendecomposition of a Laplacian, eigenvalues ascending."""
    n = lap.node_count
    if n > max_nodes:
        raise TooLarge(n, max_nodes)
    dense = lap.dense()
    dense = 0.5 * (dense + dense.T)
    vals, vecs = np.linalg.eigh(dense)
    return SpectralDecomposition(vals, canonicalize_signs(vecs))


def frequency_component(x, k, dec):
    """The ``k``-th (1-based) frequency component ``u_k u_k^T x``."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= dec.n:
        raise IndexOutOfRange(f"frequency index {k} outside [1, {dec.n}]")
    if x.shape[0] != dec.n:
        raise DimensionMismatch(f"feature rows {x.shape[0]} != {dec.n}")
    u = dec.eigenvectors[:, k - 1]
    comp = np.outer(u, u @ x) if x.ndim == 2 else u * (u @ x)
    return FrequencyComponent(k, comp)


def spectral_coefficients(x, dec):
    """Graph Fourier coefficients ``U^T x`` (one row per frequency)."""
    return dec.eigenvectors.T @ x


def per_frequency_losses(s_proj, t, dec):
    """``||u_k u_k^T (s_proj - t)||_F^2`` for every k (= squared norm of row k of U^T D)."""
    s_proj = np.asarray(s_proj, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if s_proj.shape != t.shape:
        raise DimensionMismatch(f"projected student {s_proj.shape} vs teacher {t.shape}")
    if s_proj.shape[0] != dec.n:
        raise DimensionMismatch(f"feature rows {s_proj.shape[0]} != {dec.n}")
    coeffs = spectral_coefficients(s_proj - t, dec)
    return np.einsum("ij,ij->i", coeffs, coeffs)


def knowledge_groups(n):
    if n < 1:
        raise ValueError("need at least one frequency")
    return KnowledgeGroups(n, (0, n // 4, n // 2, (3 * n) // 4, n))


def group_losses(per_k, groups=None):
    """Per-group sums of per-frequency losses (each summed left to right)."""
    per_k = np.asarray(per_k, dtype=np.float64)
    groups = knowledge_groups(len(per_k)) if groups is None else groups
    if groups.n != len(per_k):
        raise DimensionMismatch(f"{len(per_k)} losses for {groups.n} frequencies")
    out = []
    for r in groups.ranges():
        acc = 0.0
        for k in r:
            acc += per_k[k]
        out.append(acc)
    return tuple(out)


def broadcast_group_weights(group_weights, n):
    """Expand four per-group weights to one weight per frequency index."""
    w = np.empty(n)
    for weight, r in zip(group_weights, knowledge_groups(n).ranges()):
        w[r.start:r.stop] = weight
    return w


def check_weights(weights, eigenvalues, tol=1e-12):
    """Raise unless weights are nonnegative and non-increasing in eigenvalue."""
    w = np.asarray(weights, dtype=np.float64)
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(w < 0):
        raise NonMonotoneWeights("weights must be nonnegative")
    order = np.argsort(lam, kind="stable")
    w, lam = w[order], lam[order]
    rising = (np.diff(w) > tol) & (np.diff(lam) > tol)
    if rising.any():
        k = int(np.flatnonzero(rising)[0])
        raise NonMonotoneWeights(
            f"weight increases from {w[k]} to {w[k + 1]} between frequencies "
            f"{lam[k]:.6g} and {lam[k + 1]:.6g}"
        )


def reweighted_loss_explicit(s_proj, t, dec, weights, strict=False):
    """``sum_k weights[k] * ||u_k u_k^T (s_proj - t)||_F^2``.

    Monotonicity is only enforced with ``strict=True``; group ablations
    deliberately use non-monotone weights.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (dec.n,):
        raise DimensionMismatch(f"{weights.shape} weights for {dec.n} frequencies")
    if strict:
        check_weights(weights, dec.eigenvalues)
    return float(weights @ per_frequency_losses(s_proj, t, dec))


def verify_theorem1(s_proj, t, dec):
    """Plain Frobenius loss versus the sum of per-frequency losses."""
    diff = np.asarray(s_proj, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    lhs = float(np.sum(diff * diff))
    rhs = math.fsum(per_frequency_losses(s_proj, t, dec))
    return VerificationReport("theorem1", lhs, rhs, relative_error(lhs, rhs))


def verify_theorem2(lap, filt, s_proj, t, dec=None):
    """Filtered-feature loss (sparse path) versus h^2-weighted spectral loss."""
    hs = apply_filter(filt, lap, s_proj)
    ht = apply_filter(filt, lap, t)
    diff = hs - ht
    lhs = float(np.sum(diff * diff))
    dec = eigendecompose(lap) if dec is None else dec
    h = filt.response(dec.eigenvalues)
    rhs = math.fsum(h * h * per_frequency_losses(s_proj, t, dec))
    return VerificationReport("theorem2", lhs, rhs, relative_error(lhs, rhs))


def verify_theorem3(dec, s, t, max_nodes=THEOREM3_MAX_NODES):
    """Relation loss ``||SS^T - TT^T||_F^2`` versus its double sum over frequency pairs.

    Each pair term is formed from explicit rank-1 components, so the cost is
    O(n^4); hence the tight node cap.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n = dec.n
    if n > max_nodes:
        raise TooLarge(n, max_nodes)
    if s.shape[0] != n or t.shape[0] != n:
        raise DimensionMismatch("feature rows must match the decomposition size")
    gap = s @ s.T - t @ t.T
    lhs = float(np.sum(gap * gap))
    u = dec.eigenvectors
    s_comp = [np.outer(u[:, k], u[:, k] @ s) for k in range(n)]
    t_comp = [np.outer(u[:, k], u[:, k] @ t) for k in range(n)]
    terms = []
    for k in range(n):
        for p in range(n):
            m = s_comp[k] @ s_comp[p].T - t_comp[k] @ t_comp[p].T
            terms.append(np.sum(m * m))
    rhs = math.fsum(terms)
    return VerificationReport("theorem3", lhs, rhs, relative_error(lhs, rhs))
