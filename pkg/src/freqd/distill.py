"""Feature distillation: projector, FitNet and FreqD losses, and training drivers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, TooLarge
from .graphcore import (
    BIPARTITE,
    ITEM_KNN,
    USER_KNN,
    apply_filter,
    build_bipartite_graph,
    build_knn_graph,
    edge_dropout,
    identity_filter,
    linear_filter,
    normalized_laplacian,
)
from .recmodels import init_model
from .spectral import DEFAULT_MAX_NODES, broadcast_group_weights, eigendecompose
from .training import TrainConfig, fit, run_streams

BETA_GRID = (0.01, 0.05, 0.1, 0.5)
DEFAULT_ALPHA = 0.45
DEFAULT_BETA = 0.1


@dataclass
class Projector:
    """Linear map from student dimensionality to teacher dimensionality (no bias)."""

    weight: np.ndarray

    @classmethod
    def init(cls, d_student, d_teacher, rng=None, std=0.01):
        rng = np.random.default_rng(rng)
        return cls(rng.normal(0.0, std, size=(d_student, d_teacher)))

    @property
    def d_in(self):
        return self.weight.shape[0]

    @property
    def d_out(self):
        return self.weight.shape[1]


def project(proj, s):
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != proj.d_in:
        raise DimensionMismatch(f"student dim {s.shape[-1]} != projector input {proj.d_in}")
    return s @ proj.weight


def _masked_sq_error(a, b, rows):
    if a.shape != b.shape:
        raise DimensionMismatch(f"projected student {a.shape} vs teacher {b.shape}")
    diff = a - b if rows is None else a[rows] - b[rows]
    return float(np.sum(diff * diff))


def _masked_residual(a, b, rows):
    if rows is None:
        return a - b
    r = np.zeros_like(a)
    r[rows] = a[rows] - b[rows]
    return r


def fitnet_loss(s, t, proj, rows=None):
    """Squared Frobenius distance ``||Proj(S) - T||^2`` over ``rows`` (all if None)."""
    return _masked_sq_error(project(proj, s), np.asarray(t, dtype=np.float64), rows)


def fitnet_gradient(s, t, proj, rows=None):
    """Gradients of :func:`fitnet_loss` w.r.t. ``S`` and the projector weight."""
    s = np.asarray(s, dtype=np.float64)
    g = 2.0 * _masked_residual(project(proj, s), np.asarray(t, dtype=np.float64), rows)
    return g @ proj.weight.T, s.T @ g


def freqd_loss(s, t, proj, filt, lap, rows=None, filtered_teacher=None):
    """``||(H Proj(S) - H T)[rows]||_F^2`` with ``H`` applied to full matrices.

    ``filtered_teacher`` may carry a precomputed ``H T``.
    """
    ht = apply_filter(filt, lap, t) if filtered_teacher is None else filtered_teacher
    return _masked_sq_error(apply_filter(filt, lap, project(proj, s)), ht, rows)


def freqd_gradient(s, t, proj, filt, lap, rows=None, filtered_teacher=None):
    """Gradients of :func:`freqd_loss` w.r.t. ``S`` and the projector weight.

    ``H`` is a polynomial in the symmetric Laplacian, hence symmetric, so
    the backward pass filters the row-restricted residual once more.
    """
    s = np.asarray(s, dtype=np.float64)
    ht = apply_filter(filt, lap, t) if filtered_teacher is None else filtered_teacher
    resid = _masked_residual(apply_filter(filt, lap, project(proj, s)), ht, rows)
    g = 2.0 * apply_filter(filt, lap, resid)
    return g @ proj.weight.T, s.T @ g


def explicit_reweighted_loss_grad(ps, t, dec, weights, rows=None):
    """Spectrally reweighted loss on the row-masked residual and its gradient w.r.t. ``ps``."""
    resid = _masked_residual(ps, t, rows)
    coeffs = dec.eigenvectors.T @ resid
    per_k = np.einsum("ij,ij->i", coeffs, coeffs)
    loss = float(weights @ per_k)
    g = 2.0 * (dec.eigenvectors @ (weights[:, None] * coeffs))
    if rows is not None:
        mask = np.zeros(len(g), dtype=bool)
        mask[rows] = True
        g[~mask] = 0.0
    return loss, g


@dataclass(frozen=True)
class WeightScheme:
    group_weights: tuple

    def __post_init__(self):
        if len(self.group_weights) != 4 or any(w < 0 for w in self.group_weights):
            raise ValueError("need four nonnegative group weights")


ORIGINAL = WeightScheme((1.0, 1.0, 1.0, 1.0))
LOW_FREQUENCY_ENHANCED = WeightScheme((1.0, 0.75, 0.5, 0.25))
HIGH_FREQUENCY_ENHANCED = WeightScheme((0.25, 0.5, 0.75, 1.0))


def drop_group(i):
    """Scheme removing knowledge group ``i`` (1-based) and keeping the rest."""
    w = [1.0] * 4
    w[i - 1] = 0.0
    return WeightScheme(tuple(w))


@dataclass
class DistillConfig:
    beta: float = DEFAULT_BETA
    filter: object = field(default_factory=lambda: linear_filter(DEFAULT_ALPHA))
    graph_source: str = "knn"
    knn_k: int = 10
    dropout_rate: float = 0.1
    loss_scope: str = "batch"
    feature_norm: str = "sum"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.graph_source not in ("knn", "bipartite"):
            raise ValueError("graph_source must be 'knn' or 'bipartite'")
        if self.loss_scope not in ("batch", "full"):
            raise ValueError("loss_scope must be 'batch' or 'full'")
        if self.feature_norm not in ("sum", "rows"):
            raise ValueError("feature_norm must be 'sum' or 'rows'")


class _FeatureTerm:
    """Distillation term over user and item features with one projector per entity type."""

    def __init__(self, teacher, d_student, rng, loss_scope, feature_norm="sum"):
        self.teacher_users, self.teacher_items = (np.array(a) for a in teacher.final_embeddings())
        d_teacher = self.teacher_users.shape[1]
        self.proj_users = Projector.init(d_student, d_teacher, rng)
        self.proj_items = Projector.init(d_student, d_teacher, rng)
        self.full = loss_scope == "full"
        self.per_row = feature_norm == "rows"

    def params(self):
        return {"proj_users": self.proj_users.weight, "proj_items": self.proj_items.weight}

    def snapshot(self):
        return {k: v.copy() for k, v in self.params().items()}

    def begin_epoch(self, rng):
        pass

    def _rows(self, batch_users, batch_items):
        if self.full:
            return None, None
        return np.unique(batch_users), np.unique(batch_items)

    def _side(self, s, t, proj, rows, which):
        raise NotImplementedError

    def _scale(self, rows, n):
        if not self.per_row:
            return 1.0
        return 1.0 / (n if rows is None else len(rows))

    def loss_and_grad(self, user_final, item_final, batch_users, batch_items):
        ru, ri = self._rows(batch_users, batch_items)
        lu, gsu, gwu = self._side(user_final, self.teacher_users, self.proj_users, ru, "users")
        li, gsi, gwi = self._side(item_final, self.teacher_items, self.proj_items, ri, "items")
        if self.per_row:
            cu, ci = self._scale(ru, len(user_final)), self._scale(ri, len(item_final))
            lu, gsu, gwu = cu * lu, cu * gsu, cu * gwu
            li, gsi, gwi = ci * li, ci * gsi, ci * gwi
        return lu + li, gsu, gsi, {"proj_users": gwu, "proj_items": gwi}


class FitNetTerm(_FeatureTerm):
    def _side(self, s, t, proj, rows, which):
        loss = fitnet_loss(s, t, proj, rows)
        gs, gw = fitnet_gradient(s, t, proj, rows)
        return loss, gs, gw


class FreqDTerm(_FeatureTerm):
    """Filtered-feature loss on teacher KNN graphs (or the bipartite graph).

    Each epoch the graphs are re-dropped, the Laplacians rebuilt and ``H T``
    recomputed; ``H Proj(S)`` is filtered per batch.
    """

    def __init__(self, teacher, d_student, rng, cfg, train=None):
        super().__init__(teacher, d_student, rng, cfg.loss_scope, cfg.feature_norm)
        self.filter = cfg.filter
        self.dropout_rate = cfg.dropout_rate
        self.source = cfg.graph_source
        if self.source == "knn":
            self.graphs = {
                "users": build_knn_graph(self.teacher_users, cfg.knn_k, USER_KNN),
                "items": build_knn_graph(self.teacher_items, cfg.knn_k, ITEM_KNN),
            }
        else:
            if train is None:
                raise ValueError("bipartite graph source needs training interactions")
            self.graphs = {"joint": build_bipartite_graph(train)}
            self.n_users = train.n_users
        self.laps = {}
        self.filtered_teacher = {}
        self._refresh(None)

    def _refresh(self, rng):
        for name, g in self.graphs.items():
            if rng is not None and self.dropout_rate > 0:
                g = edge_dropout(g, self.dropout_rate, rng)
            # items absent from training are isolated in the bipartite graph
            self.laps[name] = normalized_laplacian(g, allow_isolated=self.source == "bipartite")
        if self.source == "knn":
            self.filtered_teacher["users"] = apply_filter(self.filter, self.laps["users"], self.teacher_users)
            self.filtered_teacher["items"] = apply_filter(self.filter, self.laps["items"], self.teacher_items)
        else:
            t = np.vstack([self.teacher_users, self.teacher_items])
            self.filtered_teacher["joint"] = apply_filter(self.filter, self.laps["joint"], t)

    def begin_epoch(self, rng):
        self._refresh(rng)

    def _side(self, s, t, proj, rows, which):
        lap = self.laps[which]
        ht = self.filtered_teacher[which]
        loss = freqd_loss(s, t, proj, self.filter, lap, rows, ht)
        gs, gw = freqd_gradient(s, t, proj, self.filter, lap, rows, ht)
        return loss, gs, gw

    def loss_and_grad(self, user_final, item_final, batch_users, batch_items):
        if self.source == "knn":
            return super().loss_and_grad(user_final, item_final, batch_users, batch_items)
        nu = self.n_users
        ps = np.vstack([project(self.proj_users, user_final), project(self.proj_items, item_final)])
        lap, ht = self.laps["joint"], self.filtered_teacher["joint"]
        rows = None if self.full else np.concatenate([np.unique(batch_users), nu + np.unique(batch_items)])
        resid = _masked_residual(apply_filter(self.filter, lap, ps), ht, rows)
        c = self._scale(rows, len(ps))
        loss = c * float(np.sum(resid * resid))
        g = (2.0 * c) * apply_filter(self.filter, lap, resid)
        gu, gi = g[:nu], g[nu:]
        return (loss, gu @ self.proj_users.weight.T, gi @ self.proj_items.weight.T,
                {"proj_users": user_final.T @ gu, "proj_items": item_final.T @ gi})


class ExplicitReweightTerm(_FeatureTerm):
    """Per-group weighted loss via full eigendecompositions of the teacher KNN Laplacians."""

    def __init__(self, teacher, d_student, rng, cfg, scheme, max_nodes=DEFAULT_MAX_NODES):
        super().__init__(teacher, d_student, rng, cfg.loss_scope, cfg.feature_norm)
        for t in (self.teacher_users, self.teacher_items):
            if len(t) > max_nodes:
                raise TooLarge(len(t), max_nodes)
        self.decs, self.weights = {}, {}
        for name, t, kind in (("users", self.teacher_users, USER_KNN),
                              ("items", self.teacher_items, ITEM_KNN)):
            lap = normalized_laplacian(build_knn_graph(t, cfg.knn_k, kind))
            self.decs[name] = eigendecompose(lap, max_nodes)
            self.weights[name] = broadcast_group_weights(scheme.group_weights, len(t))

    def _side(self, s, t, proj, rows, which):
        loss, g = explicit_reweighted_loss_grad(project(proj, s), t, self.decs[which],
                                                self.weights[which], rows)
        return loss, g @ proj.weight.T, s.T @ g


@dataclass
class DistillResult:
    student: object
    projectors: dict
    log: list
    best_epoch: int
    best_val_ndcg: float


def new_student(split, d_student, backbone, layers, streams):
    return init_model(split.n_users, split.n_items, d_student, backbone, layers,
                      train=split.train, rng=streams["init"])


def _run(teacher, split, cfg, seed, d_student, backbone, layers, make_term, log_path):
    streams = run_streams(seed)
    student = new_student(split, d_student, backbone, layers, streams)
    term = make_term(student, streams) if make_term is not None else None
    res = fit(student, split, cfg.train, streams, aux=term, beta=cfg.beta if term else 0.0,
              log_path=log_path)
    return DistillResult(res.model, res.aux_state, res.log, res.best_epoch, res.best_val_ndcg)


def train_plain(split, d, cfg, seed, backbone="BPRMF", layers=0, log_path=None):
    """Backbone trained on BPR alone (teachers, and the no-distillation student)."""
    cfg = cfg if isinstance(cfg, DistillConfig) else DistillConfig(beta=0.0, train=cfg)
    return _run(None, split, cfg, seed, d, backbone, layers, None, log_path)


def distill_train(teacher, split, cfg, seed, d_student=8, backbone="BPRMF", layers=0, log_path=None):
    """FreqD: BPR plus ``beta`` times the filtered-feature distillation loss."""
    def make(student, streams):
        return FreqDTerm(teacher, d_student, streams["projector"], cfg, split.train)
    return _run(teacher, split, cfg, seed, d_student, backbone, layers, make, log_path)


def fitnet_train(teacher, split, cfg, seed, d_student=8, backbone="BPRMF", layers=0, log_path=None):
    """Unfiltered feature distillation (MSE through a linear projector)."""
    def make(student, streams):
        return FitNetTerm(teacher, d_student, streams["projector"], cfg.loss_scope, cfg.feature_norm)
    return _run(teacher, split, cfg, seed, d_student, backbone, layers, make, log_path)


def group_ablation_train(teacher, split, cfg, seed, scheme, d_student=8, backbone="BPRMF",
                         layers=0, log_path=None):
    """Distillation with explicit per-knowledge-group weights (no graph dropout)."""
    def make(student, streams):
        return ExplicitReweightTerm(teacher, d_student, streams["projector"], cfg, scheme)
    return _run(teacher, split, cfg, seed, d_student, backbone, layers, make, log_path)


def projected_features(student, projectors):
    """Projected student (user, item) features from a distillation result."""
    su, si = student.final_embeddings()
    return su @ projectors["proj_users"], si @ projectors["proj_items"]


__all__ = [
    "BETA_GRID", "DEFAULT_ALPHA", "DEFAULT_BETA", "DistillConfig", "DistillResult",
    "ExplicitReweightTerm", "FitNetTerm", "FreqDTerm", "HIGH_FREQUENCY_ENHANCED",
    "LOW_FREQUENCY_ENHANCED", "ORIGINAL", "Projector", "WeightScheme", "distill_train",
    "drop_group", "explicit_reweighted_loss_grad", "fitnet_gradient", "fitnet_loss",
    "fitnet_train", "freqd_gradient", "freqd_loss", "group_ablation_train", "identity_filter",
    "project", "projected_features", "train_plain",
]
