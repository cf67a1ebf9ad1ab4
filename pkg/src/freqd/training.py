"""Epoch loop shared by plain backbone training and distillation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss
from .evalkit import EarlyStopper, evaluate
from .recmodels import Adam, bpr_batch_grad, sample_batch_negatives

LOG_FIELDS = ("epoch", "base_loss", "freqd_loss", "val_recall@20", "val_ndcg@20")


def run_streams(seed):
    """Independent generators for initialization, batching, graph dropout and projectors.

    Keeping the streams separate means that switching distillation on or off
    never shifts the batches a run sees.
    """
    init, batches, dropout, projector = np.random.SeedSequence(seed).spawn(4)
    return {
        "init": np.random.default_rng(init),
        "batches": np.random.default_rng(batches),
        "dropout": np.random.default_rng(dropout),
        "projector": np.random.default_rng(projector),
    }


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 1024
    max_epochs: int = 1000
    patience: int = 30

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class FitResult:
    model: object
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_ndcg: float = float("-inf")
    aux_state: dict = field(default_factory=dict)


class RunLog:
    """Per-epoch CSV log, flushed after every row."""

    def __init__(self, path=None):
        self.rows = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(LOG_FIELDS)
            self._fh.flush()

    def append(self, row):
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([row["epoch"]] + [f"{row[k]:.8g}" for k in LOG_FIELDS[1:]])
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def fit(model, split, cfg, streams, aux=None, beta=0.0, log_path=None, on_epoch=None):
    """Train ``model`` in place with BPR (+ ``beta`` * auxiliary loss).

    ``aux`` must provide ``params()``, ``begin_epoch(rng)`` and
    ``loss_and_grad(user_final, item_final, batch_users, batch_items)``.
    Returns the best-validation snapshot (NDCG@20) in a :class:`FitResult`.
    """
    train = split.train
    n_items = train.n_items
    keys = train.keys()
    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    use_aux = aux is not None and beta != 0.0
    rng = streams["batches"]
    log = RunLog(log_path)
    best_model, best_aux = model.copy(), aux.snapshot() if aux is not None else {}
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            if use_aux:
                aux.begin_epoch(streams["dropout"])
            perm = rng.permutation(len(train))
            base_total, aux_total, n_batches = 0.0, 0.0, 0
            for start in range(0, len(perm), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                users = train.users[idx]
                pos = train.items[idx]
                neg = sample_batch_negatives(users, n_items, keys, rng)
                uf, itf = model.final_embeddings()
                loss, gu, gi = bpr_batch_grad(uf, itf, users, pos, neg)
                grads = {}
                aux_loss = 0.0
                if use_aux:
                    aux_loss, agu, agi, aux_grads = aux.loss_and_grad(
                        uf, itf, users, np.concatenate([pos, neg]))
                    gu = gu + beta * agu
                    gi = gi + beta * agi
                    for name, g in aux_grads.items():
                        grads[name] = beta * g
                total = loss + beta * aux_loss
                if not math.isfinite(total):
                    raise NonFiniteLoss(
                        f"epoch {epoch}, batch {n_batches}: base={loss!r} aux={aux_loss!r}")
                gu, gi = model.backprop(gu, gi)
                grads["user_emb"] = gu
                grads["item_emb"] = gi
                params = model.params()
                if aux is not None:
                    params.update(aux.params())
                opt.step(params, grads)
                base_total += loss
                aux_total += aux_loss
                n_batches += 1
            metrics = evaluate(model, split, ns=(20,), on="validation")
            row = {"epoch": epoch, "base_loss": base_total / n_batches,
                   "freqd_loss": aux_total / n_batches,
                   "val_recall@20": metrics[("recall", 20)],
                   "val_ndcg@20": metrics[("ndcg", 20)]}
            log.append(row)
            if on_epoch is not None:
                on_epoch(row)
            if stopper.update(epoch, row["val_ndcg@20"]):
                best_model = model.copy()
                best_aux = aux.snapshot() if aux is not None else {}
            if stopper.should_stop:
                break
    finally:
        log.close()
    return FitResult(best_model, log.rows, stopper.best_epoch, stopper.best, best_aux)
