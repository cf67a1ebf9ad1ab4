"""``freqd`` command line: prepare data, train, distill, verify, inspect spectra, evaluate."""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .data import (
    chronological_split,
    filter_min_interactions,
    ingest,
    load_split,
    save_split,
    synthetic_interactions,
    write_interactions,
)
from .distill import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DistillConfig,
    distill_train,
    projected_features,
    train_plain,
)
from .errors import DimensionMismatch, FreqDError, TooLarge
from .evalkit import evaluate, metrics_csv, metrics_summary
from .graphcore import (
    ITEM_KNN,
    USER_KNN,
    SparseGraph,
    build_knn_graph,
    linear_filter,
    normalized_laplacian,
    parse_filter,
    quadratic_filter,
)
from .recmodels import BPRMF, LIGHTGCN, load_checkpoint, read_checkpoint_header, save_checkpoint
from .spectral import (
    DEFAULT_MAX_NODES,
    THEOREM3_MAX_NODES,
    eigendecompose,
    group_losses,
    per_frequency_losses,
    verify_theorem1,
    verify_theorem2,
    verify_theorem3,
)
from .training import TrainConfig

CONFIG_FILE = "config.txt"
LOG_FILE = "log.csv"
METRICS_FILE = "metrics.csv"
MODEL_FILE = "model.ckpt"
SPECTRUM_FILE = "spectrum.csv"
PROJECTOR_FILE = "projector.npz"

TOLERANCES = {"theorem1": 1e-9, "theorem2": 1e-9, "theorem3": 1e-8}

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def version_string():
    """Package version plus ``git describe`` output when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- argument parsing -------------------------------------------------------

def _positive_float(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text}")
    return v


def _graph_spec(text):
    if text == "bipartite":
        return ("bipartite", 0)
    kind, _, k = text.partition(":")
    if kind != "knn":
        raise argparse.ArgumentTypeError(f"graph must be knn:K or bipartite, got {text}")
    try:
        k = int(k) if k else 10
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad neighbor count in {text}") from None
    if k < 1:
        raise argparse.ArgumentTypeError("neighbor count must be >= 1")
    return ("knn", k)


def _filter_spec(text):
    try:
        return parse_filter(text)
    except (ValueError, FreqDError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_train_args(p, dim):
    p.add_argument("--split", required=True, help="directory written by 'prepare'")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=dim)
    p.add_argument("--backbone", choices=("bprmf", "lightgcn"), default="bprmf")
    p.add_argument("--layers", type=int, default=3, help="LightGCN propagation layers")
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--weight-decay", type=_nonneg_float, default=0.0)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="freqd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"freqd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value file; explicit flags take precedence")
        return p

    p = command("prepare", "ingest, filter and split an interaction file")
    p.add_argument("raw")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int, default=10)

    p = command("synth", "write a synthetic clustered interaction file")
    p.add_argument("--out", required=True, help="output file path")
    p.add_argument("--users", type=int, default=300)
    p.add_argument("--items", type=int, default=400)
    p.add_argument("--clusters", type=int, default=6)
    p.add_argument("--min-per-user", type=int, default=20)
    p.add_argument("--max-per-user", type=int, default=45)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--temperature", type=_positive_float, default=0.35)
    p.add_argument("--noise", type=_nonneg_float, default=0.5)
    p.add_argument("--popularity", type=_nonneg_float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = command("train-teacher", "train a large backbone")
    _add_train_args(p, 64)
    p = command("train-student", "train a small backbone without distillation")
    _add_train_args(p, 8)

    p = command("distill", "train a student with filtered feature distillation")
    _add_train_args(p, 8)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--filter", type=_filter_spec, default=linear_filter(DEFAULT_ALPHA))
    p.add_argument("--beta", type=_nonneg_float, default=DEFAULT_BETA)
    p.add_argument("--graph", type=_graph_spec, default=("knn", 10))
    p.add_argument("--loss-scope", choices=("batch", "full"), default="batch")
    p.add_argument("--feature-norm", choices=("sum", "rows"), default="sum",
                   help="rows divides the feature loss by the number of rows it covers")
    p.add_argument("--dropout", type=float, default=0.1)

    p = command("verify", "check the spectral decomposition identities on random graphs")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--edge-prob", type=float, default=0.3)

    p = command("spectrum", "per-knowledge-group distillation losses on the teacher KNN graphs")
    p.add_argument("--split", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--projector", help="projector.npz from 'distill'; least squares if absent")
    p.add_argument("--graph", type=_graph_spec, default=("knn", 10))
    p.add_argument("--out", required=True)

    p = command("evaluate", "full-ranking Recall/NDCG on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    return parser


def _read_config(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _config_path(argv):
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    parser = build_parser()
    path = _config_path(argv)
    if path is None or not argv or argv[0] not in COMMANDS:
        return parser.parse_args(argv)
    command = argv[0]
    values = _read_config(path)
    sub = _subparser(parser, command)
    known = {a.dest: a for a in sub._actions
             if a.option_strings and a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    # config entries go first so flags given on the command line win
    from_file = []
    for key, value in values.items():
        from_file += [known[key].option_strings[0], value]
    return parser.parse_args([command] + from_file + argv[1:])


# --- helpers ----------------------------------------------------------------

def _describe(value):
    if hasattr(value, "coeffs"):
        return str(value)
    if isinstance(value, tuple) and len(value) == 2 and value[0] in ("knn", "bipartite"):
        return "bipartite" if value[0] == "bipartite" else f"knn:{value[1]}"
    return str(value)


def write_config(out_dir, args, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"version={version_string()}", f"command={args.command}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config"):
            continue
        lines.append(f"{key}={_describe(value)}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    with open(os.path.join(out_dir, CONFIG_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _train_config(args):
    return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                       max_epochs=args.max_epochs, patience=args.patience)


def _backbone(args):
    if args.backbone == "lightgcn":
        return LIGHTGCN, args.layers
    return BPRMF, 0


def _write_metrics(out_dir, model, split):
    metrics = evaluate(model, split)
    with open(os.path.join(out_dir, METRICS_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_csv(metrics))
    print(metrics_summary(metrics))
    return metrics


def _print_epoch(row):
    print(f"epoch {row['epoch']:4d}  base {row['base_loss']:.5f}  fd {row['freqd_loss']:.5f}  "
          f"val R@20 {row['val_recall@20']:.4f}  N@20 {row['val_ndcg@20']:.4f}", flush=True)


# --- commands ---------------------------------------------------------------

def cmd_prepare(args):
    data = ingest(args.raw)
    data = filter_min_interactions(data, args.threshold)
    split = chronological_split(data)
    save_split(split, args.out)
    write_config(args.out, args)
    st = data.stats()
    print(f"users        {st['users']}")
    print(f"items        {st['items']}")
    print(f"interactions {st['interactions']}")
    print(f"sparsity     {st['sparsity']:.4%}")
    return EXIT_OK


def cmd_synth(args):
    data = synthetic_interactions(args.users, args.items, args.clusters,
                                  (args.min_per_user, args.max_per_user), args.latent_dim,
                                  args.temperature, args.noise, args.popularity, args.seed)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_interactions(args.out, data)
    print(f"wrote {len(data)} interactions to {args.out}")
    return EXIT_OK


def _train_backbone(args):
    split = load_split(args.split)
    backbone, layers = _backbone(args)
    os.makedirs(args.out, exist_ok=True)
    write_config(args.out, args)
    t0 = time.perf_counter()
    res = train_plain(split, args.dim, _train_config(args), args.seed, backbone, layers,
                      log_path=os.path.join(args.out, LOG_FILE))
    save_checkpoint(os.path.join(args.out, MODEL_FILE), res.student)
    print(f"best epoch {res.best_epoch} (val NDCG@20 {res.best_val_ndcg:.4f}), "
          f"{time.perf_counter() - t0:.1f}s")
    _write_metrics(args.out, res.student, split)
    return EXIT_OK


def cmd_distill(args):
    split = load_split(args.split)
    meta = read_checkpoint_header(args.teacher)
    if (meta["n_users"], meta["n_items"]) != (split.n_users, split.n_items):
        raise DimensionMismatch(
            f"teacher checkpoint has {meta['n_users']} users / {meta['n_items']} items, "
            f"split has {split.n_users} / {split.n_items}")
    teacher = load_checkpoint(args.teacher, split.train)
    backbone, layers = _backbone(args)
    source, k = args.graph
    cfg = DistillConfig(beta=args.beta, filter=args.filter, graph_source=source,
                        knn_k=k or 10, dropout_rate=args.dropout, loss_scope=args.loss_scope,
                        feature_norm=args.feature_norm, train=_train_config(args))
    write_config(args.out, args, {"teacher_dim": meta["dim"],
                                  "test_excludes_validation": "true"})
    res = distill_train(teacher, split, cfg, args.seed, args.dim, backbone, layers,
                        log_path=os.path.join(args.out, LOG_FILE))
    save_checkpoint(os.path.join(args.out, MODEL_FILE), res.student)
    if res.projectors:
        np.savez(os.path.join(args.out, PROJECTOR_FILE), **res.projectors)
    print(f"best epoch {res.best_epoch} (val NDCG@20 {res.best_val_ndcg:.4f})")
    _write_metrics(args.out, res.student, split)
    return EXIT_OK


def _random_graph(n, p, rng):
    """Erdos-Renyi graph plus a ring, so no node is isolated."""
    upper = np.triu(rng.random((n, n)) < p, 1)
    i, j = np.nonzero(upper)
    ring = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1) if n > 1 else np.zeros((0, 2), int)
    return SparseGraph.from_undirected(n, np.concatenate([np.stack([i, j], axis=1), ring]))


def cmd_verify(args):
    n, trials = args.n, args.trials
    if n < 2:
        raise UsageError("--n must be >= 2")
    if n > DEFAULT_MAX_NODES:
        raise TooLarge(n, DEFAULT_MAX_NODES)
    if trials < 0:
        raise UsageError("--trials must be >= 0")
    if trials == 0:
        print("warning: trials=0, nothing checked; reporting a vacuous pass", file=sys.stderr)
        print("trials=0")
        print("status=pass")
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    filters = [linear_filter(0.1), linear_filter(0.3), linear_filter(0.5), quadratic_filter(0.1, -0.6)]
    worst = {"theorem1": 0.0, "theorem2": 0.0, "theorem3": 0.0}
    check3 = n <= THEOREM3_MAX_NODES
    for _ in range(trials):
        lap = normalized_laplacian(_random_graph(n, args.edge_prob, rng))
        dec = eigendecompose(lap)
        s = rng.normal(size=(n, 4))
        t = rng.normal(size=(n, 8))
        s_proj = s @ rng.normal(size=(4, 8))
        worst["theorem1"] = max(worst["theorem1"], verify_theorem1(s_proj, t, dec).rel_err)
        for f in filters:
            worst["theorem2"] = max(worst["theorem2"], verify_theorem2(lap, f, s_proj, t, dec).rel_err)
        if check3:
            worst["theorem3"] = max(worst["theorem3"], verify_theorem3(dec, s, t).rel_err)
    ok = True
    print(f"n={n}")
    print(f"trials={trials}")
    for name, err in worst.items():
        if name == "theorem3" and not check3:
            print(f"{name}=skipped (n > {THEOREM3_MAX_NODES})")
            continue
        passed = err <= TOLERANCES[name]
        ok &= passed
        print(f"{name}_max_rel_err={err:.3e}")
        print(f"{name}={'pass' if passed else 'fail'}")
    print(f"status={'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_FAIL


def _least_squares_projector(s, t):
    w, *_ = np.linalg.lstsq(s, t, rcond=None)
    return w


def spectrum_rows(student, teacher, projectors=None, k=10):
    """(graph, group, loss) rows of per-group losses on the teacher KNN graphs."""
    tu, ti = teacher.final_embeddings()
    if projectors is not None:
        pu, pi = projected_features(student, projectors)
    else:
        su, si = student.final_embeddings()
        pu = su @ _least_squares_projector(su, tu)
        pi = si @ _least_squares_projector(si, ti)
    rows = []
    for name, ps, t, kind in (("user", pu, tu, USER_KNN), ("item", pi, ti, ITEM_KNN)):
        dec = eigendecompose(normalized_laplacian(build_knn_graph(t, k, kind)))
        for g, loss in enumerate(group_losses(per_frequency_losses(ps, t, dec)), start=1):
            rows.append((name, g, loss))
    return rows


def cmd_spectrum(args):
    split = load_split(args.split)
    student = load_checkpoint(args.student, split.train)
    teacher = load_checkpoint(args.teacher, split.train)
    if args.graph[0] != "knn":
        raise UsageError("spectrum needs a knn:K graph")
    projectors = None
    if args.projector:
        with np.load(args.projector) as z:
            projectors = {key: z[key] for key in z.files}
    rows = spectrum_rows(student, teacher, projectors, args.graph[1])
    write_config(args.out, args, {"projector_source": "file" if projectors else "least_squares"})
    with open(os.path.join(args.out, SPECTRUM_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("graph,group,loss\n")
        for name, g, loss in rows:
            fh.write(f"{name},{g},{loss:.10g}\n")
    for name, g, loss in rows:
        print(f"{name} S{g} {loss:.6g}")
    return EXIT_OK


def cmd_evaluate(args):
    split = load_split(args.split)
    model = load_checkpoint(args.ckpt, split.train)
    if (model.n_users, model.n_items) != (split.n_users, split.n_items):
        raise DimensionMismatch("checkpoint does not match the split's user/item counts")
    write_config(args.out, args, {"test_excludes_validation": "true"})
    _write_metrics(args.out, model, split)
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train-teacher": _train_backbone,
    "train-student": _train_backbone,
    "distill": cmd_distill,
    "verify": cmd_verify,
    "spectrum": cmd_spectrum,
    "evaluate": cmd_evaluate,
}


def _limit_threads():
    value = os.environ.get("FREQD_THREADS")
    if not value:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"freqd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    limiter = _limit_threads()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"freqd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FreqDError, OSError) as exc:
        print(f"freqd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
