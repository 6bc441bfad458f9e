"""Command line interface: ``decaf <subcommand> ...``.

Exit codes: 0 success, 1 domain error (bad data, numerical failure),
2 usage error (bad flags, missing files, invalid config).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .clustering import centroids_sparse, hierarchical_cluster
from .corpus import parse_label_texts, parse_xc_file, read_lines
from .errors import DecafError
from .inference import Prediction, count_ops, predict_batch, predict_ensemble
from .metrics import (
    bow_metadata_rescore,
    compute_propensities,
    evaluate,
    filter_trivial_and_reciprocal,
    theorem_diagnostics,
)
from .model import load_model, save_model
from .shortlister import recall_curve
from .trainer import ABLATIONS, TrainConfig, resume_from_checkpoint, shortlist_embeddings, train_ensemble

log = logging.getLogger("decaf")

_ABLATION_ALIASES = {"fixed-embeddings": "lite"}


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str) -> str | None:
    if path is not None and not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(read_lines(path), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_data(path, label_text=None):
    d = parse_xc_file(_existing(path, "data file"))
    if label_text is not None:
        Z = parse_label_texts(_existing(label_text, "label text file"), d.num_labels, d.num_tokens)
        d = d.with_label_texts(Z)
    return d


def _read_titles(path):
    return None if path is None else read_lines(_existing(path, "titles file"))


def _load_models(path):
    p = Path(_existing(path, "model"))
    if p.is_dir():
        files = sorted(p.glob("model*.decaf"))
        if not files:
            raise UsageError(f"no model*.decaf files in {p}")
        return [load_model(f) for f in files]
    return [load_model(p)]


def write_predictions(preds, fh, counters=None) -> None:
    for i, p in enumerate(preds):
        line = " ".join(f"{l}:{s:.8g}" for l, s in p.pairs())
        if counters is not None:
            c = counters[i]
            line += f" # shortlister={c.shortlister_dots} ranker={c.ranker_dots}"
        fh.write(line + "\n")


def read_predictions(path) -> list[Prediction]:
    out = []
    for n, line in enumerate(read_lines(_existing(path, "prediction file")), start=1):
        line = line.split("#", 1)[0].strip()
        ids, scores = [], []
        for tok in line.split():
            try:
                l, s = tok.split(":")
                ids.append(int(l))
                scores.append(float(s))
            except ValueError:
                raise DecafError(f"{path}:{n}: bad prediction entry {tok!r}") from None
        out.append(Prediction(np.array(ids, dtype=np.int64), np.array(scores)))
    return out


def _config_from_args(args) -> TrainConfig:
    values = read_config_file(_existing(args.config, "config file")) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k] = v
    flags = {
        "seed": args.seed, "ablation": args.ablation, "num_clusters": args.clusters,
        "dim": args.dim, "beam": args.beam, "ensemble_size": args.ensemble_size,
    }
    for k, v in flags.items():
        if v is not None:
            values[k] = _ABLATION_ALIASES.get(v, v) if k == "ablation" else v
    if "ablation" in values:
        values["ablation"] = _ABLATION_ALIASES.get(values["ablation"], values["ablation"])
    try:
        return TrainConfig.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_train(args) -> int:
    config = _config_from_args(args)
    d = _load_data(args.train, args.label_text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = config.to_text()
    (out / "config.txt").write_text(text)
    digest = hashlib.sha256(text.encode()).hexdigest()[:12]
    log.info("decaf %s seed=%d config=%s", __version__, config.seed, digest)
    if args.resume:
        models = [resume_from_checkpoint(_existing(args.resume, "checkpoint"), d, config,
                                         checkpoint_dir=str(out))]
    else:
        models = train_ensemble(d, config, checkpoint_dir=str(out))
    if len(models) == 1:
        save_model(models[0], out / "model.decaf")
    else:
        for j, m in enumerate(models):
            save_model(m, out / f"model{j}.decaf")
    log.info("wrote %d model file(s) to %s", len(models), out)
    return 0


def cmd_predict(args) -> int:
    models = _load_models(args.model)
    d = _load_data(args.input)
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    X = d.features
    if len(models) == 1:
        preds = predict_batch(models[0], X, args.beam, args.topk, threads=args.threads or 1)
    else:
        preds = [predict_ensemble(models, X[i], args.beam, args.topk, rule=args.ensemble_rule)
                 for i in range(X.shape[0])]
    counters = [count_ops(models[0], X[i], args.beam) for i in range(X.shape[0])] if args.counters else None
    with (open(args.output, "w") if args.output else nullcontext(sys.stdout)) as fh:
        write_predictions(preds, fh, counters)
    return 0


def cmd_evaluate(args) -> int:
    preds = read_predictions(args.pred)
    truth_d = parse_xc_file(_existing(args.truth, "truth file"))
    truth = truth_d.ground_truth_lists()
    if len(preds) != len(truth):
        raise DecafError(f"{len(preds)} prediction lines for {len(truth)} documents")
    train_d = parse_xc_file(_existing(args.train, "train file")) if args.train else None
    if args.filter_reciprocal:
        test_identity = train_identity = None
        if args.identity_map:
            test_identity, train_identity = _read_identity_map(args.identity_map, len(truth),
                                                               train_d.num_points if train_d else 0)
        preds = filter_trivial_and_reciprocal(
            preds, _read_titles(args.test_titles), _read_titles(args.label_titles),
            _read_titles(args.train_titles), train_d.ground_truth_lists() if train_d else None,
            test_identity, train_identity,
        )
    ref = train_d if train_d is not None else truth_d
    freq = np.asarray(ref.labels.sum(axis=0)).ravel()
    A, B = 0.55, 1.5
    if args.propensity:
        try:
            A, B = (float(v) for v in args.propensity.split(","))
        except ValueError:
            raise UsageError("--propensity expects A,B") from None
    prop = compute_propensities(freq, max(ref.num_points, 2), A, B)
    report = evaluate(preds, truth, truth_d.num_labels, prop, scale_dcg_by_k=args.paper_literal_dcg,
                      train_frequencies=freq)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def _read_identity_map(path, n_test, n_train):
    """Lines ``test <doc> <label>`` or ``train <doc> <label>``."""
    test = np.full(n_test, -1, dtype=np.int64)
    train = np.full(n_train, -1, dtype=np.int64)
    for n, line in enumerate(read_lines(_existing(path, "identity map")), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            split, doc, lab = parts[0], int(parts[1]), int(parts[2])
            {"test": test, "train": train}[split][doc] = lab
        except (ValueError, KeyError, IndexError):
            raise DecafError(f"{path}:{n}: bad identity map line {line!r}") from None
    return test, train


def cmd_cluster(args) -> int:
    d = parse_xc_file(_existing(args.train, "train file"))
    k = args.clusters
    if k < 1 or k & (k - 1):
        raise UsageError("--clusters must be a power of two")
    c = hierarchical_cluster(centroids_sparse(d), k.bit_length() - 1, seed=args.seed)
    with (open(args.output, "w") if args.output else nullcontext(sys.stdout)) as fh:
        for members in c.clusters:
            fh.write(" ".join(map(str, members.tolist())) + "\n")
    return 0


def cmd_shortlist_eval(args) -> int:
    model = _load_models(args.model)[0]
    d = _load_data(args.data)
    sl = model.shortlister
    emb = shortlist_embeddings(model, d.features)
    curve = recall_curve(sl, emb, d.labels)
    sizes = sl.clustering.sizes()
    beams = [int(b) for b in args.beams.split(",")] if args.beams else [2**i for i in range(sl.num_clusters.bit_length())]
    sys.stdout.write("B\trecall\tmean_shortlist\n")
    for b in beams:
        if not 1 <= b <= sl.num_clusters:
            raise UsageError(f"beam {b} outside [1, {sl.num_clusters}]")
        lengths = [count_ops(model, d.features[i], b).ranker_dots for i in range(d.num_points)]
        mean_len = float(np.mean(lengths)) if lengths else float(sizes[:b].sum())
        sys.stdout.write(f"{b}\t{curve[b - 1]:.6f}\t{mean_len:.2f}\n")
    return 0


def cmd_rescore_bow(args) -> int:
    preds = read_predictions(args.pred)
    d = parse_xc_file(_existing(args.input, "input file"))
    Z = parse_label_texts(_existing(args.label_text, "label text file"))
    out = bow_metadata_rescore(preds, d.features, Z, args.alpha)
    with (open(args.output, "w") if args.output else nullcontext(sys.stdout)) as fh:
        write_predictions(out, fh)
    return 0


def cmd_diagnose(args) -> int:
    model = _load_models(args.model)[0]
    d = _load_data(args.data)
    diag = theorem_diagnostics(model, d, args.beam)
    for k, v in diag.as_dict().items():
        sys.stdout.write(f"{k}={v}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decaf", description="Label-text-aware extreme classifier")
    p.add_argument("--version", action="version", version=f"decaf {__version__}")
    p.add_argument("--threads", type=int, default=None, help="BLAS / prediction threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the four training modules")
    t.add_argument("--train", required=True, help="training data (sparse XC format)")
    t.add_argument("--label-text", required=True, help="label texts, one row per label")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", choices=list(ABLATIONS) + list(_ABLATION_ALIASES))
    t.add_argument("--clusters", type=int, help="fanout K (power of two)")
    t.add_argument("--dim", type=int)
    t.add_argument("--beam", type=int)
    t.add_argument("--ensemble-size", type=int)
    t.add_argument("--resume", help="checkpoint to continue from (module1.ckpt or module2.ckpt)")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", help="rank labels for each document")
    q.add_argument("--model", required=True, help="model file or directory of model*.decaf")
    q.add_argument("--input", required=True)
    q.add_argument("--topk", type=int, default=5)
    q.add_argument("--beam", type=int)
    q.add_argument("--counters", action="store_true", help="append dot-product counts")
    q.add_argument("--ensemble-rule", choices=("mean", "rank-sum"), default="mean")
    q.add_argument("--output")
    q.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score a prediction file")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--train")
    e.add_argument("--filter-reciprocal", action="store_true")
    e.add_argument("--test-titles")
    e.add_argument("--label-titles")
    e.add_argument("--train-titles")
    e.add_argument("--identity-map", help="lines 'test|train <doc> <label>'")
    e.add_argument("--propensity", help="A,B (default 0.55,1.5)")
    e.add_argument("--paper-literal-dcg", action="store_true", help="keep the 1/k factor on DCG")
    e.add_argument("--report")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cluster", help="balanced hierarchical clustering of label centroids")
    c.add_argument("--train", required=True)
    c.add_argument("--clusters", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--output")
    c.set_defaults(func=cmd_cluster)

    s = sub.add_parser("shortlist-eval", help="recall and shortlist length per beam size")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--beams", help="comma-separated beam sizes (default powers of two)")
    s.set_defaults(func=cmd_shortlist_eval)

    r = sub.add_parser("rescore-bow", help="mix scores with label-text similarity")
    r.add_argument("--pred", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--label-text", required=True)
    r.add_argument("--alpha", type=float, required=True)
    r.add_argument("--output")
    r.set_defaults(func=cmd_rescore_bow)

    g = sub.add_parser("diagnose", help="likelihood decomposition diagnostics")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True, help="training data with labels")
    g.add_argument("--beam", type=int, required=True)
    g.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    limit = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
    try:
        with limit:
            return args.func(args)
    except UsageError as exc:
        print(f"decaf: error: {exc}", file=sys.stderr)
        return 2
    except (DecafError, ValueError, OSError) as exc:
        print(f"decaf: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
