"""Command-line entry point.

Subcommands: ``aggregate`` (features -> descriptor DB), ``train``,
``index`` (build or inspect a DB), ``query`` (single top-k lookup),
``eval`` (Recall@k report) and ``synth`` (synthetic dataset writer).

Exit codes: 0 success, 1 data or validation failure, 2 usage errors
(argparse prints the usage text).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .aggregate import forward_full
from .errors import OtaggError
from .formats import (
    read_db,
    read_features,
    read_geotags,
    read_labels,
    read_weights,
    write_db,
    write_weights,
)
from .model import AggregatorConfig, FeatureSet
from .retrieval import build_index, is_positive, query_topk, recall_at_k
from .synth import SynthSpec, gen_places, write_dataset
from .training import LossParams, TrainingParams, format_loss_log, train_run


def _feature_files(directory) -> list[Path]:
    directory = Path(directory)
    files = sorted(directory.glob("*.salf"))
    if not files:
        raise OtaggError(f"no feature files (*.salf) in {directory}")
    return files


def _load_features(directory) -> list[FeatureSet]:
    return [read_features(p) for p in _feature_files(directory)]


def _cmd_aggregate(args) -> int:
    weights = read_weights(args.weights)
    files = _feature_files(args.features)
    rng = np.random.default_rng(args.seed) if args.training else None
    descriptors = []
    geotags = []
    times = []
    for path in files:
        fs = read_features(path)
        t0 = time.perf_counter()
        desc = forward_full(fs, weights, weights.config, training=args.training, rng=rng)
        times.append((time.perf_counter() - t0) * 1000.0)
        descriptors.append(desc)
        geotags.append(fs.geotag)
    write_db(descriptors, geotags, args.out)
    ms = np.array(times)
    print(
        f"aggregated {len(descriptors)} images -> {args.out} "
        f"(dim {descriptors[0].dim}); per-image ms: "
        f"mean {ms.mean():.2f}, p50 {np.percentile(ms, 50):.2f}, "
        f"p95 {np.percentile(ms, 95):.2f}, max {ms.max():.2f}"
    )
    return 0


def _labels_from_geotags(features: list[FeatureSet], tags: dict) -> dict[str, int]:
    """Places as connected components of the positive-pair relation."""
    ids = [fs.id for fs in features]
    missing = [i for i in ids if i not in tags]
    if missing:
        raise OtaggError(f"geotags missing for {len(missing)} ids, e.g. {missing[:3]}")
    parent = list(range(len(ids)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if is_positive(tags[ids[i]], tags[ids[j]]):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    roots: dict[int, int] = {}
    labels = {}
    for i, image_id in enumerate(ids):
        root = find(i)
        labels[image_id] = roots.setdefault(root, len(roots))
    return labels


def _cmd_train(args) -> int:
    features = _load_features(args.features)
    if args.labels:
        label_map = read_labels(args.labels)
        missing = [fs.id for fs in features if fs.id not in label_map]
        if missing:
            raise OtaggError(f"labels missing for {len(missing)} ids, e.g. {missing[:3]}")
    else:
        if args.geotags:
            tags = read_geotags(args.geotags)
        else:
            tags = {fs.id: fs.geotag for fs in features if fs.geotag is not None}
        label_map = _labels_from_geotags(features, tags)
    dataset = [(fs, label_map[fs.id]) for fs in features]

    config = AggregatorConfig(
        m=args.m,
        l=args.l,
        g_dim=args.g_dim,
        d=features[0].d,
        hidden=args.hidden,
        dropout_rate=args.dropout,
        sinkhorn_iters=args.sinkhorn_iters,
        seed=args.seed,
    )
    params = TrainingParams(
        lr0=args.lr,
        batch_places=args.batch_places,
        imgs_per_place=args.imgs_per_place,
        weight_decay=args.weight_decay,
        loss=LossParams(
            alpha=args.ms_alpha, beta=args.ms_beta, lam=args.ms_lambda, epsilon=args.ms_epsilon
        ),
        seed=args.seed + 1,
    )
    weights, log = train_run(dataset, config, params, epochs=args.epochs)
    write_weights(weights, args.out)
    loss_log = args.loss_log or str(Path(args.out).with_suffix(".loss.csv"))
    Path(loss_log).write_text(format_loss_log(log), encoding="utf-8")
    print(f"trained {args.epochs} epochs, {len(log)} iterations -> {args.out}")
    if log:
        print(f"first-iter loss {log[0][2]:.6f}, last-iter loss {log[-1][2]:.6f}")
    print(f"loss log -> {loss_log}")
    if args.plot:
        if not log:
            raise OtaggError("nothing to plot: no training iterations ran")
        from .plotting import plot_loss_log

        fig_path = str(Path(loss_log).with_suffix(".png"))
        plot_loss_log(log, fig_path)
        print(f"loss figure -> {fig_path}")
    return 0


def _cmd_index(args) -> int:
    if args.db and not (args.features or args.weights or args.out):
        descriptors, geotags = read_db(args.db)
        index = build_index(descriptors, [d.id for d in descriptors], geotags)
        tagged = sum(1 for t in geotags if t is not None)
        norms = np.linalg.norm(index.matrix, axis=1)
        print(f"db {args.db}: {index.size} descriptors, dim {index.dim}")
        print(f"geotagged: {tagged}/{index.size}")
        print(f"norm deviation: max {np.abs(norms - 1.0).max():.2e}")
        return 0
    if args.features and args.weights and args.out:
        args.training = False
        args.seed = 0
        return _cmd_aggregate(args)
    raise OtaggError("use either --db to inspect, or --features/--weights/--out to build")


def _cmd_query(args) -> int:
    refs, ref_tags = read_db(args.db)
    index = build_index(refs, [d.id for d in refs], ref_tags)
    queries, _ = read_db(args.query_db)
    wanted = {d.id: d for d in queries}
    if args.id not in wanted:
        raise OtaggError(f"query id {args.id!r} not found in {args.query_db}")
    hits = query_topk(index, wanted[args.id], args.k)
    for rank, (hit_id, sim) in enumerate(hits, start=1):
        print(f"{rank},{hit_id},{sim:.6f}")
    return 0


def _apply_tag_overrides(descriptors, geotags, override):
    return [override.get(d.id, tag) for d, tag in zip(descriptors, geotags)]


def _cmd_eval(args) -> int:
    refs, ref_tags = read_db(args.db)
    queries, query_tags = read_db(args.query_db)
    if refs[0].dim != queries[0].dim:
        raise OtaggError(
            f"dimension mismatch: refs dim {refs[0].dim}, queries dim {queries[0].dim}"
        )
    if args.geotags:
        override = read_geotags(args.geotags)
        ref_tags = _apply_tag_overrides(refs, ref_tags, override)
        query_tags = _apply_tag_overrides(queries, query_tags, override)
    if any(t is None for t in query_tags):
        raise OtaggError("every query needs a geotag (embed them or pass --geotags)")
    if args.frame_mode:
        bad = [t for t in query_tags + list(ref_tags) if t is not None and t.kind != "frame"]
        if bad:
            raise OtaggError("--frame-mode requires frame-index geotags everywhere")
    ks = [int(k) for k in args.ks.split(",") if k.strip()]
    index = build_index(refs, [d.id for d in refs], ref_tags)
    report = recall_at_k(index, list(zip(queries, query_tags)), ks)
    for line in report.lines():
        print(line)
    if args.report_dir:
        from .plotting import plot_recall

        report_dir = Path(args.report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        csv_path = report_dir / "recall.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("k,recall\n")
            for k in sorted(report.recalls):
                fh.write(f"{k},{report.recalls[k]:.6f}\n")
        plot_recall(report, report_dir / "recall.png")
        print(f"report -> {csv_path} and {report_dir / 'recall.png'}")
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        num_places=args.places,
        images_per_place=args.imgs_per_place + args.holdout,
        n=args.n,
        d=args.d,
        cluster_spread=args.sigma_within,
        place_separation=args.sigma_between,
        geotag_mode=args.geotag_mode,
    )
    dataset = gen_places(spec)
    write_dataset(dataset, args.out, holdout=args.holdout)
    total = spec.num_places * spec.images_per_place
    print(
        f"wrote {total - spec.num_places * args.holdout} training and "
        f"{spec.num_places * args.holdout} query feature files under {args.out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otagg",
        description="Optimal-transport feature aggregation: descriptors, training, retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="compute a descriptor DB from feature files")
    p.add_argument("--weights", required=True)
    p.add_argument("--features", required=True, help="directory of *.salf files")
    p.add_argument("--out", required=True, help="output descriptor DB path")
    p.add_argument("--training", action="store_true", help="enable dropout (debugging aid)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("train", help="train aggregator weights on labeled features")
    p.add_argument("--features", required=True)
    p.add_argument("--geotags", help="geotag file; places become connected 25 m components")
    p.add_argument("--labels", help="explicit id,label file (takes precedence)")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--loss-log", help="loss log path (default: alongside --out)")
    p.add_argument("--plot", action="store_true", help="render the loss curve next to the log")
    p.add_argument("--lr", type=float, default=6e-5)
    p.add_argument("--batch-places", type=int, default=60)
    p.add_argument("--imgs-per-place", type=int, default=4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--l", type=int, default=128)
    p.add_argument("--g-dim", type=int, default=256)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--sinkhorn-iters", type=int, default=3)
    p.add_argument("--ms-alpha", type=float, default=1.0)
    p.add_argument("--ms-beta", type=float, default=50.0)
    p.add_argument("--ms-lambda", type=float, default=0.0)
    p.add_argument("--ms-epsilon", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("index", help="inspect a descriptor DB (or build one)")
    p.add_argument("--db", help="DB to inspect")
    p.add_argument("--features", help="build mode: feature directory")
    p.add_argument("--weights", help="build mode: weight file")
    p.add_argument("--out", help="build mode: output DB path")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("query", help="top-k lookup for one stored query descriptor")
    p.add_argument("--db", required=True, help="reference DB")
    p.add_argument("--query-db", required=True)
    p.add_argument("--id", required=True, help="query descriptor id")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("eval", help="Recall@k of a query DB against a reference DB")
    p.add_argument("--db", required=True, help="reference DB")
    p.add_argument("--query-db", required=True)
    p.add_argument("--geotags", help="override/add geotags from a text file")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--frame-mode", action="store_true", help="require frame-index geotags")
    p.add_argument("--report-dir", help="also write recall.csv and recall.png here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic place-recognition dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--places", type=int, default=10)
    p.add_argument("--imgs-per-place", type=int, default=4)
    p.add_argument("--holdout", type=int, default=0, help="extra query images per place")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--sigma-within", type=float, default=0.1)
    p.add_argument("--sigma-between", type=float, default=1.0)
    p.add_argument("--geotag-mode", choices=("planar", "frame"), default="planar")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OtaggError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
