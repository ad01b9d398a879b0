"""Command-line entry point: gen-data, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files, I/O failures, undefined metrics), 3 numerical
failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path


from . import evaluation as E
from . import formats as F
from . import gradcheck as G
from . import inference as I
from . import model as M
from . import trainer as T
from .config import ConfigError, RunConfig, load_config
from .labels import AnnotationError, make_offset_targets, make_phase_labels
from .synthetic import GenerationError, generate_video, class_means

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "TAL_THREADS"
ANNOTATIONS_NAME = "annotations.json"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.ckpt"
LOSS_LOG_NAME = "loss_log.jsonl"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _csv_floats(text, n=None, what="values"):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what} needs {n} values, got {len(vals)}")
    return vals


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


# --- dataset directory ----------------------------------------------------------


def load_dataset(data_dir, split=None):
    """(AnnotationFile, {video_id: features}) for the requested split (all if None)."""
    data_dir = Path(data_dir)
    ann_path = data_dir / ANNOTATIONS_NAME
    if not ann_path.is_file():
        raise DataError(f"{ann_path}: annotation file not found")
    ann = F.read_annotations(ann_path)
    videos = ann.videos if split is None else ann.split(split)
    feats = {}
    for v in videos:
        path = data_dir / v.feature_file
        if not path.is_file():
            raise DataError(f"{path}: feature file not found")
        x = F.read_features(path)
        if len(x) != v.num_frames:
            raise DataError(f"{path}: {len(x)} frames but annotations say {v.num_frames}")
        feats[v.video_id] = x
    return F.AnnotationFile(ann.classes, list(videos)), feats


def _check_channels(feats, net):
    for vid, x in feats.items():
        if x.shape[1] != net.input_channels:
            raise F.ConfigMismatchError(
                f"video {vid} has {x.shape[1]} feature channels; the network expects {net.input_channels}"
            )


# --- commands -------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _config(args)
    spec = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    out = Path(args.out)
    feat_dir = out / "features"
    try:
        feat_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {feat_dir}: {e.strerror}") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"{out}: directory is not writable")
    means = class_means(spec)
    records, manifest_videos = [], []
    for i in range(spec.num_videos):
        v = generate_video(spec, i, means)
        rel = f"features/{v.video_id}.feat"
        try:
            F.write_features(out / rel, v.features)
        except OSError as e:
            raise DataError(f"cannot write {out / rel}: {e.strerror}") from None
        records.append(F.VideoRecord(v.video_id, v.split, spec.length, spec.fps, rel, v.annotations))
        manifest_videos.append(
            {
                "id": v.video_id,
                "split": v.split,
                "seed": spec.seed,
                "stream": [1, i],
                "feature_file": rel,
                "sha256": _sha256(out / rel),
                "num_instances": len(v.annotations.instances),
            }
        )
    classes = [f"class_{a}" for a in range(spec.num_classes)]
    try:
        F.write_annotations(out / ANNOTATIONS_NAME, F.AnnotationFile(classes, records))
        _write_json(
            out / MANIFEST_NAME,
            {
                "generator": "synthetic",
                "spec": spec.to_dict(),
                "annotations": {"file": ANNOTATIONS_NAME, "sha256": _sha256(out / ANNOTATIONS_NAME)},
                "videos": manifest_videos,
            },
        )
    except OSError as e:
        raise DataError(f"cannot write into {out}: {e.strerror}") from None
    print(f"wrote {spec.num_videos} videos ({spec.num_train} train / {spec.num_test} test) to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    train_cfg = cfg.train
    if args.loss_weights is not None:
        train_cfg = replace(train_cfg, loss_weights=tuple(_csv_floats(args.loss_weights, 4, "--loss-weights")))
    if args.epochs is not None:
        switch = min(train_cfg.switch_epoch, args.epochs) if args.epochs > 0 else train_cfg.switch_epoch
        train_cfg = replace(train_cfg, epochs=args.epochs, switch_epoch=switch)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    net = cfg.network

    ann, feats = load_dataset(args.data, "train")
    if not ann.videos:
        raise DataError(f"{args.data}: no training videos")
    _check_channels(feats, net)
    sets = [v.annotations for v in ann.videos]
    xs = [feats[v.video_id] for v in ann.videos]
    stats = T.dataset_stats(sets, xs, len(ann.classes))
    windows = T.make_windows(zip(xs, sets), net.window_length)

    start_epoch, velocity = 0, None
    if args.resume:
        ckpt = F.load_checkpoint(args.resume, expect_config=net)
        params = ckpt.params
        start_epoch = ckpt.epoch
        velocity = {k[len("velocity.") :]: v for k, v in ckpt.state.items() if k.startswith("velocity.")}
        if set(velocity) != set(params):
            velocity = None
        if start_epoch > train_cfg.epochs:
            raise UsageError(f"checkpoint is at epoch {start_epoch}, past the {train_cfg.epochs}-epoch schedule")
    else:
        params = M.init_params(net, train_cfg.seed)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e.strerror}") from None
    meta = {
        "train": train_cfg.to_dict(),
        "classes": ann.classes,
        "max_duration": stats["max_duration"],
        "class_centroids": stats["class_centroids"],
    }

    def save(path, epoch, params, velocity):
        state = {f"velocity.{k}": v for k, v in (velocity or {}).items()}
        F.save_checkpoint(path, params, net, epoch, meta, state)

    log = open(out / LOSS_LOG_NAME, "a" if args.resume else "w")
    try:

        def on_step(rec):
            log.write(json.dumps(rec, sort_keys=True) + "\n")

        def on_epoch(epoch, params, velocity):
            if args.save_every_epoch:
                save(out / f"epoch_{epoch:04d}.ckpt", epoch, params, velocity)
            print(f"epoch {epoch}/{train_cfg.epochs} done", flush=True)

        if start_epoch < train_cfg.epochs:
            result = T.train(params, windows, net, train_cfg, start_epoch, velocity, on_step, args.threads, on_epoch)
            params, velocity = result.params, result.velocity
    finally:
        log.close()
    save(out / CHECKPOINT_NAME, train_cfg.epochs, params, velocity)
    print(f"wrote {out / CHECKPOINT_NAME} (epoch {train_cfg.epochs})")
    return EXIT_OK


def _video_proposals(vid, x, rec, params, net, inf, max_duration, centroids, from_labels):
    if not from_labels:
        return vid, I.propose_video(x, params, net, inf, max_duration, centroids)
    lab = make_phase_labels(rec.annotations, rec.num_frames)
    tgt = make_offset_targets(rec.annotations, rec.num_frames)
    raw = I.propose(lab.g_s, lab.g_e, tgt.o_s, tgt.o_e, max_duration, inf, rec.num_frames)
    return vid, I.finish_video(raw, x, inf, centroids)


def cmd_infer(args):
    cfg = _config(args)
    inf = cfg.inference
    changes = {}
    for name in ("sigma", "top_k", "score_floor", "decay"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    if args.rise_rule:
        changes["rise_rule"] = True
    if args.no_refine:
        changes["refine"] = False
    if args.refine_before_score:
        changes["refine_before_score"] = True
    inf = replace(inf, **changes)
    net = cfg.network

    ann, feats = load_dataset(args.data, args.split)
    params, centroids, max_duration = None, None, inf.max_duration
    if args.checkpoint:
        ckpt = F.load_checkpoint(args.checkpoint, expect_config=net)
        params = ckpt.params
        centroids = ckpt.meta.get("class_centroids")
        if list(ckpt.meta.get("classes", ann.classes)) != list(ann.classes):
            raise F.ConfigMismatchError("checkpoint classes differ from the annotation file's classes")
        if max_duration is None:
            max_duration = ckpt.meta.get("max_duration")
    elif not args.phases_from_labels:
        raise UsageError("--checkpoint is required unless --phases-from-labels is given")
    if max_duration is None:
        full, _ = load_dataset(args.data, None) if args.split is not None else (ann, None)
        train = full.split("train") or full.videos
        max_duration = max((i.duration for v in train for i in v.annotations.instances), default=0)
    if max_duration < 1:
        raise DataError("cannot determine a maximum action duration (no training instances)")
    if params is not None:
        _check_channels(feats, net)

    jobs = [
        (v.video_id, feats[v.video_id], v, params, net, inf, max_duration, centroids, args.phases_from_labels)
        for v in ann.videos
    ]
    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            results = list(pool.map(lambda j: _video_proposals(*j), jobs))
    else:
        results = [_video_proposals(*j) for j in jobs]
    by_video = dict(results)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise DataError(f"{out.parent}: directory does not exist")
    F.write_proposals(out, by_video, ann.classes)
    print(f"wrote {sum(len(p) for p in by_video.values())} proposals for {len(by_video)} videos to {out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    ann_path = Path(args.annotations)
    if ann_path.is_dir():
        ann_path = ann_path / ANNOTATIONS_NAME
    if not ann_path.is_file():
        raise DataError(f"{ann_path}: annotation file not found")
    ann = F.read_annotations(ann_path)
    videos = ann.split(args.split) if args.split else ann.videos
    gt = {v.video_id: v.annotations for v in videos}
    props = F.read_proposals(args.proposals, ann.classes)
    stray = sorted(set(props) - set(gt))
    if stray:
        raise DataError(f"{args.proposals}: proposals for videos not in the evaluated split: {', '.join(stray[:5])}")

    modes = ["none"] + [m for m in dict.fromkeys(args.oracle or [])]
    reports = {m: E.evaluate(props, gt, cfg.eval, oracle=m) for m in modes}
    curve_an = reports["none"]["curve"]["an"]
    curves = {m: r.pop("curve")["ar"] for m, r in reports.items()}

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e.strerror}") from None
    doc = {"model": reports["none"], "split": args.split, "eval": cfg.eval.to_dict()}
    if len(modes) > 1:
        doc["oracle"] = {m: reports[m] for m in modes[1:]}
    _write_json(out / "metrics.json", doc)
    with open(out / "ar_an.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["an", "ar"] + [f"ar_oracle_{m}" for m in modes[1:]])
        for i, an in enumerate(curve_an):
            w.writerow([an] + [repr(curves[m][i]) for m in modes])
    for m in modes:
        r = reports[m]
        ar = " ".join(f"AR@{k}={v:.4f}" for k, v in r["ar_at_an"].items())
        mp = " ".join(f"mAP@{k}={v:.4f}" for k, v in r["map_at_iou"].items())
        print(f"[{'model' if m == 'none' else 'oracle ' + m}] {ar} AUC={r['auc']:.4f} {mp} avg-mAP={r['average_map']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    ops = [o for chunk in (args.ops or []) for o in chunk.split(",") if o]
    faults = [o for chunk in (args.inject_fault or []) for o in chunk.split(",") if o]
    try:
        selected = G.select_suites(ops)
        G.select_suites(faults)
    except ValueError as e:
        raise UsageError(str(e)) from None
    results = G.run_all(selected, n_points=args.points, seed=args.seed, inject_fault=tuple(G.select_suites(faults)) if faults else ())
    width = max(len(r.name) for r in results)
    total = 0.0
    for r in results:
        total += r.seconds
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  points={r.points}  coords={r.coords}"
            f"  skipped={r.skipped}  {r.seconds:6.2f}s  {status}"
        )
        for msg in r.failures[:3]:
            print(f"    {msg}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed in {total:.1f}s (tolerance {G.RTOL:g})")
    if args.report:
        _write_json(
            args.report,
            {
                "tolerance": G.RTOL,
                "suites": [
                    {"name": r.name, "max_rel_err": r.max_rel_err, "points": r.points, "passed": r.passed}
                    for r in results
                ],
            },
        )
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults are used for missing keys)")
    common.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config value (YAML-parsed); repeatable",
    )
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads (default: ${THREADS_ENV} or 1)",
    )

    p = _Parser(prog="tal-mutreg", description="Bottom-up temporal action localization pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="override data.seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    t.add_argument("--out", required=True, help="output directory for checkpoints and the loss log")
    t.add_argument("--loss-weights", metavar="CLS,REG,INTRA,INTER", help="override train.loss_weights")
    t.add_argument("--epochs", type=int, help="override train.epochs (total schedule length)")
    t.add_argument("--seed", type=int, help="override train.seed (parameter init and shuffling)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint's epoch and optimizer state")
    t.add_argument("--save-every-epoch", action="store_true", help="also write epoch_NNNN.ckpt after each epoch")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="produce proposals")
    i.add_argument("--checkpoint", help="trained checkpoint")
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--out", required=True, help="proposal file to write")
    i.add_argument("--split", default="test", help="which split to process (default: test)")
    i.add_argument("--sigma", type=float, help="Soft-NMS Gaussian sigma")
    i.add_argument("--top-k", type=int, help="Soft-NMS selections per video")
    i.add_argument("--score-floor", type=float, help="drop proposals whose decayed score falls below this")
    i.add_argument("--decay", choices=["gaussian", "linear"], help="Soft-NMS decay function")
    i.add_argument("--rise-rule", action="store_true", help="select rising frames instead of peaks")
    i.add_argument("--no-refine", action="store_true", help="skip offset-based boundary refinement")
    i.add_argument("--refine-before-score", action="store_true", help="score at the refined boundaries")
    i.add_argument(
        "--phases-from-labels",
        action="store_true",
        help="debug: use ground-truth phase labels and offset targets instead of the network",
    )
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="score a proposal file")
    e.add_argument("--proposals", required=True, help="proposal file")
    e.add_argument("--annotations", required=True, help="annotation file or dataset directory")
    e.add_argument("--out", required=True, help="directory for metrics.json and ar_an.csv")
    e.add_argument("--split", default="test", help="evaluated split (default: test)")
    e.add_argument(
        "--oracle",
        action="append",
        choices=["rank", "cls", "both"],
        help="also report ground-truth oracle metrics; repeatable",
    )
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    c.add_argument("--ops", action="append", help=f"comma-separated suites or prefixes (of: {', '.join(G.SUITES)})")
    c.add_argument("--points", type=int, default=50, help="random points per suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", action="append", metavar="OPS", help="test hook: flip these suites' gradients")
    c.add_argument("--report", help="also write a JSON report here")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is None:
            args.threads = _default_threads()
        elif args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except (UsageError, ConfigError, F.ConfigMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, F.FormatError, AnnotationError, GenerationError, E.MetricError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except T.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
