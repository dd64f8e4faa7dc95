"""Command-line interface.

Subcommands: ``partition``, ``train``, ``eval``, ``predict``, ``sample``,
``bias`` and ``synth`` (writes a small synthetic dataset). Global flags
``--config``, ``--seed``, ``--strict`` and ``--threads`` may appear before or
after the subcommand.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. Every output file records the hash of the resolved run config.

Model inputs live in an ``.npz`` file holding ``ids`` (strings) and
``inputs`` (``[N, C, H, W]`` images or ``[N, T, D_in]`` token sets); rows are
matched to metadata records by id.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datatools as dt
from . import geocell as gc
from . import inference as inf
from . import train as tr
from .config import RunConfig, load_config
from .model import ConfigError, GeoDecoderModel, ModelConfig, uniform_loss
from .numerics import CheckpointError, ShapeError

log = logging.getLogger("hiergeo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- shared helpers ---------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    overrides = {"seed": args.seed, "threads": args.threads, "strict": True if args.strict else None}
    cfg = load_config(args.config, overrides)
    log.info("resolved config %s: %s", cfg.hash(), json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required (on the command line or in the config paths section)")
    return value


def _write_json(path, doc: dict, cfg_hash: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({**doc, "config_hash": cfg_hash}, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows, cfg_hash: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def load_inputs(path, records) -> np.ndarray:
    """Model inputs for ``records`` in record order."""
    try:
        with np.load(path, allow_pickle=False) as z:
            ids, inputs = [str(i) for i in z["ids"]], z["inputs"]
    except (OSError, KeyError, ValueError) as exc:
        raise dt.DataError(f"{path}: cannot read inputs ({exc})") from None
    if len(ids) != inputs.shape[0]:
        raise dt.DataError(f"{path}: {len(ids)} ids for {inputs.shape[0]} inputs")
    row = {k: i for i, k in enumerate(ids)}
    missing = [r.id for r in records if r.id not in row]
    if missing:
        raise dt.DataError(f"{path}: no inputs for ids {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    return inputs[[row[r.id] for r in records]].astype(np.float64)


def _labelled(records, stack):
    lat = np.array([r.lat for r in records])
    lon = np.array([r.lon for r in records])
    labels = stack.labels_for(lat, lon) if records else np.zeros((0, stack.num_hierarchies), dtype=np.int64)
    keep = (labels >= 0).all(axis=1)
    return keep, labels


def _model_config(cfg: RunConfig, classes, inputs: np.ndarray) -> ModelConfig:
    m = cfg.model
    enc = m.encoder
    if enc.kind == "precomputed" and enc.token_dim == 0:
        enc = type(enc)(**{**enc.__dict__, "token_dim": int(inputs.shape[-1])})
    return ModelConfig(list(classes), S=m.S, D=m.D, heads=m.heads, N=m.N, E=m.E, ffn_mult=m.ffn_mult,
                       values_equal_keys=m.values_equal_keys, head_init=m.head_init, encoder=enc)


def _load_checked_model(ckpt, partition_path):
    model, meta, _ = tr.load_model(ckpt)
    stack, sha = gc.load_partition(partition_path)
    if meta.get("partition_sha256") != sha:
        raise dt.DataError(f"checkpoint {ckpt} was trained against partition {meta.get('partition_sha256')}, "
                           f"{partition_path} has sha256 {sha}")
    try:
        model.check_classes(stack.classes_per_hierarchy)
    except ConfigError as exc:
        raise dt.DataError(str(exc)) from None
    return model, meta, stack


# -- subcommands ---------------------------------------------------------------------------

def cmd_partition(args, cfg: RunConfig) -> int:
    t_max = args.t_max if args.t_max else cfg.partition.t_max
    t_min = args.t_min if args.t_min is not None else cfg.partition.t_min
    if any(b >= a for a, b in zip(t_max, t_max[1:])):
        raise UsageError(f"t_max thresholds must be strictly decreasing, got {t_max}")
    if t_min < 1 or t_min >= t_max[-1]:
        raise UsageError(f"t_min {t_min} must lie in [1, {t_max[-1]})")
    records = dt.load_metadata(_need(args.metadata or cfg.paths.metadata, "--metadata"))
    if not records:
        log.warning("metadata is empty; writing an empty partition")
    pts = np.array([[r.lat, r.lon] for r in records], dtype=np.float64).reshape(-1, 2)
    stack = gc.build_stack(pts, t_max, t_min)
    out = _need(args.out or cfg.paths.partition, "--out")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    sha = gc.save_partition(stack, out, {"config_hash": cfg.hash()})
    for h, n in enumerate(stack.classes_per_hierarchy, 1):
        print(f"hierarchy {h}: t_max={t_max[h - 1]} classes={n}")
    print(f"partition sha256 {sha}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    records = dt.load_metadata(_need(args.metadata or cfg.paths.metadata, "--metadata"))
    stack, sha = gc.load_partition(_need(args.partition or cfg.paths.partition, "--partition"))
    keep, labels = _labelled(records, stack)
    if not keep.any():
        raise dt.DataError("no training record falls inside a class of every hierarchy")
    if not keep.all():
        log.warning("%d of %d records lie outside the partition and are skipped", (~keep).sum(), len(records))
    records = [r for r, k in zip(records, keep) if k]
    labels = labels[keep]
    inputs = load_inputs(_need(args.inputs or cfg.paths.inputs, "--inputs"), records)
    scenes = np.array([r.scene_id for r in records], dtype=np.int64)
    if cfg.model.S > 0 and scenes.max() >= cfg.model.S:
        raise dt.DataError(f"scene_id {scenes.max()} is outside [0, {cfg.model.S})")

    out_dir = Path(args.out_dir or cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.hash()
    _write_json(out_dir / "resolved_config.json", {"config": cfg.to_dict()}, cfg_hash)

    settings = tr.TrainSettings(epochs=cfg.train.epochs, batch_size=cfg.train.batch_size, lr=cfg.optim.lr,
                                momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay,
                                milestones=tuple(cfg.optim.milestones), gamma=cfg.optim.gamma,
                                augment=cfg.train.augment, seed=cfg.seed, max_steps=args.max_steps)
    state = None
    if args.resume:
        model, meta, buffers = tr.load_model(args.resume)
        try:
            tr.check_resume(meta, sha)
        except tr.ResumeError as exc:
            raise dt.DataError(str(exc)) from None
        if meta.get("config_hash") != cfg_hash:
            msg = f"resuming with config {cfg_hash}, checkpoint was written by config {meta.get('config_hash')}"
            if cfg.strict:
                raise dt.DataError(msg)
            log.warning(msg)
        state = tr.resume_state(meta, buffers)
    else:
        model = GeoDecoderModel(_model_config(cfg, stack.classes_per_hierarchy, inputs), seed=cfg.seed)
    model.check_classes(stack.classes_per_hierarchy)
    log.info("training %d images, batch %d, step-0 uniform loss %.6f", len(records),
             tr.effective_batch(settings.batch_size, len(records)),
             uniform_loss(stack.classes_per_hierarchy, model.config.S))

    meta = {"partition_sha256": sha, "config_hash": cfg_hash, "seed": cfg.seed}
    loss_log = tr.LossLog(out_dir / "loss.jsonl", {"config_hash": cfg_hash})

    def on_epoch(st):
        path = tr.save_training_checkpoint(out_dir / f"checkpoint_epoch{st.epoch:03d}.npz", model, st, meta)
        log.info("epoch %d done (step %d), wrote %s", st.epoch, st.step, path)

    state = tr.train(model, inputs, labels, scenes, settings, state, on_step=loss_log, on_epoch=on_epoch)
    final = tr.save_training_checkpoint(out_dir / "checkpoint_last.npz", model, state, meta)
    acc = tr.finest_accuracy(model, stack, inputs, labels)
    _write_json(out_dir / "train_summary.json",
                {"epochs": state.epoch, "steps": state.step, "train_finest_accuracy": acc,
                 "checkpoint": str(final), "partition_sha256": sha}, cfg_hash)
    print(f"trained {state.step} steps; train finest accuracy {acc:.4f}; checkpoint {final}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    partition = _need(args.partition or cfg.paths.partition, "--partition")
    model, meta, stack = _load_checked_model(args.checkpoint, partition)
    records = dt.load_metadata(_need(args.metadata or cfg.paths.metadata, "--metadata"))
    inputs = load_inputs(_need(args.inputs or cfg.paths.inputs, "--inputs"), records)
    try:
        preds = inf.predict_many(inputs, model, stack, use_tencrop=args.tencrop, threads=cfg.threads)
    except (ConfigError, ShapeError, ValueError) as exc:
        raise dt.DataError(f"checkpoint is incompatible with these inputs: {exc}") from None
    truth = [r.point for r in records]
    report = inf.evaluate(preds, truth)
    if any(b < a for a, b in zip(report.accuracy, report.accuracy[1:])):
        raise InvariantError(f"threshold accuracies are not non-decreasing: {report.accuracy}")
    cfg_hash = cfg.hash()
    _write_json(args.out, {**report.to_dict(), "tencrop": args.tencrop, "checkpoint": str(args.checkpoint),
                           "partition_sha256": meta.get("partition_sha256")}, cfg_hash)
    dump = Path(args.predictions or Path(args.out).with_suffix(".predictions.jsonl"))
    inf.write_jsonl(dump, (inf.prediction_record(r.id, p, t) for r, p, t in zip(records, preds, truth)),
                    {"config_hash": cfg_hash})
    for name, acc in zip(inf.THRESHOLD_NAMES, report.accuracy):
        print(f"{name:>10s}: {acc:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    partition = _need(args.partition or cfg.paths.partition, "--partition")
    model, _, stack = _load_checked_model(args.checkpoint, partition)
    try:
        with np.load(_need(args.inputs or cfg.paths.inputs, "--inputs"), allow_pickle=False) as z:
            ids, inputs = [str(i) for i in z["ids"]], z["inputs"].astype(np.float64)
    except (OSError, KeyError, ValueError) as exc:
        raise dt.DataError(f"cannot read inputs ({exc})") from None
    try:
        preds = inf.predict_many(inputs, model, stack, use_tencrop=args.tencrop, threads=cfg.threads)
    except (ConfigError, ShapeError, ValueError) as exc:
        raise dt.DataError(f"checkpoint is incompatible with these inputs: {exc}") from None
    inf.write_jsonl(args.out, (inf.prediction_record(i, p, None) for i, p in zip(ids, preds)),
                    {"config_hash": cfg.hash()})
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    countries = dt.load_countries(args.countries)
    entries = dt.sample_locations(countries, args.n, cfg.seed)
    inf.write_jsonl(args.out, (e.to_dict() for e in entries), {"config_hash": cfg.hash()})
    print(f"wrote {len(entries)} sample locations to {args.out}")
    return EXIT_OK


def cmd_bias(args, cfg: RunConfig) -> int:
    records = dt.load_metadata(_need(args.metadata or cfg.paths.metadata, "--metadata"))
    if not records:
        raise dt.DataError("metadata is empty; nothing to analyse")
    if all(r.city is not None for r in records):
        groups, how = [r.city for r in records], "city field"
    elif args.cities:
        cities = [c for country in dt.load_countries(args.cities) for c in country.cities]
        groups, how = dt.nearest_city(records, cities), f"nearest city in {args.cities}"
    else:
        # fall back to equirectangular heatmap cells
        lat_b, lon_b = args.bins
        grid_idx = []
        for r in records:
            g = dt.heatmap_grid([(r.lat, r.lon)], lat_b, lon_b)
            grid_idx.append("cell_%d_%d" % tuple(np.argwhere(g)[0]))
        groups, how = grid_idx, f"heatmap cell ({lat_b}x{lon_b})"
    counts: dict[str, int] = {}
    for g in groups:
        counts[g] = counts.get(g, 0) + 1
    stats = dt.distribution_stats(list(counts.values()))
    out = Path(args.out_dir)
    cfg_hash = cfg.hash()
    _write_json(out / "bias.json", {"gini": stats.gini, "groups": len(counts), "images": len(records),
                                    "grouping": how, "counts": dict(sorted(counts.items()))}, cfg_hash)
    _write_csv(out / "lorenz.csv", ["population_share", "image_share"], stats.lorenz, cfg_hash)
    grid = dt.heatmap_grid([(r.lat, r.lon) for r in records], *args.bins)
    _write_csv(out / "heatmap.csv", [f"lon_bin_{j}" for j in range(grid.shape[1])], grid.tolist(), cfg_hash)
    print(f"gini {stats.gini:.6f} over {len(counts)} groups ({how})")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    data = tr.synthetic_dataset(n=args.n, num_scenes=args.scenes, kind=args.kind, image_size=args.image_size,
                                seed=cfg.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.hash()
    ids = [f"img{i:05d}" for i in range(args.n)]
    recs = [dt.ImageRecord(i, float(a), float(b), f"ph{k % max(args.n // 2, 1)}", int(s))
            for k, (i, a, b, s) in enumerate(zip(ids, data.lat, data.lon, data.scenes))]
    inf.write_jsonl(out / "metadata.jsonl", (dt.record_to_dict(r) for r in recs), {"config_hash": cfg_hash})
    np.savez(out / "inputs.npz", ids=np.array(ids), inputs=data.inputs)
    n = args.n
    print(f"wrote {n} synthetic records to {out}")
    if n // 2 - 8 > 2:
        print(f"a partition with --t-max {n // 2 + 8} {n // 2 - 8} --t-min 2 has 2 and 4 classes")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON or YAML run config")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--strict", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="treat recoverable inconsistencies as errors")
    p.add_argument("--threads", type=int, default=d, help="worker threads for evaluation")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiergeo", description="Hierarchical geocell geo-localization toolkit")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("partition", "build the hierarchical geocell partition", cmd_partition)
    p.add_argument("--metadata")
    p.add_argument("--t-min", type=int)
    p.add_argument("--t-max", type=int, nargs="+")
    p.add_argument("--out")

    p = add("train", "train a model", cmd_train)
    p.add_argument("--metadata")
    p.add_argument("--inputs")
    p.add_argument("--partition")
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps in total")

    p = add("eval", "evaluate a checkpoint at the distance thresholds", cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition")
    p.add_argument("--metadata")
    p.add_argument("--inputs")
    p.add_argument("--tencrop", action="store_true")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--predictions", help="per-image JSONL (default: next to the report)")

    p = add("predict", "predict locations for inputs", cmd_predict)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition")
    p.add_argument("--inputs")
    p.add_argument("--tencrop", action="store_true")
    p.add_argument("--out", required=True)

    p = add("sample", "write an area-weighted location sampling manifest", cmd_sample)
    p.add_argument("--countries", required=True, help="countries .json or cities .csv")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("bias", "Gini coefficient, Lorenz curve and heatmap of a dataset", cmd_bias)
    p.add_argument("--metadata")
    p.add_argument("--cities", help="country/city database used when records lack a city")
    p.add_argument("--bins", type=int, nargs=2, default=(18, 36), metavar=("LAT", "LON"))
    p.add_argument("--out-dir", required=True)

    p = add("synth", "write a small synthetic dataset", cmd_synth)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--kind", choices=("image", "precomputed"), default="image")
    p.add_argument("--image-size", type=int, default=16)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hiergeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"hiergeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dt.DataError, gc.PartitionError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"hiergeo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, AssertionError) as exc:
        print(f"hiergeo: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
