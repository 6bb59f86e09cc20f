"""Command line entry point: ``fedx train | eval | partition | angles | synth``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    Dataset,
    DatasetError,
    PartitionSpec,
    dirichlet_partition,
    load_dataset,
    make_synthetic_images,
    write_csv,
    write_fxds,
)
from .encoder import DescriptorMismatch, RecordError
from .evaluation import embedding_angle, linear_evaluate, semi_supervised_finetune
from .federation import DivergenceError, descriptor_for, run_training
from .numerics import NonFiniteError

log = logging.getLogger("fedx")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5
OUTPUT_ENV = "FEDX_OUTPUT_DIR"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_data(path, fmt=None, shape=None, class_count=None) -> Dataset:
    if not path:
        raise CliError("no dataset path given", EXIT_DATA)
    try:
        return load_dataset(path, fmt, tuple(shape) if shape else None, class_count or None)
    except FileNotFoundError:
        raise CliError(f"dataset not found: {path}", EXIT_DATA) from None
    except (DatasetError, OSError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}", EXIT_DATA) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def max_class_share(partition: PartitionSpec, labels: np.ndarray, class_count: int) -> float:
    """Mean over classes of the largest fraction of that class held by one client."""
    hist = partition.class_histograms(labels, class_count).astype(np.float64)
    totals = hist.sum(axis=0)
    present = totals > 0
    return float((hist[:, present].max(axis=0) / totals[present]).mean())


# -- train -----------------------------------------------------------------------


def resolve_train_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    flag_map = {
        "rounds": "federation.rounds", "local_epochs": "federation.local_epochs",
        "clients": "partition.clients", "beta": "partition.beta", "seed": "federation.seed",
        "method": "federation.method", "workers": "federation.workers",
        "batch_size": "federation.batch_size", "data": "data.path",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr)
        if value is not None:
            cfg.set(key, value)
    if args.no_fedx:
        cfg.set("federation.fedx", False)
    if args.float64:
        cfg.set("numerics.float64", True)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if args.output:
        cfg.set("output.dir", args.output)
    elif os.environ.get(OUTPUT_ENV):
        cfg.set("output.dir", os.environ[OUTPUT_ENV])
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    v = cfg.values
    dataset = _load_data(v["data.path"], v["data.format"], v["data.shape"], v["data.class_count"])
    test = None
    if v["data.test_path"]:
        test = _load_data(v["data.test_path"], v["data.format"], v["data.shape"],
                          v["data.class_count"] or dataset.class_count)
    fed = cfg.federation()
    out = Path(v["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.ini")

    if v["partition.file"]:
        partition = PartitionSpec.load(v["partition.file"])
        if partition.clients != fed.clients:
            raise ConfigError(f"partition file has {partition.clients} clients, "
                              f"config asks for {fed.clients}")
    else:
        try:
            partition = dirichlet_partition(dataset, fed.clients, v["partition.beta"],
                                            v["partition.seed"], min_size=cfg.min_client_size())
        except ValueError as exc:
            raise CliError(str(exc), EXIT_DATA) from None
    partition.save(out / "partition.json")

    descriptor = descriptor_for(dataset, fed, v["model.hidden"], v["model.embed_dim"],
                                v["model.head_hidden"])
    digest = cfg.digest()
    every = v["output.checkpoint_every"]
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")

    def on_round(r, global_params, rm, clients, broadcast):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rm.record()) + "\n")
        if (every and r % every == 0) or r == fed.rounds:
            save_checkpoint(global_params, out / f"global_r{r:04d}.fxck", r, digest, kind="global")
        if r == fed.rounds:
            save_checkpoint(global_params, out / "final.fxck", r, digest, kind="global")
            save_checkpoint(broadcast, out / "broadcast_final.fxck", r - 1, digest, kind="global")
            for c in clients:
                save_checkpoint(c.params, out / f"local_client{c.client_id:02d}.fxck", r, digest,
                                kind="local", client=c.client_id)

    try:
        result = run_training(fed, dataset, partition, descriptor, cfg.augment_policy(),
                              angle_images=test.samples if test is not None else None,
                              on_round=on_round)
    except (DivergenceError, NonFiniteError) as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    last = result.metrics[-1]
    print(f"finished {fed.rounds} rounds; final loss_total={last.loss_total:.4f}; "
          f"artifacts in {out}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def _holdout(dataset: Dataset, seed: int, fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(len(dataset) * (1 - fraction)))
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


def _load_model(path, dataset: Dataset | None = None):
    try:
        params, manifest = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}", EXIT_ERROR) from None
    except DescriptorMismatch as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISMATCH) from None
    except RecordError as exc:
        raise CliError(f"{path}: {exc}", EXIT_ERROR) from None
    if dataset is not None and params.descriptor.input_dim != dataset.feature_dim:
        raise CliError(f"{path}: model expects {params.descriptor.input_dim} input features, "
                       f"dataset has {dataset.feature_dim}", EXIT_MISMATCH)
    return params, manifest


def cmd_eval(args) -> int:
    data = _load_data(args.data, args.format, args.shape, args.class_count)
    if args.test:
        train, test = data, _load_data(args.test, args.format, args.shape,
                                       args.class_count or data.class_count)
    else:
        train, test = _holdout(data, args.seed)
    params, manifest = _load_model(args.checkpoint, train)
    if args.mode == "linear":
        report = linear_evaluate(params, train, test, epochs=args.epochs or 100,
                                 lr=args.lr or 0.03, seed=args.seed)
    else:
        report = semi_supervised_finetune(params, train, test, args.label_ratio,
                                          epochs=args.epochs or 100, lr=args.lr or 1e-3,
                                          seed=args.seed)
    payload = report.to_dict() | {"checkpoint": str(args.checkpoint),
                                  "checkpoint_round": manifest.get("round"),
                                  "test_source": "file" if args.test else "holdout-20%"}
    out = Path(args.out or Path(args.checkpoint).with_suffix(f".{args.mode}.json"))
    _write_json(out, payload)
    print(f"top1={report.top1:.4f} ({args.mode}, label_ratio={report.label_ratio}) -> {out}")
    return EXIT_OK


# -- partition -------------------------------------------------------------------


def cmd_partition(args) -> int:
    data = _load_data(args.data, args.format, args.shape, args.class_count)
    try:
        spec = dirichlet_partition(data, args.clients, args.beta, args.seed, min_size=args.min_size)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    hist = spec.class_histograms(data.labels, data.class_count)
    for m, size in enumerate(spec.sizes()):
        line = f"client {m:3d}  size {size:6d}"
        if args.inspect:
            line += "  classes " + " ".join(f"{c:5d}" for c in hist[m])
        print(line)
    print(f"max_class_share_mean={max_class_share(spec, data.labels, data.class_count):.6f}")
    if args.out:
        spec.save(args.out)
        print(f"partition written to {args.out}")
    return EXIT_OK


# -- angles ----------------------------------------------------------------------


def cmd_angles(args) -> int:
    data = _load_data(args.data, args.format, args.shape, args.class_count)
    local, _ = _load_model(args.local, data)
    global_, _ = _load_model(args.global_, data)
    if local.descriptor != global_.descriptor:
        raise CliError("local and global checkpoints have different descriptors", EXIT_MISMATCH)
    report = embedding_angle(local, global_, data)
    out = Path(args.out or "angles.json")
    _write_json(out, report.to_dict())
    print(f"mean local-global angle {report.mean_local_global:.3f} deg; "
          f"mean inter-class angle {report.mean_inter_class:.3f} deg -> {out}")
    return EXIT_OK


# -- synth -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    ds = make_synthetic_images(args.count, args.classes, args.channels, args.size, seed=args.seed)
    (write_csv if args.format == "csv" else write_fxds)(ds, args.out)
    print(f"wrote {len(ds)} samples of shape {ds.image_shape} to {args.out}")
    return EXIT_OK


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("fxds", "csv"), default=None)
    p.add_argument("--shape", type=lambda s: tuple(int(v) for v in s.split(",")), default=None,
                   help="C,H,W for CSV input")
    p.add_argument("--class-count", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedx", description="Unsupervised federated learning "
                                     "with local and global knowledge distillation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run federated training")
    t.add_argument("config", nargs="?", help="INI config file")
    t.add_argument("--data")
    t.add_argument("--rounds", type=int)
    t.add_argument("--local-epochs", type=int)
    t.add_argument("--clients", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--method", choices=("simclr", "byol"))
    t.add_argument("--batch-size", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--no-fedx", action="store_true", help="vanilla local objective only")
    t.add_argument("--float64", action="store_true")
    t.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV})")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear or semi-supervised evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--test")
    e.add_argument("--mode", choices=("linear", "semi"), default="linear")
    e.add_argument("--label-ratio", type=float, default=0.1)
    e.add_argument("--epochs", type=int)
    e.add_argument("--lr", type=float)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    _data_flags(e)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("partition", help="draw and inspect a Dirichlet client partition")
    p.add_argument("data")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-size", type=int, default=1)
    p.add_argument("--inspect", action="store_true", help="print per-class histograms")
    p.add_argument("--out", help="write the partition spec (JSON)")
    _data_flags(p)
    p.set_defaults(func=cmd_partition)

    a = sub.add_parser("angles", help="local-vs-global and inter-class embedding angles")
    a.add_argument("local")
    a.add_argument("global_", metavar="global")
    a.add_argument("--data", required=True)
    a.add_argument("--out")
    _data_flags(a)
    a.set_defaults(func=cmd_angles)

    s = sub.add_parser("synth", help="write the synthetic desk-scale image set")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=5000)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("fxds", "csv"), default="fxds")
    s.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DescriptorMismatch as exc:
        print(f"descriptor mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
