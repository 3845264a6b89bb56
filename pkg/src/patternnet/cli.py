"""Command-line surface for the pipeline.

Subcommands: gen-data, train, eval, robustness, partition, knn, params.
Options may come from a JSON config file (--config) with command-line
flags taking precedence.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cloning import clone_partition
from .geometry import (
    SHAPE_KINDS,
    DatasetManifest,
    FormatError,
    ManifestEntry,
    ParseError,
    gen_shape,
    load_cloud,
    load_manifest,
    normalize_unit_sphere,
    save_cloud,
    save_manifest,
)
from .neighbors import knn
from .network import PatternNetConfig, count_params
from .training import (
    CheckpointError,
    DivergenceError,
    derive_seed,
    evaluate,
    fit,
    load_checkpoint,
    save_checkpoint,
    subset_consistency,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# RunConfig holds every tunable a run can carry; unknown config-file keys are rejected.
@dataclass
class RunConfig:
    num_classes: int = 4
    num_parts: int | None = None
    levels: int = 4
    neighbors: int = 30
    mapping_weight: float = 0.2
    label_smoothing: float = 0.2
    dropout: float = 0.5
    dynamic_graph: bool = True
    layer1_metric: str = "hilbert"
    psi_mlp: bool = False
    dtype: str = "float32"
    repartition_every_epoch: bool = True
    seed: int = 0
    epochs: int = 50
    batch_size: int = 16
    threads: int = 1
    out_dir: str = "."

    def network_config(self) -> PatternNetConfig:
        return PatternNetConfig(
            num_classes=self.num_classes,
            num_parts=self.num_parts,
            levels=self.levels,
            neighbors=self.neighbors,
            mapping_weight=self.mapping_weight,
            label_smoothing=self.label_smoothing,
            dropout=self.dropout,
            dynamic_graph=self.dynamic_graph,
            layer1_metric=self.layer1_metric,
            psi_mlp=self.psi_mlp,
            dtype=self.dtype,
            repartition_every_epoch=self.repartition_every_epoch,
        )


def load_run_config(path) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**doc)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _merge_config(args) -> RunConfig:
    run = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    for name in RunConfig.__dataclass_fields__:
        value = getattr(args, name, None)
        if value is not None:
            setattr(run, name, value)
    return run


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--levels", type=int, default=None, help="number of cloning subsets")
    p.add_argument("--neighbors", type=int, default=None, help="KNN neighbor count")
    p.add_argument("--lambda", dest="mapping_weight", type=float, default=None, help="linear-mapping loss weight")
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=None)
    p.add_argument("--num-parts", dest="num_parts", type=int, default=None)
    p.add_argument("--layer1-metric", dest="layer1_metric", choices=["hilbert", "euclidean"], default=None)
    p.add_argument("--static-graph", dest="dynamic_graph", action="store_const", const=False, default=None)
    p.add_argument("--psi-mlp", dest="psi_mlp", action="store_const", const=True, default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng_seed = args.seed
    part_names: list[str] = []
    part_offset: dict[str, int] = {}
    for kind, names in (
        ("sphere", ["upper", "lower"]),
        ("cube", ["x-faces", "y-faces", "z-faces"]),
        ("torus", ["outer", "inner"]),
        ("cross-planes", ["plane-a", "plane-b"]),
    ):
        part_offset[kind] = len(part_names)
        part_names += [f"{kind}/{n}" for n in names]

    train_entries: list[ManifestEntry] = []
    test_entries: list[ManifestEntry] = []
    for class_id, kind in enumerate(SHAPE_KINDS):
        ids = np.random.default_rng(derive_seed(rng_seed, "split", kind)).permutation(args.per_class)
        n_test = args.per_class // 5  # stratified 80/20 split keeps the classes balanced
        test_set = set(ids[:n_test].tolist())
        for i in range(args.per_class):
            cloud = gen_shape(kind, args.points, derive_seed(rng_seed, "shape", kind, i), id=f"{kind}-{i:04d}")
            cloud.part_labels = cloud.part_labels + part_offset[kind]
            cloud = normalize_unit_sphere(cloud)
            rel = f"{kind}-{i:04d}.pnpc"
            save_cloud(cloud, out_dir / rel)
            entry = ManifestEntry(rel, class_id)
            (test_entries if i in test_set else train_entries).append(entry)

    class_names = list(SHAPE_KINDS)
    for name, entries in (("manifest_train.json", train_entries), ("manifest_test.json", test_entries)):
        save_manifest(
            DatasetManifest(entries, class_names, part_names, seed=rng_seed, base_dir=out_dir),
            out_dir / name,
        )
    print(f"wrote {len(train_entries)} train / {len(test_entries)} test clouds to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _merge_config(args)
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_manifest = load_manifest(args.train_manifest)
    run.num_classes = len(train_manifest.class_names)
    train_clouds = train_manifest.load_clouds()
    eval_clouds = load_manifest(args.test_manifest).load_clouds() if args.test_manifest else None

    def log(record):
        test = f" test_acc={record['test_acc']:.4f}" if record["test_acc"] is not None else ""
        print(
            f"epoch {record['epoch']:3d} ce={record['ce']:.4f} mapping={record['mapping']:.4f} "
            f"train_acc={record['train_acc']:.4f}{test}"
        )

    checkpoint = fit(
        train_clouds,
        run.network_config(),
        seed=run.seed,
        epochs=run.epochs,
        batch_size=run.batch_size,
        eval_clouds=eval_clouds,
        history_path=out_dir / "history.jsonl",
        threads=run.threads,
        log=log if not args.quiet else None,
    )
    ckpt_path = out_dir / "checkpoint.pnet"
    save_checkpoint(checkpoint, ckpt_path)
    print(f"saved {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    clouds = load_manifest(args.manifest).load_clouds()
    report = evaluate(clouds, checkpoint, noise_sigma=args.sigma, seed=args.seed or 0, threads=args.threads or 1)
    print(
        json.dumps(
            {
                "sigma": args.sigma,
                "overall_accuracy": report.overall_accuracy,
                "per_class_accuracy": report.per_class_accuracy,
                "mapping_loss_mean": report.mapping_loss_mean,
            }
        )
    )
    return EXIT_OK


def cmd_robustness(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    clouds = load_manifest(args.manifest).load_clouds()
    seed = args.seed or 0
    threads = args.threads or 1
    sigmas = [float(s) for s in args.sigmas.split(",")]
    rows = []
    for sigma in sigmas:
        report = evaluate(clouds, checkpoint, noise_sigma=sigma, seed=seed, threads=threads)
        consistency = subset_consistency(
            [c if sigma == 0 else _noisy(c, sigma, seed) for c in clouds], checkpoint, seed=seed, threads=threads
        )
        rows.append((sigma, report.overall_accuracy, report.per_class_accuracy, consistency))
    out = Path(args.out) if args.out else None
    _write_csv(out, ["sigma", "overall_acc", "macro_acc", "subset_consistency"], rows)

    if args.k_sweep:
        # inference-time sweep: the graph degree is not baked into any weight
        # shape, so the trained model can be queried at a different K
        krows = []
        for k in (int(k) for k in args.k_sweep.split(",")):
            report = evaluate(clouds, checkpoint, seed=seed, threads=threads, k_override=k)
            krows.append((k, report.overall_accuracy, report.per_class_accuracy))
        kout = out.with_name(out.stem + "_k" + out.suffix) if out else None
        _write_csv(kout, ["k", "overall_acc", "macro_acc"], krows)
    return EXIT_OK


def _noisy(cloud, sigma, seed):
    from .geometry import add_gaussian_noise

    return add_gaussian_noise(cloud, sigma, derive_seed(seed, "noise", cloud.id))


def _write_csv(path, header, rows) -> None:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    finally:
        if path:
            fh.close()


def cmd_partition(args) -> int:
    cloud = load_cloud(args.input)
    part = clone_partition(cloud, args.levels, args.seed or 0)
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    csv_path = out_dir / f"{stem}_assignment.csv"
    _write_csv(csv_path, ["subset"], [(int(s),) for s in part.assignment])
    doc = {
        "levels": part.levels,
        "seed": part.seed,
        "subset_entropies": [None if np.isnan(h) else h for h in part.subset_entropies],
        "entropy_gap": None if np.isnan(part.entropy_gap) else part.entropy_gap,
        "within_tolerance": part.within_tolerance,
        "sizes": part.sizes().tolist(),
    }
    json_path = out_dir / f"{stem}_entropy.json"
    json_path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_knn(args) -> int:
    cloud = load_cloud(args.input)
    index = knn(cloud.points, args.neighbors, metric=args.metric)
    header = ["point"] + [f"n{j}" for j in range(1, args.neighbors + 1)]
    rows = [(i, *index.indices[i]) for i in range(index.indices.shape[0])]
    _write_csv(Path(args.out) if args.out else None, header, rows)
    return EXIT_OK


def cmd_params(args) -> int:
    run = _merge_config(args)
    breakdown = count_params(run.network_config())
    for group, count in breakdown.items():
        if group != "total":
            print(f"{group:12s} {count:10d}")
    print(f"{'total':12s} {breakdown['total']:10d}")
    if args.budget is not None and breakdown["total"] > args.budget:
        print(f"over budget: {breakdown['total']} > {args.budget}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="patternnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", dest="per_class", type=int, default=50)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier from manifests")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--quiet", action="store_true")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="noise sweep (and optional K sweep) to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigmas", default="0,0.02,0.05,0.08,0.1")
    p.add_argument("--k-sweep", dest="k_sweep", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("partition", help="partition one cloud; emit assignment CSV + entropy JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("knn", help="emit a neighbor index as CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--neighbors", type=int, default=30)
    p.add_argument("--metric", choices=["euclidean", "hilbert"], default="euclidean")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("params", help="print the trainable-parameter breakdown")
    p.add_argument("--budget", type=int, default=None)
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ParseError, FormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
