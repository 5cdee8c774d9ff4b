"""Command-line front end: dataset generation, training, evaluation, CAM
dumps, and cluster inspection, each wrapped in a reproducible run manifest.

Exit codes: 0 success, 1 runtime failure (I/O, invalid data), 2 usage errors
(bad flags or config). Every file-producing command writes run_manifest.txt
into its output root before any other file; the manifest has no timestamps,
so identical runs produce identical trees.

The XMC_THREADS environment variable caps BLAS/OpenMP thread counts; it is
applied before numpy is imported, which is why all numpy-dependent imports in
this module live inside functions.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

_BLAS_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class UsageError(Exception):
    """Bad command usage not caught by argparse (maps to exit code 2)."""


def _cap_threads() -> None:
    raw = os.environ.get("XMC_THREADS")
    if raw is None:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise UsageError(f"XMC_THREADS must be a positive integer, got {raw!r}")
    for var in _BLAS_VARS:
        os.environ[var] = raw


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_manifest(out_dir: Path, command: str, seed: int, config: dict[str, str], inputs: dict[str, str], outputs: dict[str, str]) -> Path:
    from . import __version__

    canonical = "".join(f"{k}={v}\n" for k, v in config.items())
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"seed={seed}",
        f"config_digest={hashlib.sha256(canonical.encode('utf-8')).hexdigest()}",
    ]
    lines += [f"config.{k}={v}" for k, v in config.items()]
    for name in sorted(inputs):
        lines.append(f"input.{name}.path={inputs[name]}")
        lines.append(f"input.{name}.sha256={_sha256(inputs[name])}")
    for name in sorted(outputs):
        lines.append(f"output.{name}={outputs[name]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _config_digest(config: dict[str, str]) -> str:
    canonical = "".join(f"{k}={v}\n" for k, v in config.items())
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_pgm(path, gray) -> None:
    import numpy as np

    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM writer needs a 2-d uint8 array, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def cmd_gen(args) -> int:
    from .data import WorldSpec, generate_dataset

    spec = WorldSpec(n_themes=args.themes)
    try:
        spec.validate()
        if args.train < 1 or args.test < 0:
            raise ValueError(f"need --train >= 1 and --test >= 0, got {args.train}/{args.test}")
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    out = Path(args.out)
    config = {
        "n_train": str(args.train),
        "n_test": str(args.test),
        "seed": str(args.seed),
        **{f: str(getattr(spec, f)) for f in spec.__dataclass_fields__},
    }
    outputs = {
        "manifest": "manifest.tsv",
        "taxonomy": "taxonomy.tsv",
        "association": "assoc.tsv",
        "concreteness": "concreteness.tsv",
        "images": "images",
    }
    _write_run_manifest(out, "gen", args.seed, config, {}, outputs)
    generate_dataset(spec, args.train, args.test, args.seed, out)
    print(f"wrote {args.train + args.test} samples under {out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_manifest
    from .figures import loss_curve
    from .trainer import TrainConfig, config_text, fit, load_config_file, parse_config_text

    base = load_config_file(args.config) if args.config else TrainConfig()
    overrides = []
    if args.epochs is not None:
        overrides.append(f"epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config = parse_config_text("\n".join(overrides), base)
    config.validate()

    data_dir = Path(args.data)
    manifest_path = data_dir / "manifest.tsv"
    samples = [s for s in load_manifest(manifest_path) if s.split == "train"]
    if not samples:
        raise ValueError(f"{manifest_path}: no train-split samples")

    ckpt_dir = Path(args.ckpt_dir)
    config_lines = dict(line.split("=", 1) for line in config_text(config).splitlines())
    inputs = {"manifest": str(manifest_path)}
    if args.config:
        inputs["config"] = args.config
    outputs = {
        "network": "network.xmck",
        "counts": "counts.xmct",
        "trainlog": "trainlog.csv",
        "loss_curve": "loss_curve.png",
    }
    _write_run_manifest(ckpt_dir, "train", config.seed, config_lines, inputs, outputs)

    def progress(record):
        print(
            f"epoch {record.epoch}: mean loss {record.mean_loss:.6f}, "
            f"{record.table_entries} joint counts, {record.seconds:.1f}s"
        )

    net, table, log = fit(samples, config, checkpoint_dir=ckpt_dir, progress=progress)
    log.write_csv(ckpt_dir / "trainlog.csv")
    loss_curve([rec.loss for rec in log.steps], ckpt_dir / "loss_curve.png")
    print(f"finished {config.epochs} epochs over {len(samples)} samples; outputs under {ckpt_dir}")
    return 0


def _load_eval_state(args, image_size: int):
    from .text import load_counts
    from .vision import load_checkpoint

    net = load_checkpoint(args.ckpt, image_size=image_size)
    table = load_counts(args.counts)
    if net.config.n_clusters != table.n_clusters:
        raise ValueError(
            f"cluster-count mismatch: checkpoint {args.ckpt} has N={net.config.n_clusters}, "
            f"counts file {args.counts} has N={table.n_clusters}"
        )
    return net, table


def cmd_eval(args) -> int:
    import numpy as np

    from . import figures, metrics
    from .data import load_gold, load_manifest
    from .trainer import tokenize

    data_dir = Path(args.data)
    manifest_path = data_dir / "manifest.tsv"
    samples = load_manifest(manifest_path)
    gold = load_gold(data_dir)
    train_tokens = [tokenize(s.caption) for s in samples if s.split == "train"]
    test_samples = [s for s in samples if s.split == "test"]
    words = sorted(gold.taxonomy)
    out = Path(args.out)

    inputs = {
        "manifest": str(manifest_path),
        "taxonomy": str(data_dir / "taxonomy.tsv"),
        "association": str(data_dir / "assoc.tsv"),
        "concreteness": str(data_dir / "concreteness.tsv"),
    }
    config = {"task": args.task, "theta_t": str(args.theta_t), "theta_v": str(args.theta_v)}
    digest = _config_digest(config)

    needs_model = args.task != "baselines"
    if needs_model:
        from .data import ppm_size

        inputs["checkpoint"] = args.ckpt
        inputs["counts"] = args.counts
        # checkpoints carry no spatial extent; the dataset sets it
        image_size = ppm_size(samples[0].image_path)[0] if samples else 64
        net, table = _load_eval_state(args, image_size)

    if args.task == "baselines":
        outputs = {
            "random": "baseline_random.txt",
            "random_csv": "baseline_random.csv",
            "kmeans": "baseline_kmeans.txt",
            "kmeans_csv": "baseline_kmeans.csv",
            "boxes": "baseline_boxes.txt",
            "boxes_csv": "baseline_boxes.csv",
            "figure": "baselines.png",
        }
    else:
        outputs = {"report": "report.txt", "report_csv": "report.csv", "figure": f"{args.task}.png"}
    _write_run_manifest(out, f"eval:{args.task}", args.seed, config, inputs, outputs)

    if args.task == "clustering":
        clustering = metrics.induced_clustering(table, words, args.theta_t)
        assigned = {w: c for w, c in clustering.items() if c < table.n_clusters}
        report = metrics.MetricsReport(
            "clustering",
            {
                "fscore": metrics.clustering_fscore(gold.taxonomy, clustering),
                "words_assigned": float(len(assigned)),
                "clusters_used": float(len(set(assigned.values()))),
            },
            seed=args.seed,
            config_digest=digest,
        )
        report.write(out / "report")
        sizes = sorted(
            (sum(1 for c in clustering.values() if c == cid) for cid in set(clustering.values())),
            reverse=True,
        )
        figures.cluster_size_bars(sizes, out / "clustering.png")
    elif args.task == "association":
        clustering = metrics.induced_clustering(table, words, args.theta_t)
        mas = metrics.mean_association_strength(clustering, gold.association, words)
        pairs = sum(
            1
            for w1 in words
            for w2 in words
            if w1 != w2 and clustering[w1] == clustering[w2] and (w1, w2) in gold.association
        )
        values = {"same_cluster_pairs": float(pairs)}
        if mas is not None:
            values["mas"] = mas
        report = metrics.MetricsReport("association", values, seed=args.seed, config_digest=digest)
        report.write(out / "report")
        bars = {"gold mean": float(np.mean(list(gold.association.values())))}
        if mas is not None:
            bars["model"] = mas
        figures.association_bars(bars, out / "association.png")
    elif args.task == "concreteness":
        frequencies = metrics.corpus_frequencies(train_tokens)
        report = metrics.concreteness_eval(
            table, gold.concreteness, frequencies, seed=args.seed, config_digest=digest
        )
        report.write(out / "report")
        buckets = {
            int(k.split("pearson_min")[1]): v
            for k, v in report.metrics.items()
            if k.startswith("pearson_min")
        }
        figures.concreteness_curve(buckets, out / "concreteness.png")
    elif args.task == "classification":
        class_map = metrics.build_class_map(words, table, args.theta_t)
        report = metrics.multilabel_eval(
            test_samples, net, class_map, args.theta_v, seed=args.seed, config_digest=digest
        )
        report.write(out / "report")
        figures.prf_bars(report.metrics, out / "classification.png", "zero-shot classification")
    elif args.task == "localization":
        report = metrics.localization_eval(
            test_samples, net, args.theta_v, seed=args.seed, config_digest=digest
        )
        report.write(out / "report")
        figures.prf_bars(report.metrics, out / "localization.png", "localization")
    else:
        _run_baselines(args, out, gold, words, train_tokens, test_samples, digest)
        return 0

    for line in report.to_keyvalue().splitlines():
        print(line)
    return 0


def _run_baselines(args, out: Path, gold, words, train_tokens, test_samples, digest: str) -> None:
    import numpy as np

    from . import figures, metrics
    from .data import ppm_size

    n_categories = len(set(gold.taxonomy.values()))
    restarts = 5
    fscores, mas_values = [], []
    for r in range(restarts):
        clustering = metrics.random_clustering(words, n_categories, args.seed + r)
        fscores.append(metrics.clustering_fscore(gold.taxonomy, clustering))
        mas = metrics.mean_association_strength(clustering, gold.association, words)
        if mas is not None:
            mas_values.append(mas)
    random_metrics = {
        "fscore_mean": float(np.mean(fscores)),
        "fscore_std": float(np.std(fscores)),
        "restarts": float(restarts),
        "k": float(n_categories),
    }
    if mas_values:
        random_metrics["mas_mean"] = float(np.mean(mas_values))
    report_random = metrics.MetricsReport("baseline_random", random_metrics, seed=args.seed, config_digest=digest)
    report_random.write(out / "baseline_random")

    clustering = metrics.kmeans_text_clustering(train_tokens, words, n_categories, args.seed)
    kmeans_metrics = {
        "fscore": metrics.clustering_fscore(gold.taxonomy, clustering),
        "k": float(n_categories),
    }
    mas = metrics.mean_association_strength(clustering, gold.association, words)
    if mas is not None:
        kmeans_metrics["mas"] = mas
    report_kmeans = metrics.MetricsReport("baseline_kmeans", kmeans_metrics, seed=args.seed, config_digest=digest)
    report_kmeans.write(out / "baseline_kmeans")

    rng = np.random.Generator(np.random.PCG64(args.seed))
    tp = fp = fn = 0
    for sample in test_samples:
        gold_boxes = [b for _, b in sample.boxes]
        size = ppm_size(sample.image_path)[0]
        predicted = metrics.random_boxes(len(gold_boxes), size, rng)
        dtp, dfp, dfn = metrics.match_boxes(predicted, gold_boxes)
        tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
    precision, recall, f1 = metrics.prf(tp, fp, fn)
    report_boxes = metrics.MetricsReport(
        "baseline_boxes",
        {"precision": precision, "recall": recall, "f1": f1, "images": float(len(test_samples))},
        seed=args.seed,
        config_digest=digest,
    )
    report_boxes.write(out / "baseline_boxes")

    bars = {"random F": random_metrics["fscore_mean"], "k-means F": kmeans_metrics["fscore"], "random-box P": precision}
    figures.association_bars(bars, out / "baselines.png", title="baselines")
    for report in (report_random, report_kmeans, report_boxes):
        for line in report.to_keyvalue().splitlines():
            print(line)


def cmd_cam(args) -> int:
    import numpy as np

    from . import figures
    from .data import load_image
    from .vision import compute_cam, extract_box, load_checkpoint, predict_clusters

    image = load_image(args.image)
    net = load_checkpoint(args.ckpt, image_size=image.shape[1])
    out = Path(args.out)

    config = {"theta_v": str(args.theta_v)}
    inputs = {"checkpoint": args.ckpt, "image": args.image}
    probs = net.forward(image[None])[0]
    clusters = [int(c) for c in np.flatnonzero(predict_clusters(probs, args.theta_v))]
    outputs = {"boxes": "boxes.txt"}
    for c in clusters:
        outputs[f"cam_{c}"] = f"cam_cluster_{c}.pgm"
        outputs[f"overlay_{c}"] = f"cam_cluster_{c}.png"
    _write_run_manifest(out, "cam", args.seed, config, inputs, outputs)

    lines = []
    for c in clusters:
        cam = compute_cam(net, image, c)
        heat = cam.upsampled
        span = float(heat.max() - heat.min())
        if span > 0:
            gray = np.rint((heat - heat.min()) / span * 255).astype(np.uint8)
        else:
            gray = np.zeros(heat.shape, dtype=np.uint8)
        _write_pgm(out / f"cam_cluster_{c}.pgm", gray)
        box = extract_box(cam)
        figures.cam_overlay(image, cam, out / f"cam_cluster_{c}.png", box)
        if box is None:
            lines.append(f"cluster {c} no-box")
        else:
            lines.append(f"cluster {c} box {box.x_min} {box.y_min} {box.x_max} {box.y_max}")
    (out / "boxes.txt").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    for line in lines:
        print(line)
    if not clusters:
        print("no clusters predicted")
    return 0


def cmd_dump_clusters(args) -> int:
    from .text import load_counts

    table = load_counts(args.counts)
    members: dict[int, list[tuple[float, str]]] = {}
    for word in sorted(table.vocabulary):
        assignment = table.assign_word(word, args.theta_t)
        if assignment.cluster is not None:
            members.setdefault(assignment.cluster, []).append((-assignment.probability, word))
    lines = []
    for cluster in sorted(members):
        ranked = [w for _neg, w in sorted(members[cluster])]
        lines.append(f"Cluster {cluster}: " + "; ".join(ranked))

    if args.out:
        out = Path(args.out)
        config = {"theta_t": str(args.theta_t)}
        _write_run_manifest(out, "dump-clusters", args.seed, config, {"counts": args.counts}, {"clusters": "clusters.txt"})
        (out / "clusters.txt").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    for line in lines:
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmcat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic shapes-world dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=2000, help="number of train samples")
    p.add_argument("--test", type=int, default=200, help="number of test samples")
    p.add_argument("--themes", type=int, default=3, help="number of themes (must divide 12)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the cross-modal model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (with manifest.tsv)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--ckpt-dir", required=True, help="output directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run one evaluation task")
    p.add_argument("--ckpt", help="network checkpoint (.xmck)")
    p.add_argument("--counts", help="co-occurrence counts file (.xmct)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--task",
        required=True,
        choices=["clustering", "association", "concreteness", "classification", "localization", "baselines"],
    )
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theta-t", type=float, default=0.08, help="text assignment threshold")
    p.add_argument("--theta-v", type=float, default=0.5, help="visual prediction threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="dump CAM heatmaps and boxes for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PPM image path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theta-v", type=float, default=0.5)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("dump-clusters", help="list induced word clusters")
    p.add_argument("--counts", required=True)
    p.add_argument("--theta-t", type=float, default=0.08)
    p.add_argument("--out", help="optional output directory for the listing")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dump_clusters)

    return parser


def main(argv=None) -> int:
    try:
        _cap_threads()
        args = build_parser().parse_args(argv)
        if args.command == "eval" and args.task != "baselines":
            if not args.ckpt or not args.counts:
                raise UsageError(f"--ckpt and --counts are required for task {args.task!r}")
        from .trainer import ConfigError

        try:
            return args.func(args)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
