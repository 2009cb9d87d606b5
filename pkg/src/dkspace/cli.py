"""Command line entry point: ``dkspace <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from dkspace import io, pipeline, plotting
from dkspace.codebook import SCALES, CodebookError, load_codebook
from dkspace.embednet import TrainConfig, TrainingDiverged
from dkspace.ensemble import EnsembleError, check_threshold
from dkspace.synth import SynthConfig, generate_dataset

log = logging.getLogger("dkspace")


class CliError(Exception):
    pass


def _threshold(text: str) -> tuple[int, float]:
    try:
        scale, value = text.split("=", 1)
        scale = int(scale.lstrip("s"))
        if scale not in SCALES:
            raise ValueError
        return scale, check_threshold(float(value))
    except (ValueError, EnsembleError):
        raise argparse.ArgumentTypeError(f"expected SCALE=VALUE with SCALE in 1..3 and VALUE in (0,1), got {text!r}")


def _count(text: str) -> tuple[str, int]:
    name, _, n = text.partition("=")
    try:
        return name, int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected SUBTYPE=N, got {text!r}")


def _grid(text: str) -> list[float]:
    text = text.strip()
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def _codebook(args):
    path = Path(args.codebook)
    try:
        return load_codebook(path)
    except FileNotFoundError:
        raise CliError(f"codebook not found: {path}") from None


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _manifest(args):
    if args.dataset is None:
        return None
    return io.read_manifest(_need(Path(args.dataset) / io.MANIFEST, "manifest"))


def _bag_predictions(args, cb, manifest):
    """Bag probabilities from checkpoints, an external file, or the dataset."""
    if args.checkpoint_dir:
        if args.dataset is None:
            raise CliError("--checkpoint-dir needs --dataset for the instance data")
        models = pipeline.load_models(_need(Path(args.checkpoint_dir), "checkpoint directory"))
        keep = pipeline.split_ids(manifest, args.split)
        bags = [b for b in io.read_instance_bags(args.dataset, manifest) if b.slide_id in keep]
        return pipeline.model_bag_probs(models, bags)
    if args.bags:
        preds = io.read_bag_probs(_need(Path(args.bags), "bag file"))
    elif args.dataset:
        preds = io.read_bag_probs(_need(Path(args.dataset) / io.BAGS, "bag file"))
    else:
        raise CliError("give --bags, --dataset, or --checkpoint-dir with --dataset")
    if manifest is not None:
        keep = pipeline.split_ids(manifest, args.split)
        preds = [p for p in preds if p.slide_id in keep]
    return preds


def cmd_synth(args) -> int:
    cb = _codebook(args)
    cfg = SynthConfig(
        seed=args.seed, slides_per_subtype=args.slides_per_subtype, bags_per_slide=args.bags,
        instances_per_bag=args.instances, width=args.width, flip_noise=args.noise,
        prob_jitter=args.jitter, signal=args.signal, counts=dict(args.count or []),
    )
    slides = generate_dataset(cb, cfg)
    io.write_dataset(args.out, slides, cfg, cb)
    n_train = sum(s.split == "train" for s in slides)
    print(f"wrote {len(slides)} slides ({n_train} train, {len(slides) - n_train} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    _codebook(args)
    manifest = _manifest(args)
    if manifest is None:
        raise CliError("--dataset is required")
    keep = pipeline.split_ids(manifest, "train")
    bags = [b for b in io.read_instance_bags(args.dataset, manifest) if b.slide_id in keep]
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, momentum=args.momentum, seed=args.seed,
                      hidden=args.hidden, reduce_width=args.reduce_width)

    def report(scale, epoch, loss):
        print(f"scale {scale} epoch {epoch:4d} loss {loss:.6f}")

    _, histories = pipeline.train_scales(bags, cfg, args.checkpoint_dir, on_epoch=report)
    plotting.plot_losses(histories, Path(args.checkpoint_dir) / "losses.png")
    for s in SCALES:
        print(f"scale {s} final loss {histories[s][-1]:.6f}")
    return 0


def _thresholds(args) -> dict[int, float]:
    return dict(args.threshold or [])


def cmd_predict(args) -> int:
    cb = _codebook(args)
    manifest = _manifest(args)
    preds = _bag_predictions(args, cb, manifest)
    diagnoses = pipeline.diagnose(preds, cb, _thresholds(args))
    io.write_diagnoses(args.out, diagnoses)
    shortcut = sum(d.via_shortcut for d in diagnoses)
    print(f"wrote {len(diagnoses)} diagnoses to {args.out} ({shortcut} via shortcut)")
    return 0


def cmd_evaluate(args) -> int:
    cb = _codebook(args)
    manifest = _manifest(args)
    if manifest is None:
        raise CliError("--dataset is required")
    diagnoses = io.read_diagnoses(_need(Path(args.diagnoses), "diagnosis file"))
    cm, report = pipeline.evaluate(diagnoses, manifest, cb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(cm) + "\n")
    text = report.to_text(cb.disease_name)
    (out / "metrics.txt").write_text(text)
    plotting.plot_confusion(cm, out / "confusion.png", title=cb.disease_name)
    print(text, end="")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    cb = _codebook(args)
    manifest = _manifest(args)
    if manifest is None:
        raise CliError("--dataset is required for the true labels")
    grid = args.grid if args.grid is not None else list(pipeline.DEFAULT_GRID)
    if not grid:
        raise CliError("empty threshold grid")
    preds = _bag_predictions(args, cb, manifest)
    rows = pipeline.sweep(preds, manifest, cb, grid, _thresholds(args))
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scale", "v", "accuracy"])
        w.writerows((name, repr(v), repr(acc)) for name, v, acc in rows)
    curves: dict[str, list] = {}
    for name, v, acc in rows:
        curves.setdefault(name, []).append((v, acc))
    plotting.plot_sweep(curves, out.with_suffix(".png"), title=cb.disease_name)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_export_space(args) -> int:
    cb = _codebook(args)
    diagnoses = io.read_diagnoses(_need(Path(args.diagnoses), "diagnosis file")) if args.diagnoses else []
    manifest = _manifest(args)
    truth = {e.slide_id: e.subtype for e in manifest} if manifest else {}
    rows = pipeline.space_rows(diagnoses, cb, truth)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=pipeline.SPACE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    n_pred = sum(r["kind"] == "prediction" for r in rows)
    print(f"wrote {n_pred} prediction and {len(rows) - n_pred} knowledge points to {args.out}")
    return 0


def cmd_report(args) -> int:
    diagnoses = {d.slide_id: d for d in io.read_diagnoses(_need(Path(args.diagnoses), "diagnosis file"))}
    ids = args.slide or sorted(diagnoses)
    for sid in ids:
        if sid not in diagnoses:
            raise CliError(f"unknown slide id {sid!r}")
        print(pipeline.render_report(diagnoses[sid]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkspace", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--codebook", required=True, help="codebook file, or 'rcc' / 'sc' for the shipped ones")
        if dataset:
            p.add_argument("--dataset", help="dataset directory written by 'synth'")

    def bag_source(p):
        p.add_argument("--checkpoint-dir", help="compute bag probabilities with trained models")
        p.add_argument("--bags", help="external bag-probability file (.csv or .jsonl)")
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
        p.add_argument("--threshold", type=_threshold, action="append", metavar="S=V",
                       help="label threshold for scale S (repeatable, default 0.5)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, dataset=False)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slides-per-subtype", type=int, default=50)
    p.add_argument("--count", type=_count, action="append", metavar="SUBTYPE=N",
                   help="override the slide count of one subtype")
    p.add_argument("--bags", type=int, default=5)
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0, help="flip probability of each bag probability")
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--signal", type=float, default=2.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one bag classifier per scale")
    common(p)
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--hidden", type=int, default=TrainConfig.hidden)
    p.add_argument("--reduce-width", type=int, default=TrainConfig.reduce_width)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="vote bag probabilities and diagnose each slide")
    common(p)
    bag_source(p)
    p.add_argument("--out", required=True, help="diagnosis JSON-lines file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score diagnoses against the manifest")
    common(p)
    p.add_argument("--diagnoses", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="accuracy against label threshold")
    common(p)
    bag_source(p)
    p.add_argument("--grid", type=_grid, help="comma list or LO:HI:STEP (default 0.1:0.9:0.1)")
    p.add_argument("--out", required=True, help="CSV path; the figure goes next to it as .png")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-space", help="prediction and knowledge coordinates as CSV")
    common(p)
    p.add_argument("--diagnoses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_space)

    p = sub.add_parser("report", help="print per-slide diagnosis reports")
    p.add_argument("--codebook", help="accepted for symmetry; reports are self-contained")
    p.add_argument("--diagnoses", required=True)
    p.add_argument("--slide", action="append", help="slide id (repeatable, default all)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CodebookError, EnsembleError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
