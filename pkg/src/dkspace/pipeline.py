"""End-to-end steps shared by the command line and the tests."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from dkspace import io
from dkspace.codebook import SCALES, Codebook, iter_points
from dkspace.embednet import (
    ModelParams,
    TrainConfig,
    load_checkpoint,
    predict_bag_probs,
    save_checkpoint,
    train,
)
from dkspace.ensemble import DEFAULT_THRESHOLD, BagPrediction, check_threshold, vote_all
from dkspace.knowspace import Diagnosis, classify_batch
from dkspace.metrics import ConfusionMatrix, MetricReport, compute_metrics, confusion

DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
SPACE_COLUMNS = ("kind", "slide_id", "subtype", "x", "y", "z", "predicted", "true_label", "min_distance", "via_shortcut")


def checkpoint_path(directory: str | Path, scale: int) -> Path:
    return Path(directory) / f"scale{scale}.npz"


def split_ids(manifest: Sequence[io.ManifestEntry], split: str) -> set[str]:
    if split == "all":
        return {e.slide_id for e in manifest}
    return {e.slide_id for e in manifest if e.split == split}


def train_scales(
    bags, cfg: TrainConfig, checkpoint_dir: str | Path | None = None, on_epoch=None
) -> tuple[dict[int, ModelParams], dict[int, list[float]]]:
    """One independent model per scale, optionally written as checkpoints."""
    models, histories = {}, {}
    for s in SCALES:
        scale_bags = [b for b in bags if b.scale_index == s]
        cb_epoch = (lambda e, loss, s=s: on_epoch(s, e, loss)) if on_epoch else None
        models[s], histories[s] = train(scale_bags, cfg, on_epoch=cb_epoch)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(checkpoint_path(checkpoint_dir, s), models[s], cfg, s,
                            extra={"losses": histories[s]})
    return models, histories


def load_models(checkpoint_dir: str | Path) -> dict[int, ModelParams]:
    out = {}
    for s in SCALES:
        path = checkpoint_path(checkpoint_dir, s)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        params, meta = load_checkpoint(path)
        if meta["scale"] != s:
            raise ValueError(f"{path} holds a scale-{meta['scale']} model")
        out[s] = params
    return out


def model_bag_probs(models: Mapping[int, ModelParams], bags) -> list[BagPrediction]:
    return [predict_bag_probs(models[b.scale_index], b) for b in bags]


def diagnose(preds: Sequence[BagPrediction], cb: Codebook, thresholds: Mapping[int, float] | None = None) -> list[Diagnosis]:
    io.check_bag_widths(preds, cb)
    codes = vote_all(preds, thresholds)
    return classify_batch(list(codes.values()), cb)


def accuracy(diagnoses: Sequence[Diagnosis], truth: Mapping[str, str]) -> float:
    if not diagnoses:
        raise ValueError("no diagnoses to score")
    return sum(d.predicted == truth[d.slide_id] for d in diagnoses) / len(diagnoses)


def evaluate(diagnoses: Sequence[Diagnosis], manifest: Sequence[io.ManifestEntry], cb: Codebook) -> tuple[ConfusionMatrix, MetricReport]:
    truth = {e.slide_id: e.subtype for e in manifest}
    missing = sorted(d.slide_id for d in diagnoses if d.slide_id not in truth)
    if missing:
        raise ValueError(f"{len(missing)} diagnosed slide(s) absent from the manifest, e.g. {missing[0]}")
    if not diagnoses:
        raise ValueError("no slides shared between diagnoses and manifest")
    cm = confusion([truth[d.slide_id] for d in diagnoses], [d.predicted for d in diagnoses], cb.subtypes)
    return cm, compute_metrics(cm)


def sweep(
    preds: Sequence[BagPrediction],
    manifest: Sequence[io.ManifestEntry],
    cb: Codebook,
    grid: Sequence[float] = DEFAULT_GRID,
    base: Mapping[int, float] | None = None,
) -> list[tuple[str, float, float]]:
    """Accuracy as one scale's threshold moves over ``grid``.

    The other scales stay at ``base`` (default 0.5 each). The extra
    curve ``all`` moves all three thresholds together.
    """
    if not grid:
        raise ValueError("empty threshold grid")
    grid = [check_threshold(v) for v in grid]
    base = {**{s: DEFAULT_THRESHOLD for s in SCALES}, **(base or {})}
    truth = {e.slide_id: e.subtype for e in manifest}
    io.check_bag_widths(preds, cb)
    rows = []
    for name in [*map(str, SCALES), "all"]:
        for v in grid:
            th = {s: v for s in SCALES} if name == "all" else {**base, int(name): v}
            rows.append((name, v, accuracy(diagnose(preds, cb, th), truth)))
    return rows


def space_rows(diagnoses: Sequence[Diagnosis], cb: Codebook, truth: Mapping[str, str] | None = None) -> list[dict]:
    truth = truth or {}
    rows = []
    for d in sorted(diagnoses, key=lambda d: d.slide_id):
        x, y, z = d.projected_coord
        rows.append({"kind": "prediction", "slide_id": d.slide_id, "subtype": "", "x": x, "y": y, "z": z,
                     "predicted": d.predicted, "true_label": truth.get(d.slide_id, ""),
                     "min_distance": repr(d.min_distance), "via_shortcut": int(d.via_shortcut)})
    for p in iter_points(cb):
        x, y, z = p.coord
        rows.append({"kind": "knowledge", "slide_id": "", "subtype": p.subtype, "x": x, "y": y, "z": z,
                     "predicted": "", "true_label": "", "min_distance": "", "via_shortcut": ""})
    return rows


def render_report(d: Diagnosis) -> str:
    lines = [f"Slide {d.slide_id}"]
    for s in SCALES:
        names = d.per_scale_features.get(s, [])
        code = d.codes.get(s, "")
        shown = ", ".join(names) if names else "no features detected"
        lines.append(f"  s={s}  {code:<10} {shown}")
    x, y, z = d.projected_coord
    lines.append(f"  coordinate     ({x}, {y}, {z})")
    lines.append("  nearest knowledge distance per subtype:")
    best = min(d.per_subtype_min_distance.values())
    for subtype, dist in d.per_subtype_min_distance.items():
        mark = " *" if dist == best else ""
        lines.append(f"    {subtype:<8} {dist:10.4f}{mark}")
    verdict = f"  diagnosis      {d.predicted}"
    if d.via_shortcut:
        verdict += f"  (shortcut rule {d.shortcut_rule}; distance not used)"
    elif d.tie:
        tied = [s for s, v in d.per_subtype_min_distance.items() if v == best]
        verdict += f"  (tie between {', '.join(tied)}; first listed wins)"
    lines.append(verdict)
    return "\n".join(lines) + "\n"
