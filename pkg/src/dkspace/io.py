"""Reading and writing datasets, bag-probability files and diagnoses.

A dataset directory holds::

    manifest.csv     slide_id, subtype, split, code_s1, code_s2, code_s3
    bags.csv         slide_id, scale, bag_id, p_1 .. p_n (blank past a scale's width)
    instances.npz    per-bag instance matrices for training
    synth.json       generator settings
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dkspace.codebook import SCALES, BinaryCode, Codebook
from dkspace.embednet import Bag
from dkspace.ensemble import BagPrediction, SlideCode
from dkspace.knowspace import Diagnosis
from dkspace.synth import SynthConfig, SynthSlide

MANIFEST = "manifest.csv"
BAGS = "bags.csv"
INSTANCES = "instances.npz"
SYNTH_META = "synth.json"


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    subtype: str
    split: str
    codes: SlideCode


def write_bag_probs(path: str | Path, preds: Iterable[BagPrediction]) -> None:
    preds = list(preds)
    path = Path(path)
    if path.suffix == ".jsonl":
        with open(path, "w") as fh:
            for p in preds:
                fh.write(json.dumps({"slide_id": p.slide_id, "scale": p.scale_index, "bag_id": p.bag_id,
                                     "probs": list(p.probs)}) + "\n")
        return
    width = max((len(p.probs) for p in preds), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "scale", "bag_id"] + [f"p_{i + 1}" for i in range(width)])
        for p in preds:
            w.writerow([p.slide_id, p.scale_index, p.bag_id] + [repr(x) for x in p.probs]
                       + [""] * (width - len(p.probs)))


def read_bag_probs(path: str | Path) -> list[BagPrediction]:
    path = Path(path)
    out = []
    if path.suffix == ".jsonl":
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    out.append(BagPrediction(str(rec["slide_id"]), int(rec["scale"]), int(rec["bag_id"]),
                                             tuple(rec["probs"])))
                except (KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
        return out
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["slide_id", "scale", "bag_id"]:
            raise ValueError(f"{path}: expected header slide_id,scale,bag_id,p_1..p_n")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            probs = [float(x) for x in row[3:] if x != ""]
            out.append(BagPrediction(row[0], int(row[1]), int(row[2]), tuple(probs)))
    return out


def check_bag_widths(preds: Sequence[BagPrediction], cb: Codebook) -> None:
    for p in preds:
        if p.scale_index not in SCALES:
            raise ValueError(f"{p.slide_id} bag {p.bag_id}: unknown scale {p.scale_index}")
        w = cb.schema(p.scale_index).width
        if len(p.probs) != w:
            raise ValueError(
                f"{p.slide_id} s={p.scale_index} bag {p.bag_id}: {len(p.probs)} probabilities, "
                f"codebook {cb.disease_name} has {w} features at that scale"
            )


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "subtype", "split", "code_s1", "code_s2", "code_s3"])
        for e in entries:
            w.writerow([e.slide_id, e.subtype, e.split] + [str(e.codes.code(s)) for s in SCALES])


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            codes = SlideCode.from_bits(row["slide_id"], row["code_s1"], row["code_s2"], row["code_s3"])
            out.append(ManifestEntry(row["slide_id"], row["subtype"], row["split"], codes))
    return out


def write_dataset(directory: str | Path, slides: Sequence[SynthSlide], cfg: SynthConfig, cb: Codebook) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_manifest(d / MANIFEST, (ManifestEntry(s.slide_id, s.true_subtype, s.split, s.true_codes) for s in slides))
    write_bag_probs(d / BAGS, (p for s in slides for p in s.all_bag_probs()))
    bags = [b for s in slides for sc in SCALES for b in s.bags[sc]]
    with open(d / INSTANCES, "wb") as fh:
        np.savez(
            fh,
            slide_id=np.array([b.slide_id for b in bags]),
            scale=np.array([b.scale_index for b in bags], dtype=np.int64),
            bag_id=np.array([b.bag_id for b in bags], dtype=np.int64),
            instances=np.stack([b.instances for b in bags]) if bags else np.zeros((0, 1, cfg.width)),
        )
    meta = {"disease": cb.disease_name, "config": asdict(cfg)}
    (d / SYNTH_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_instance_bags(directory: str | Path, manifest: Sequence[ManifestEntry]) -> list[Bag]:
    """Training bags with labels taken from the manifest's true codes."""
    labels = {e.slide_id: e.codes for e in manifest}
    with np.load(Path(directory) / INSTANCES, allow_pickle=False) as data:
        ids, scales, bag_ids, x = data["slide_id"], data["scale"], data["bag_id"], data["instances"]
    out = []
    for sid, s, b, inst in zip(ids.tolist(), scales.tolist(), bag_ids.tolist(), x):
        if sid not in labels:
            raise ValueError(f"instances reference slide {sid!r} missing from the manifest")
        out.append(Bag(sid, int(s), inst, np.array(labels[sid].code(int(s)).bits, dtype=float), bag_id=int(b)))
    return out


def write_diagnoses(path: str | Path, diagnoses: Iterable[Diagnosis]) -> None:
    with open(path, "w") as fh:
        for d in sorted(diagnoses, key=lambda d: d.slide_id):
            fh.write(json.dumps(d.to_record()) + "\n")


def read_diagnoses(path: str | Path) -> list[Diagnosis]:
    with open(path) as fh:
        return [Diagnosis.from_record(json.loads(line)) for line in fh if line.strip()]


def code_from_strings(slide_id: str, codes: dict[int, str]) -> SlideCode:
    return SlideCode(slide_id, tuple(BinaryCode.from_string(s, codes[s]) for s in SCALES))
