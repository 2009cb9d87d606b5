"""Synthetic slides drawn from a codebook.

Every slide picks one knowledge-row combination of its subtype as ground
truth. From that code two things are emitted per bag and scale:

* a probability vector, near 1 for present features and near 0 for absent
  ones, with each entry flipped across 0.5 at rate ``flip_noise``;
* ``k`` instance vectors whose first ``C`` dimensions carry ``+signal`` or
  ``-signal`` per feature on top of unit Gaussian noise, so a linear
  read-out of the mean instance recovers the code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dkspace.codebook import SCALES, BinaryCode, Codebook
from dkspace.embednet import Bag
from dkspace.ensemble import BagPrediction, SlideCode

TRAIN_FRACTION = 0.8


@dataclass
class SynthConfig:
    seed: int = 0
    slides_per_subtype: int = 50
    bags_per_slide: int = 5
    instances_per_bag: int = 8
    width: int = 32
    flip_noise: float = 0.0
    prob_jitter: float = 0.3
    signal: float = 2.0
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("slides_per_subtype", "bags_per_slide", "instances_per_bag", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.flip_noise < 0.5:
            raise ValueError(f"flip_noise must lie in [0, 0.5), got {self.flip_noise}")
        if not 0.0 <= self.prob_jitter < 0.5:
            raise ValueError(f"prob_jitter must lie in [0, 0.5), got {self.prob_jitter}")
        for subtype, n in self.counts.items():
            if n < 1:
                raise ValueError(f"count for {subtype} must be >= 1")

    def count_for(self, subtype: str) -> int:
        return self.counts.get(subtype, self.slides_per_subtype)


@dataclass
class SynthSlide:
    slide_id: str
    true_subtype: str
    true_codes: SlideCode
    bags: dict[int, list[Bag]]
    bag_probs: dict[int, list[BagPrediction]]
    split: str = "train"

    def all_bag_probs(self) -> list[BagPrediction]:
        return [p for s in SCALES for p in self.bag_probs[s]]


def slide_id_for(cb: Codebook, subtype: str, index: int) -> str:
    return f"{cb.disease_name}-{subtype}-{index:04d}"


def generate_slide(cb: Codebook, subtype: str, cfg: SynthConfig, index: int) -> SynthSlide:
    if subtype not in cb.subtypes:
        raise ValueError(f"unknown subtype {subtype!r}")
    j = cb.subtypes.index(subtype)
    rng = np.random.default_rng([cfg.seed, j, index])
    slide_id = slide_id_for(cb, subtype, index)

    codes = []
    for s in SCALES:
        rows = cb.rows_for(subtype, s)
        bits = rows[rng.integers(len(rows))].bits if rows else (0,) * cb.schema(s).width
        codes.append(BinaryCode(s, bits))
    truth = SlideCode(slide_id, tuple(codes))

    bags: dict[int, list[Bag]] = {}
    probs: dict[int, list[BagPrediction]] = {}
    for s in SCALES:
        bits = np.array(truth.code(s).bits, dtype=float)
        c = bits.size
        if c > cfg.width:
            raise ValueError(f"instance width {cfg.width} is smaller than the {c} features at scale {s}")
        bags[s], probs[s] = [], []
        for b in range(cfg.bags_per_slide):
            u = rng.uniform(size=c)
            p = np.where(bits == 1, 1.0 - cfg.prob_jitter * u, cfg.prob_jitter * u)
            flip = rng.uniform(size=c) < cfg.flip_noise
            p = np.where(flip, 1.0 - p, p)
            probs[s].append(BagPrediction(slide_id, s, b, tuple(p.tolist())))

            x = rng.standard_normal((cfg.instances_per_bag, cfg.width))
            x[:, :c] += cfg.signal * (2.0 * bits - 1.0)
            bags[s].append(Bag(slide_id, s, x, bits.copy(), bag_id=b))
    return SynthSlide(slide_id, subtype, truth, bags, probs)


def assign_splits(groups: dict[str, list[str]]) -> dict[str, str]:
    """Stratified 80/20 split over slide ids grouped by subtype.

    ``max(1, floor(0.8 * n))`` slides go to training, where ``n`` is the
    dataset size. Slides are ranked by their relative position
    ``(i + 0.5) / n_subtype`` inside their subtype (ties by subtype order)
    and the lowest ranks are taken, so every subtype contributes close to
    its share.
    """
    ranked = []
    for j, ids in enumerate(groups.values()):
        ranked.extend(((i + 0.5) / len(ids), j, sid) for i, sid in enumerate(ids))
    ranked.sort()
    n_train = max(1, math.floor(TRAIN_FRACTION * len(ranked)))
    return {sid: ("train" if r < n_train else "test") for r, (_, _, sid) in enumerate(ranked)}


def generate_dataset(cb: Codebook, cfg: SynthConfig) -> list[SynthSlide]:
    unknown = set(cfg.counts) - set(cb.subtypes)
    if unknown:
        raise ValueError(f"counts given for unknown subtypes {sorted(unknown)}")
    slides = [generate_slide(cb, s, cfg, i) for s in cb.subtypes for i in range(cfg.count_for(s))]
    # which slides are held out is drawn from the seed, not from slide index
    rng = np.random.default_rng([cfg.seed, len(cb.subtypes)])
    groups = {}
    for s in cb.subtypes:
        ids = [sl.slide_id for sl in slides if sl.true_subtype == s]
        groups[s] = [ids[i] for i in rng.permutation(len(ids))]
    splits = assign_splits(groups)
    for sl in slides:
        sl.split = splits[sl.slide_id]
    return slides
