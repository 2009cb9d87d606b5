"""Turning bag-level feature probabilities into one binary code per slide.

Each bag's probabilities are thresholded (strictly, ``p > v``) and a
feature is kept for the slide when strictly more than half of the bags
keep it. With an even bag count an exact half is not a majority.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from dkspace.codebook import SCALES, BinaryCode

DEFAULT_THRESHOLD = 0.5


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class BagPrediction:
    slide_id: str
    scale_index: int
    bag_id: int
    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        for p in probs:
            if math.isnan(p):
                raise EnsembleError(f"{self.slide_id} s={self.scale_index} bag {self.bag_id}: NaN probability")
            if not 0.0 <= p <= 1.0:
                raise EnsembleError(f"{self.slide_id} s={self.scale_index} bag {self.bag_id}: probability {p} outside [0, 1]")
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class SlideCode:
    slide_id: str
    codes: tuple[BinaryCode, BinaryCode, BinaryCode]

    def __post_init__(self):
        codes = tuple(self.codes)
        if tuple(c.scale_index for c in codes) != SCALES:
            raise EnsembleError(f"{self.slide_id}: need one code per scale 1, 2, 3 in order")
        object.__setattr__(self, "codes", codes)

    def code(self, scale_index: int) -> BinaryCode:
        return self.codes[scale_index - 1]

    @classmethod
    def from_bits(cls, slide_id: str, *bits: Sequence[int] | str) -> "SlideCode":
        codes = []
        for s, b in zip(SCALES, bits):
            codes.append(BinaryCode.from_string(s, b) if isinstance(b, str) else BinaryCode(s, tuple(b)))
        return cls(slide_id, tuple(codes))


def check_threshold(v: float) -> float:
    v = float(v)
    if not 0.0 < v < 1.0:
        raise EnsembleError(f"threshold must lie in (0, 1), got {v}")
    return v


def binarize_bag(pred: BagPrediction, v: float = DEFAULT_THRESHOLD) -> BinaryCode:
    v = check_threshold(v)
    return BinaryCode(pred.scale_index, tuple(int(p > v) for p in pred.probs))


def vote_slide(preds: Sequence[BagPrediction], v: float = DEFAULT_THRESHOLD) -> BinaryCode:
    """Majority vote over a slide's bags at one scale."""
    v = check_threshold(v)
    if not preds:
        raise EnsembleError("cannot vote on an empty set of bags")
    first = preds[0]
    for p in preds[1:]:
        if p.slide_id != first.slide_id or p.scale_index != first.scale_index:
            raise EnsembleError(
                f"bags from different slides/scales in one vote: {first.slide_id} s={first.scale_index} "
                f"vs {p.slide_id} s={p.scale_index}"
            )
        if len(p.probs) != len(first.probs):
            raise EnsembleError(f"{first.slide_id} s={first.scale_index}: bags have different feature counts")
    probs = np.array([p.probs for p in preds], dtype=float)
    passes = (probs > v).sum(axis=0)
    # strict majority: 2 * count > B avoids halving an odd B
    bits = (2 * passes > len(preds)).astype(int)
    return BinaryCode(first.scale_index, tuple(bits.tolist()))


def vote_all(
    preds: Sequence[BagPrediction],
    thresholds: Mapping[int, float] | None = None,
) -> dict[str, SlideCode]:
    """Group bag predictions by slide and scale and vote each group.

    Every slide must have bags at all three scales.
    """
    thresholds = {**{s: DEFAULT_THRESHOLD for s in SCALES}, **(thresholds or {})}
    groups: dict[str, dict[int, list[BagPrediction]]] = {}
    for p in preds:
        groups.setdefault(p.slide_id, {}).setdefault(p.scale_index, []).append(p)
    out = {}
    for slide_id in sorted(groups):
        by_scale = groups[slide_id]
        missing = [s for s in SCALES if s not in by_scale]
        if missing:
            raise EnsembleError(f"{slide_id}: no bags at scale(s) {missing}")
        out[slide_id] = SlideCode(slide_id, tuple(vote_slide(by_scale[s], thresholds[s]) for s in SCALES))
    return out
