"""Nearest-knowledge-point classification in the three-scale code space.

A slide's voted codes are read as integers (one per scale) and the
resulting point is compared with every knowledge point. Each subtype
scores its closest point; the subtype with the smallest score wins, the
first subtype in codebook order taking exact ties. Comparisons run on
exact integer squared distances; square roots appear only in reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from dkspace.codebook import SCALES, Codebook, encode_code
from dkspace.ensemble import SlideCode


class ClassificationError(ValueError):
    pass


@dataclass(frozen=True)
class Diagnosis:
    slide_id: str
    predicted: str
    per_subtype_min_distance: dict[str, float]
    projected_coord: tuple[int, int, int]
    per_scale_features: dict[int, list[str]]
    via_shortcut: bool = False
    tie: bool = False
    shortcut_rule: str | None = None
    codes: dict[int, str] = field(default_factory=dict)

    @property
    def min_distance(self) -> float:
        return min(self.per_subtype_min_distance.values())

    def to_record(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "predicted": self.predicted,
            "via_shortcut": self.via_shortcut,
            "shortcut_rule": self.shortcut_rule,
            "tie": self.tie,
            "projected_coord": list(self.projected_coord),
            "min_distance": self.min_distance,
            "per_subtype_min_distance": dict(self.per_subtype_min_distance),
            "codes": {str(s): c for s, c in self.codes.items()},
            "per_scale_features": {str(s): list(f) for s, f in self.per_scale_features.items()},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Diagnosis":
        return cls(
            slide_id=rec["slide_id"],
            predicted=rec["predicted"],
            per_subtype_min_distance={k: float(v) for k, v in rec["per_subtype_min_distance"].items()},
            projected_coord=tuple(int(c) for c in rec["projected_coord"]),
            per_scale_features={int(s): list(f) for s, f in rec["per_scale_features"].items()},
            via_shortcut=bool(rec["via_shortcut"]),
            tie=bool(rec["tie"]),
            shortcut_rule=rec.get("shortcut_rule"),
            codes={int(s): c for s, c in rec.get("codes", {}).items()},
        )


class _Space:
    """Knowledge points of one codebook packed for vectorised lookups."""

    def __init__(self, cb: Codebook):
        coords, owners = [], []
        for j, subtype in enumerate(cb.subtypes):
            pts = cb.knowledge_points[subtype]
            coords.extend(p.coord for p in pts)
            owners.extend([j] * len(pts))
        if not coords:
            raise ClassificationError("codebook has no knowledge points")
        self.coords = np.array(coords, dtype=np.int64)
        owners = np.array(owners)
        # points are grouped by subtype, so reduceat offsets are group starts
        self.starts = np.flatnonzero(np.r_[True, owners[1:] != owners[:-1]])
        self.shortcuts = [
            (r.scale_index, cb.schema(r.scale_index).feature_names.index(r.feature_name), r)
            for r in cb.shortcut_rules
        ]

    def min_sq(self, coords: np.ndarray) -> np.ndarray:
        """(n, 3) int coords -> (n, n_subtypes) minimum squared distances."""
        diff = coords[:, None, :] - self.coords[None, :, :]
        sq = np.einsum("npk,npk->np", diff, diff)
        return np.minimum.reduceat(sq, self.starts, axis=1)


@lru_cache(maxsize=16)
def _space(cb: Codebook) -> _Space:
    return _Space(cb)


def _check_lengths(code: SlideCode, cb: Codebook) -> None:
    for s in SCALES:
        n, w = len(code.code(s).bits), cb.schema(s).width
        if n != w:
            raise ClassificationError(f"{code.slide_id}: scale {s} code has {n} bits, codebook expects {w}")


def project_slide(code: SlideCode, cb: Codebook) -> tuple[int, int, int]:
    _check_lengths(code, cb)
    return tuple(encode_code(code.code(s), cb.bit_order) for s in SCALES)


def distance(a: Sequence[int], b: Sequence[int]) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b, strict=True)))


def _decide(code: SlideCode, cb: Codebook, coord, min_sq_row, shortcuts) -> Diagnosis:
    fired = None
    for s, idx, rule in shortcuts:
        if code.code(s).bits[idx]:
            fired = rule
            break
    min_sq_row = [int(v) for v in min_sq_row]
    best = min(min_sq_row)
    if fired is not None:
        predicted, tie = fired.subtype, False
    else:
        predicted = cb.subtypes[min_sq_row.index(best)]
        tie = min_sq_row.count(best) >= 2
    return Diagnosis(
        slide_id=code.slide_id,
        predicted=predicted,
        per_subtype_min_distance={s: math.sqrt(d) for s, d in zip(cb.subtypes, min_sq_row)},
        projected_coord=tuple(int(c) for c in coord),
        per_scale_features={s: cb.feature_names(code.code(s)) for s in SCALES},
        via_shortcut=fired is not None,
        tie=tie,
        shortcut_rule=str(fired) if fired is not None else None,
        codes={s: str(code.code(s)) for s in SCALES},
    )


def classify(code: SlideCode, cb: Codebook) -> Diagnosis:
    """Diagnose one slide from its three voted codes.

    Shortcut rules are checked first: if a rule's feature is present at
    its scale the rule's subtype is returned and ``via_shortcut`` is set,
    though distances are still filled in for the report.
    """
    space = _space(cb)
    coord = project_slide(code, cb)
    min_sq = space.min_sq(np.array([coord], dtype=np.int64))[0]
    return _decide(code, cb, coord, min_sq, space.shortcuts)


def classify_batch(codes: Sequence[SlideCode], cb: Codebook, chunk: int = 4096) -> list[Diagnosis]:
    """Element-wise :func:`classify`, with distances computed in chunks."""
    space = _space(cb)
    out: list[Diagnosis] = []
    for start in range(0, len(codes), chunk):
        part = codes[start:start + chunk]
        coords = []
        for c in part:
            try:
                coords.append(project_slide(c, cb))
            except ClassificationError as exc:
                raise ClassificationError(f"slide {c.slide_id}: {exc}") from None
        min_sq = space.min_sq(np.array(coords, dtype=np.int64))
        out.extend(_decide(c, cb, xyz, row, space.shortcuts) for c, xyz, row in zip(part, coords, min_sq))
    return out
