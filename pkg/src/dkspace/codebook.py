"""Expert-knowledge codebooks.

A codebook names the histological features observed at each of three
magnification scales and lists, per subtype, the binary feature
combinations experts associate with that subtype. Each combination row
becomes one axis value of a knowledge point in a 3D integer space.

File format (one directive per line, ``#`` starts a comment)::

    disease RCC
    bit-order msb-first
    subtypes KIRC KIRP KICH
    features 1 Ne Ac Pa Tu WT Tr
    row KIRC 1 110000
    shortcut 1 Ep BD
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

SCALES = (1, 2, 3)
MAX_FEATURES = 32
BIT_ORDERS = ("msb-first", "lsb-first")


class CodebookError(ValueError):
    pass


class CodebookSyntaxError(CodebookError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CodebookSchemaError(CodebookError):
    pass


@dataclass(frozen=True)
class ScaleSchema:
    scale_index: int
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if self.scale_index not in SCALES:
            raise CodebookSchemaError(f"scale {self.scale_index} is not one of {SCALES}")
        if not self.feature_names:
            raise CodebookSchemaError(f"scale {self.scale_index} has no features")
        if len(self.feature_names) > MAX_FEATURES:
            raise CodebookSchemaError(
                f"scale {self.scale_index} has {len(self.feature_names)} features (max {MAX_FEATURES})"
            )
        seen = set()
        for name in self.feature_names:
            if name in seen:
                raise CodebookSchemaError(f"duplicate feature name {name!r} at scale {self.scale_index}")
            seen.add(name)

    @property
    def width(self) -> int:
        return len(self.feature_names)


def _check_bits(bits: Sequence[int], what: str) -> tuple[int, ...]:
    out = tuple(int(b) for b in bits)
    if any(b not in (0, 1) for b in out):
        raise CodebookSchemaError(f"{what}: bits must be 0 or 1, got {bits!r}")
    return out


@dataclass(frozen=True)
class BinaryCode:
    scale_index: int
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", _check_bits(self.bits, f"code at scale {self.scale_index}"))

    @classmethod
    def from_string(cls, scale_index: int, text: str) -> "BinaryCode":
        return cls(scale_index, tuple(int(c) for c in text))

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)


@dataclass(frozen=True)
class KnowledgeRow:
    subtype: str
    scale_index: int
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", _check_bits(self.bits, self.describe()))

    def describe(self) -> str:
        return f"row {self.subtype} s={self.scale_index} {''.join(map(str, self.bits))}"


@dataclass(frozen=True)
class ShortcutRule:
    scale_index: int
    feature_name: str
    subtype: str

    def __str__(self) -> str:
        return f"{self.feature_name}@s={self.scale_index} -> {self.subtype}"


@dataclass(frozen=True)
class KnowledgePoint:
    subtype: str
    coord: tuple[int, int, int]


def encode_code(code: BinaryCode | Sequence[int], bit_order: str = "msb-first") -> int:
    """Read a bit vector as an unsigned integer.

    With ``msb-first`` (the default) the first feature is the most
    significant bit, so ``110000`` encodes to 48.
    """
    bits = code.bits if isinstance(code, BinaryCode) else code
    if bit_order == "lsb-first":
        bits = tuple(reversed(bits))
    elif bit_order != "msb-first":
        raise CodebookError(f"unknown bit order {bit_order!r}")
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


@dataclass(frozen=True)
class Codebook:
    disease_name: str
    subtypes: tuple[str, ...]
    schemas: tuple[ScaleSchema, ScaleSchema, ScaleSchema]
    rows: tuple[KnowledgeRow, ...]
    shortcut_rules: tuple[ShortcutRule, ...] = ()
    bit_order: str = "msb-first"

    def __post_init__(self):
        object.__setattr__(self, "subtypes", tuple(self.subtypes))
        object.__setattr__(self, "schemas", tuple(self.schemas))
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "shortcut_rules", tuple(self.shortcut_rules))
        self._validate()

    def _validate(self) -> None:
        if self.bit_order not in BIT_ORDERS:
            raise CodebookSchemaError(f"unknown bit order {self.bit_order!r}")
        if len(self.subtypes) < 2:
            raise CodebookSchemaError("a codebook needs at least two subtypes")
        if len(set(self.subtypes)) != len(self.subtypes):
            raise CodebookSchemaError(f"duplicate subtype in {list(self.subtypes)}")
        if tuple(s.scale_index for s in self.schemas) != SCALES:
            raise CodebookSchemaError("schemas must cover scales 1, 2, 3 in order")
        for row in self.rows:
            if row.subtype not in self.subtypes:
                raise CodebookSchemaError(f"{row.describe()}: unknown subtype {row.subtype!r}")
            if row.scale_index not in SCALES:
                raise CodebookSchemaError(f"{row.describe()}: unknown scale {row.scale_index}")
            width = self.schema(row.scale_index).width
            if len(row.bits) != width:
                raise CodebookSchemaError(
                    f"{row.describe()}: has {len(row.bits)} bits, scale {row.scale_index} has {width} features"
                )
        for rule in self.shortcut_rules:
            if rule.scale_index not in SCALES:
                raise CodebookSchemaError(f"shortcut {rule}: unknown scale")
            if rule.feature_name not in self.schema(rule.scale_index).feature_names:
                raise CodebookSchemaError(f"shortcut {rule}: unknown feature {rule.feature_name!r}")
            if rule.subtype not in self.subtypes:
                raise CodebookSchemaError(f"shortcut {rule}: unknown subtype {rule.subtype!r}")
        owner: dict[tuple[int, int, int], str] = {}
        for subtype in self.subtypes:
            for point in expand_knowledge_points(self, subtype):
                other = owner.get(point.coord)
                if other is not None:
                    kind = "within" if other == subtype else f"between {other} and"
                    raise CodebookSchemaError(f"knowledge point {point.coord} collides {kind} {subtype}")
                owner[point.coord] = subtype

    def schema(self, scale_index: int) -> ScaleSchema:
        return self.schemas[scale_index - 1]

    def rows_for(self, subtype: str, scale_index: int) -> list[KnowledgeRow]:
        return [r for r in self.rows if r.subtype == subtype and r.scale_index == scale_index]

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(s.width for s in self.schemas)

    def feature_names(self, code: BinaryCode) -> list[str]:
        names = self.schema(code.scale_index).feature_names
        return [n for n, b in zip(names, code.bits) if b]

    @cached_property
    def knowledge_points(self) -> dict[str, list[KnowledgePoint]]:
        return {s: expand_knowledge_points(self, s) for s in self.subtypes}


def expand_knowledge_points(cb: Codebook, subtype: str) -> list[KnowledgePoint]:
    """All knowledge points of one subtype.

    One point per combination of the subtype's rows across the three
    scales (scale 1 varies slowest). A scale with no rows for the subtype
    contributes a single all-zero row.
    """
    if subtype not in cb.subtypes:
        raise CodebookError(f"unknown subtype {subtype!r}")
    per_scale = []
    for s in SCALES:
        values = [encode_code(r.bits, cb.bit_order) for r in cb.rows_for(subtype, s)]
        per_scale.append(values or [0])
    return [KnowledgePoint(subtype, coord) for coord in itertools.product(*per_scale)]


def _tokens(line: str) -> list[tuple[str, int]]:
    out = []
    i = 0
    while i < len(line):
        if line[i].isspace():
            i += 1
            continue
        j = i
        while j < len(line) and not line[j].isspace():
            j += 1
        out.append((line[i:j], i + 1))
        i = j
    return out


def _int_token(tok: tuple[str, int], lineno: int, what: str) -> int:
    text, col = tok
    try:
        return int(text)
    except ValueError:
        raise CodebookSyntaxError(f"expected {what}, got {text!r}", lineno, col) from None


def parse_codebook(text: str) -> Codebook:
    disease = None
    bit_order = None
    subtypes = None
    features: dict[int, tuple[str, ...]] = {}
    rows: list[KnowledgeRow] = []
    rules: list[ShortcutRule] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = _tokens(line)
        if not toks:
            continue
        key, kcol = toks[0]
        args = toks[1:]

        def need(n: int, usage: str) -> None:
            if len(args) != n:
                col = args[n][1] if len(args) > n else len(raw.rstrip()) + 1
                raise CodebookSyntaxError(f"expected '{usage}'", lineno, col)

        if key == "disease":
            need(1, "disease NAME")
            disease = args[0][0]
        elif key == "bit-order":
            need(1, "bit-order msb-first|lsb-first")
            if args[0][0] not in BIT_ORDERS:
                raise CodebookSyntaxError(f"unknown bit order {args[0][0]!r}", lineno, args[0][1])
            bit_order = args[0][0]
        elif key == "subtypes":
            if len(args) < 1:
                raise CodebookSyntaxError("expected 'subtypes NAME...'", lineno, len(raw.rstrip()) + 1)
            subtypes = tuple(t for t, _ in args)
        elif key == "features":
            if len(args) < 2:
                raise CodebookSyntaxError("expected 'features SCALE NAME...'", lineno, len(raw.rstrip()) + 1)
            scale = _int_token(args[0], lineno, "scale index")
            if scale in features:
                raise CodebookSyntaxError(f"features for scale {scale} given twice", lineno, args[0][1])
            features[scale] = tuple(t for t, _ in args[1:])
        elif key == "row":
            need(3, "row SUBTYPE SCALE BITS")
            scale = _int_token(args[1], lineno, "scale index")
            bits_text, bcol = args[2]
            for k, ch in enumerate(bits_text):
                if ch not in "01":
                    raise CodebookSyntaxError(f"bit string may only contain 0 and 1, got {ch!r}", lineno, bcol + k)
            try:
                rows.append(KnowledgeRow(args[0][0], scale, tuple(int(c) for c in bits_text)))
            except CodebookSchemaError as exc:
                raise CodebookSchemaError(f"line {lineno}: {exc}") from None
        elif key == "shortcut":
            need(3, "shortcut SCALE FEATURE SUBTYPE")
            rules.append(ShortcutRule(_int_token(args[0], lineno, "scale index"), args[1][0], args[2][0]))
        else:
            raise CodebookSyntaxError(f"unknown directive {key!r}", lineno, kcol)

    for name, value in (("disease", disease), ("bit-order", bit_order), ("subtypes", subtypes)):
        if value is None:
            raise CodebookSyntaxError(f"missing '{name}' directive", 0, 0)
    missing = [s for s in SCALES if s not in features]
    if missing or set(features) - set(SCALES):
        raise CodebookSchemaError(f"features must be given for exactly scales 1, 2, 3 (missing {missing})")

    schemas = tuple(ScaleSchema(s, features[s]) for s in SCALES)
    return Codebook(disease, subtypes, schemas, tuple(rows), tuple(rules), bit_order)


def serialize_codebook(cb: Codebook) -> str:
    lines = [
        f"disease {cb.disease_name}",
        f"bit-order {cb.bit_order}",
        "subtypes " + " ".join(cb.subtypes),
        "",
    ]
    lines += [f"features {s.scale_index} " + " ".join(s.feature_names) for s in cb.schemas]
    lines.append("")
    lines += [f"row {r.subtype} {r.scale_index} {''.join(map(str, r.bits))}" for r in cb.rows]
    if cb.shortcut_rules:
        lines.append("")
        lines += [f"shortcut {r.scale_index} {r.feature_name} {r.subtype}" for r in cb.shortcut_rules]
    return "\n".join(lines) + "\n"


def load_codebook(path: str | Path) -> Codebook:
    """Load a codebook file, or one of the shipped ones by name (``rcc``, ``sc``)."""
    path = Path(path)
    if not path.is_file() and str(path) in shipped_codebooks():
        return load_shipped(str(path))
    return parse_codebook(path.read_text())


def shipped_codebooks() -> list[str]:
    return sorted(p.name.removesuffix(".codebook") for p in resources.files("dkspace.data").iterdir()
                  if p.name.endswith(".codebook"))


def load_shipped(name: str) -> Codebook:
    return parse_codebook(resources.files("dkspace.data").joinpath(f"{name}.codebook").read_text())


def row_counts(cb: Codebook) -> dict[int, int]:
    return {s: sum(1 for r in cb.rows if r.scale_index == s) for s in SCALES}


def iter_points(cb: Codebook) -> Iterable[KnowledgePoint]:
    for s in cb.subtypes:
        yield from cb.knowledge_points[s]
