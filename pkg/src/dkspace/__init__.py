"""Subtype diagnosis by voting bag-level feature predictions into a
three-scale binary code and matching it against expert knowledge points."""

from dkspace.codebook import (
    BinaryCode,
    Codebook,
    KnowledgePoint,
    encode_code,
    expand_knowledge_points,
    load_codebook,
    load_shipped,
    parse_codebook,
    serialize_codebook,
)

__version__ = "0.1.0"
