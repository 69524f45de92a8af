"""Latent-space optimization of crystal-like designs.

Variable-size designs (atom-type sequences plus unit-cell geometry) are
encoded into fixed-dimensional latent vectors with an overlapping-clique
structure, optimized against a learned property surrogate with rank-based
antithetic evolution strategies, and decoded back into designs via beam
search over atom types and guided flow-matching over geometry.
"""

from crystalopt.core import (
    Geometry,
    InvariantError,
    Material,
    MaterialRecord,
    RecordParseError,
    Vocab,
    canonicalize_lengths,
    decanonicalize_lengths,
    density,
    read_records,
    volume,
    write_records,
)
from crystalopt.cliques import CliqueShape, chain, clique_kl, flatten

__all__ = [
    "CliqueShape",
    "Geometry",
    "InvariantError",
    "Material",
    "MaterialRecord",
    "RecordParseError",
    "Vocab",
    "canonicalize_lengths",
    "chain",
    "clique_kl",
    "decanonicalize_lengths",
    "density",
    "flatten",
    "read_records",
    "volume",
    "write_records",
]

__version__ = "0.1.0"
