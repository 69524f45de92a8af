"""Domain types for crystal-like designs and their geometry math.

A design ("material") is an atom-type sequence plus a unit cell: three axis
lengths, three inter-axis angles, and fractional atom positions. Everything
here is an immutable value; operations are pure. Angles are radians
internally; the on-disk record format stores degrees.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_N_SPECIES = 16
DEFAULT_MAX_ATOMS = 20

# Radicand below this is treated as a numerically collinear (degenerate) cell.
DEGENERATE_CELL_EPS = 1e-12


class InvariantError(ValueError):
    """A domain invariant was violated (names the invariant in the message)."""


class RecordParseError(ValueError):
    """Malformed record input; message carries the line number and field."""


@dataclass(frozen=True)
class Vocab:
    """Token table: ids 0..n_species-1 are species, then Start, Stop, Pad."""

    n_species: int = DEFAULT_N_SPECIES

    def __post_init__(self) -> None:
        if self.n_species < 1:
            raise InvariantError(f"n_species must be >= 1, got {self.n_species}")

    @property
    def start_id(self) -> int:
        return self.n_species

    @property
    def stop_id(self) -> int:
        return self.n_species + 1

    @property
    def pad_id(self) -> int:
        return self.n_species + 2

    @property
    def size(self) -> int:
        return self.n_species + 3

    def is_species(self, token: int) -> bool:
        return 0 <= token < self.n_species


@dataclass(frozen=True)
class Geometry:
    """Unit-cell geometry: lengths (a, b, c), angles (alpha, beta, gamma),
    and fractional positions of shape (n_atom, 3).

    Invariants: lengths > 0, angles strictly inside (0, pi), every position
    coordinate in [0, 1). Positions are stored un-wrapped as given; wrapping
    happens only at flow-decode output.
    """

    lengths: tuple[float, float, float]
    angles: tuple[float, float, float]
    positions: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        lengths = tuple(float(v) for v in self.lengths)
        angles = tuple(float(v) for v in self.angles)
        if len(lengths) != 3 or len(angles) != 3:
            raise InvariantError("lengths and angles must each have 3 entries")
        if not all(math.isfinite(v) and v > 0 for v in lengths):
            raise InvariantError(f"lengths must be finite and > 0, got {lengths}")
        if not all(math.isfinite(v) and 0.0 < v < math.pi for v in angles):
            raise InvariantError(
                f"angles must lie strictly inside (0, pi) radians, got {angles}"
            )
        positions = np.array(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise InvariantError(
                f"positions must have shape (n_atom, 3), got {positions.shape}"
            )
        if positions.shape[0] < 1:
            raise InvariantError("positions must contain at least one atom row")
        if not np.all(np.isfinite(positions)):
            raise InvariantError("positions must be finite")
        if np.any(positions < 0.0) or np.any(positions >= 1.0):
            raise InvariantError("every position coordinate must lie in [0, 1)")
        positions.flags.writeable = False
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "positions", positions)

    @property
    def n_atom(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Geometry):
            return NotImplemented
        return (
            self.lengths == other.lengths
            and self.angles == other.angles
            and np.array_equal(self.positions, other.positions)
        )

    def __hash__(self) -> int:
        return hash((self.lengths, self.angles, self.positions.tobytes()))


@dataclass(frozen=True)
class Material:
    """A design: species token sequence plus its unit-cell geometry."""

    species: tuple[int, ...]
    geometry: Geometry
    vocab: Vocab = field(default_factory=Vocab)
    max_atoms: int = DEFAULT_MAX_ATOMS

    def __post_init__(self) -> None:
        species = tuple(int(s) for s in self.species)
        if not 1 <= len(species) <= self.max_atoms:
            raise InvariantError(
                f"atom count must lie in [1, {self.max_atoms}], got {len(species)}"
            )
        bad = [s for s in species if not self.vocab.is_species(s)]
        if bad:
            raise InvariantError(
                f"species must be species ids in [0, {self.vocab.n_species}), got {bad}"
            )
        if len(species) != self.geometry.n_atom:
            raise InvariantError(
                f"species length {len(species)} must equal geometry atom count "
                f"{self.geometry.n_atom}"
            )
        object.__setattr__(self, "species", species)

    @property
    def n_atom(self) -> int:
        return len(self.species)


@dataclass(frozen=True)
class MaterialRecord:
    """A material together with its scalar target-property value."""

    material: Material
    property_value: float

    def __post_init__(self) -> None:
        value = float(self.property_value)
        if not math.isfinite(value):
            raise InvariantError(f"property must be finite, got {value}")
        object.__setattr__(self, "property_value", value)


def volume(g: Geometry) -> float:
    """Unit-cell volume abc * sqrt(1 - cos^2 a - cos^2 b - cos^2 g + 2 cos a cos b cos g)."""
    ca, cb, cg = (math.cos(v) for v in g.angles)
    radicand = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
    if radicand <= DEGENERATE_CELL_EPS:
        raise InvariantError(
            f"degenerate cell: angular radicand {radicand:.3e} <= {DEGENERATE_CELL_EPS}"
        )
    a, b, c = g.lengths
    return a * b * c * math.sqrt(radicand)


def density(m: Material) -> float:
    """Average atom density n_atom / volume."""
    return m.n_atom / volume(m.geometry)


def canonicalize_lengths(
    lengths: Sequence[float], n_atom: int
) -> tuple[float, float, float]:
    """Lengths divided by the cube root of the atom count.

    The canonical cell has volume proportional to 1/n_atom times the raw
    volume, which makes the atom density of length-prior samples invariant
    to the atom count.
    """
    if n_atom < 1:
        raise InvariantError(f"n_atom must be >= 1, got {n_atom}")
    scale = float(n_atom) ** (1.0 / 3.0)
    out = tuple(float(v) / scale for v in lengths)
    if any(v <= 0 for v in out):
        raise InvariantError(f"lengths must be > 0, got {tuple(lengths)}")
    return out  # type: ignore[return-value]


def decanonicalize_lengths(
    lengths: Sequence[float], n_atom: int
) -> tuple[float, float, float]:
    """Inverse of :func:`canonicalize_lengths`."""
    if n_atom < 1:
        raise InvariantError(f"n_atom must be >= 1, got {n_atom}")
    scale = float(n_atom) ** (1.0 / 3.0)
    return tuple(float(v) * scale for v in lengths)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# JSON Lines dataset format. One record per line:
#   {"lengths": [a, b, c], "angles_deg": [alpha, beta, gamma],
#    "species": [...], "frac_coords": [[x, y, z], ...], "property": y}

_RECORD_FIELDS = ("lengths", "angles_deg", "species", "frac_coords", "property")


def _record_to_json(record: MaterialRecord) -> str:
    g = record.material.geometry
    payload = {
        "lengths": list(g.lengths),
        "angles_deg": [math.degrees(v) for v in g.angles],
        "species": list(record.material.species),
        "frac_coords": g.positions.tolist(),
        "property": record.property_value,
    }
    return json.dumps(payload, separators=(",", ":"))


def _parse_record(
    obj: dict, line_no: int, vocab: Vocab, max_atoms: int
) -> MaterialRecord:
    for name in _RECORD_FIELDS:
        if name not in obj:
            raise RecordParseError(f"line {line_no}: missing field '{name}'")
    unknown = set(obj) - set(_RECORD_FIELDS)
    if unknown:
        raise RecordParseError(
            f"line {line_no}: unknown field(s) {sorted(unknown)}"
        )

    def _floats(name: str, n: int) -> list[float]:
        raw = obj[name]
        if not isinstance(raw, list) or len(raw) != n:
            raise RecordParseError(
                f"line {line_no}: field '{name}' must be a list of {n} numbers"
            )
        try:
            return [float(v) for v in raw]
        except (TypeError, ValueError) as exc:
            raise RecordParseError(
                f"line {line_no}: field '{name}' contains a non-numeric entry"
            ) from exc

    lengths = _floats("lengths", 3)
    angles = [math.radians(v) for v in _floats("angles_deg", 3)]
    species_raw = obj["species"]
    if not isinstance(species_raw, list) or not species_raw:
        raise RecordParseError(
            f"line {line_no}: field 'species' must be a non-empty list"
        )
    coords_raw = obj["frac_coords"]
    if not isinstance(coords_raw, list) or len(coords_raw) != len(species_raw):
        raise RecordParseError(
            f"line {line_no}: field 'frac_coords' must have one row per species"
        )
    try:
        coords = np.array(coords_raw, dtype=np.float64)
    except ValueError as exc:
        raise RecordParseError(
            f"line {line_no}: field 'frac_coords' is not a numeric matrix"
        ) from exc
    try:
        prop = float(obj["property"])
    except (TypeError, ValueError) as exc:
        raise RecordParseError(
            f"line {line_no}: field 'property' must be a number"
        ) from exc

    try:
        geometry = Geometry(tuple(lengths), tuple(angles), coords)
        material = Material(
            tuple(int(s) for s in species_raw),
            geometry,
            vocab=vocab,
            max_atoms=max_atoms,
        )
        return MaterialRecord(material, prop)
    except InvariantError as exc:
        raise InvariantError(f"line {line_no}: {exc}") from exc


def read_records(
    path: str | Path,
    vocab: Vocab | None = None,
    max_atoms: int = DEFAULT_MAX_ATOMS,
) -> list[MaterialRecord]:
    """Read a JSONL dataset, validating every invariant at ingestion."""
    vocab = vocab or Vocab()
    records: list[MaterialRecord] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordParseError(f"line {line_no}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise RecordParseError(f"line {line_no}: record must be a JSON object")
            records.append(_parse_record(obj, line_no, vocab, max_atoms))
    return records


def write_records(path: str | Path, records: Iterable[MaterialRecord]) -> None:
    """Write records as JSONL (UTF-8, LF line endings), preserving order."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(_record_to_json(record))
            handle.write("\n")
