"""Discrete search space of generator cells and action-vector decoding.

A cell gene picks a convolution block style, a normalization, an upsampling
operation, a shortcut flag, and one skip bit per preceding cell. A genotype
is an ordered tuple of cell genes. The continuous agent emits a fixed-size
action vector that is decoded per cell by taking the argmax of each
categorical partition and the sign of each skip component.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

CONV_CHOICES = ("pre", "post")
NORM_CHOICES = ("batch", "instance", "none")
UP_CHOICES = ("bilinear", "nearest", "deconv")

# Action vector partition layout. Skip components start at SKIP_OFFSET,
# one per preceding cell; components past the current cell's skip count
# are ignored at decode time.
CONV_SLICE = slice(0, 2)
NORM_SLICE = slice(2, 5)
UP_SLICE = slice(5, 8)
SHORTCUT_SLICE = slice(8, 10)
SKIP_OFFSET = 10

DEFAULT_MAX_CELLS = 3


class GenotypeError(ValueError):
    """Invalid genotype content (violated invariant)."""


class GenotypeParseError(GenotypeError):
    """Malformed genotype text; the message names the offending field."""


def action_dim(max_cells: int = DEFAULT_MAX_CELLS) -> int:
    """Constant action dimension for a run: 10 + one skip slot per extra cell."""
    if max_cells < 1:
        raise ValueError(f"max_cells must be >= 1, got {max_cells}")
    return SKIP_OFFSET + (max_cells - 1)


@dataclass(frozen=True)
class CellGene:
    """One searchable generator block.

    `skips[j]` is 1 iff this cell takes a skip connection from cell j;
    the tuple length must equal the cell's index in the genotype.
    """

    conv: str
    norm: str
    up: str
    shortcut: bool
    skips: tuple[int, ...] = ()

    def __post_init__(self):
        if self.conv not in CONV_CHOICES:
            raise GenotypeError(f"conv must be one of {CONV_CHOICES}, got {self.conv!r}")
        if self.norm not in NORM_CHOICES:
            raise GenotypeError(f"norm must be one of {NORM_CHOICES}, got {self.norm!r}")
        if self.up not in UP_CHOICES:
            raise GenotypeError(f"up must be one of {UP_CHOICES}, got {self.up!r}")
        if not isinstance(self.shortcut, bool):
            raise GenotypeError(f"shortcut must be a bool, got {self.shortcut!r}")
        if any(b not in (0, 1) for b in self.skips):
            raise GenotypeError(f"skips must contain only 0/1 bits, got {self.skips!r}")
        object.__setattr__(self, "skips", tuple(int(b) for b in self.skips))


@dataclass(frozen=True)
class Genotype:
    """Ordered cell genes; cell i must carry exactly i skip bits."""

    cells: tuple[CellGene, ...]
    max_cells: int = DEFAULT_MAX_CELLS

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if self.max_cells < 1:
            raise GenotypeError(f"max_cells must be >= 1, got {self.max_cells}")
        if len(self.cells) > self.max_cells:
            raise GenotypeError(
                f"genotype has {len(self.cells)} cells, max_cells is {self.max_cells}"
            )
        for i, cell in enumerate(self.cells):
            if len(cell.skips) != i:
                raise GenotypeError(
                    f"cell {i}: skips length {len(cell.skips)} != cell index {i}"
                )

    def __len__(self) -> int:
        return len(self.cells)

    def extended(self, gene: CellGene) -> "Genotype":
        return Genotype(self.cells + (gene,), self.max_cells)


def decode_action(a: np.ndarray, cell_index: int, max_cells: int = DEFAULT_MAX_CELLS) -> CellGene:
    """Decode one action vector into the gene for cell `cell_index`.

    Categorical fields take the argmax of their partition (ties go to the
    lowest index); skip bit j is set iff a[SKIP_OFFSET + j] > 0. Components
    at or beyond SKIP_OFFSET + cell_index are ignored.
    """
    if not 0 <= cell_index < max_cells:
        raise ValueError(f"cell_index {cell_index} out of range [0, {max_cells})")
    a = np.asarray(a, dtype=np.float64)
    dim = action_dim(max_cells)
    if a.shape != (dim,):
        raise ValueError(f"action vector must have shape ({dim},), got {a.shape}")
    conv = CONV_CHOICES[int(np.argmax(a[CONV_SLICE]))]
    norm = NORM_CHOICES[int(np.argmax(a[NORM_SLICE]))]
    up = UP_CHOICES[int(np.argmax(a[UP_SLICE]))]
    shortcut = int(np.argmax(a[SHORTCUT_SLICE])) == 0  # slot 8 means "use shortcut"
    skips = tuple(1 if a[SKIP_OFFSET + j] > 0.0 else 0 for j in range(cell_index))
    return CellGene(conv, norm, up, shortcut, skips)


def encode_center(gene: CellGene, max_cells: int = DEFAULT_MAX_CELLS) -> np.ndarray:
    """Inverse of decode_action for testing: +0.9 at chosen slots, -0.9 elsewhere."""
    a = np.full(action_dim(max_cells), -0.9)
    a[CONV_SLICE.start + CONV_CHOICES.index(gene.conv)] = 0.9
    a[NORM_SLICE.start + NORM_CHOICES.index(gene.norm)] = 0.9
    a[UP_SLICE.start + UP_CHOICES.index(gene.up)] = 0.9
    a[SHORTCUT_SLICE.start + (0 if gene.shortcut else 1)] = 0.9
    for j, bit in enumerate(gene.skips):
        a[SKIP_OFFSET + j] = 0.9 if bit else -0.9
    return a


def cell_gene_count(cell_index: int) -> int:
    """Number of distinct genes at a cell index: 2*3*3*2 * 2^index."""
    return 36 << cell_index


def gene_index(gene: CellGene) -> int:
    """Mixed-radix index of a gene within its cell's gene space."""
    k = CONV_CHOICES.index(gene.conv)
    k = k * 3 + NORM_CHOICES.index(gene.norm)
    k = k * 3 + UP_CHOICES.index(gene.up)
    k = k * 2 + int(gene.shortcut)
    for bit in gene.skips:  # skips[0] is the most significant bit
        k = k * 2 + bit
    return k


def gene_from_index(k: int, cell_index: int) -> CellGene:
    if not 0 <= k < cell_gene_count(cell_index):
        raise ValueError(f"gene index {k} out of range for cell {cell_index}")
    bits = []
    for _ in range(cell_index):
        bits.append(k & 1)
        k >>= 1
    skips = tuple(reversed(bits))
    k, shortcut = divmod(k, 2)
    k, up = divmod(k, 3)
    k, norm = divmod(k, 3)
    conv = k
    return CellGene(
        CONV_CHOICES[conv], NORM_CHOICES[norm], UP_CHOICES[up], bool(shortcut), skips
    )


def conv_index_of_gene(k: int, cell_index: int) -> int:
    """Convolution-choice digit of a per-cell gene index (most significant)."""
    return k // (18 << cell_index)


def space_size(num_cells: int) -> int:
    size = 1
    for i in range(num_cells):
        size *= cell_gene_count(i)
    return size


def genotype_index(g: Genotype) -> int:
    """Bijective mixed-radix index over the full genotype space (cell 0 most significant)."""
    idx = 0
    for i, cell in enumerate(g.cells):
        idx = idx * cell_gene_count(i) + gene_index(cell)
    return idx


def genotype_from_index(idx: int, num_cells: int, max_cells: int = DEFAULT_MAX_CELLS) -> Genotype:
    if not 0 <= idx < space_size(num_cells):
        raise ValueError(f"genotype index {idx} out of range for {num_cells} cells")
    digits = []
    for i in reversed(range(num_cells)):
        idx, k = divmod(idx, cell_gene_count(i))
        digits.append(k)
    cells = tuple(gene_from_index(k, i) for i, k in enumerate(reversed(digits)))
    return Genotype(cells, max_cells)


def serialize(g: Genotype) -> str:
    """Human-readable text form, one line per cell."""
    lines = []
    for i, cell in enumerate(g.cells):
        bits = "".join(str(b) for b in cell.skips)
        lines.append(
            f"cell {i}: conv={cell.conv} norm={cell.norm} up={cell.up} "
            f"shortcut={int(cell.shortcut)} skips={bits}"
        )
    return "\n".join(lines)


def _parse_field(fields: dict[str, str], name: str, line_no: int) -> str:
    if name not in fields:
        raise GenotypeParseError(f"cell {line_no}: missing field '{name}'")
    return fields[name]


def deserialize(text: str, max_cells: int = DEFAULT_MAX_CELLS) -> Genotype:
    """Parse the text form; raises GenotypeParseError naming the bad field."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GenotypeParseError("empty genotype text")
    cells = []
    for i, line in enumerate(lines):
        head, sep, rest = line.partition(":")
        if not sep or head.strip() != f"cell {i}":
            raise GenotypeParseError(f"line {i}: expected 'cell {i}:' header, got {line!r}")
        fields = {}
        for token in rest.split():
            key, eq, value = token.partition("=")
            if not eq:
                raise GenotypeParseError(f"cell {i}: malformed token {token!r}")
            fields[key] = value
        conv = _parse_field(fields, "conv", i)
        norm = _parse_field(fields, "norm", i)
        up = _parse_field(fields, "up", i)
        shortcut = _parse_field(fields, "shortcut", i)
        bits = fields.get("skips", "")
        if shortcut not in ("0", "1"):
            raise GenotypeParseError(f"cell {i}: shortcut must be 0 or 1, got {shortcut!r}")
        if any(c not in "01" for c in bits):
            raise GenotypeParseError(f"cell {i}: skips must be a 0/1 bitstring, got {bits!r}")
        try:
            cells.append(CellGene(conv, norm, up, shortcut == "1", tuple(int(c) for c in bits)))
        except GenotypeError as exc:
            raise GenotypeParseError(f"cell {i}: {exc}") from exc
    return Genotype(tuple(cells), max_cells)


def to_wire(g: Genotype) -> list[dict]:
    """Genotype as the wire-protocol JSON cell list."""
    return [
        {
            "conv": c.conv,
            "norm": c.norm,
            "up": c.up,
            "shortcut": int(c.shortcut),
            "skips": list(c.skips),
        }
        for c in g.cells
    ]


def from_wire(cells: list[dict], max_cells: int = DEFAULT_MAX_CELLS) -> Genotype:
    genes = []
    for i, obj in enumerate(cells):
        try:
            genes.append(
                CellGene(
                    str(obj["conv"]),
                    str(obj["norm"]),
                    str(obj["up"]),
                    bool(obj["shortcut"]),
                    tuple(int(b) for b in obj.get("skips", ())),
                )
            )
        except KeyError as exc:
            raise GenotypeParseError(f"cell {i}: missing field {exc.args[0]!r}") from exc
    return Genotype(tuple(genes), max_cells)


def checksum(g: Genotype) -> str:
    """Stable 16-hex-digit digest of the canonical text form."""
    return hashlib.sha256(serialize(g).encode()).hexdigest()[:16]
