"""Maps, fragments and storages.

A *map* is a 2D array of activations.  A :class:`Fragment` is a stack of
equally sized maps, held as one ``(n_maps, rows, cols)`` array, together with
the offset lineage it picked up while passing through fragment pooling
layers.  A :class:`Storage` is the ordered tuple of fragments that flows
between layers; a storage built from one image holds a single fragment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import DataError, InvalidInputError, ShapeError

# one (row_offset, col_offset, pool_factor) entry per pooling layer traversed
LineageEntry = tuple[int, int, int]
Lineage = tuple[LineageEntry, ...]


def _check_lineage(lineage: Lineage) -> Lineage:
    lineage = tuple((int(r), int(c), int(k)) for r, c, k in lineage)
    for r, c, k in lineage:
        if k < 1 or not (0 <= r < k and 0 <= c < k):
            raise InvalidInputError(f"invalid lineage entry {(r, c, k)}")
    return lineage


@dataclass(frozen=True, eq=False)
class Fragment:
    maps: np.ndarray
    lineage: Lineage = ()

    def __post_init__(self):
        maps = np.asarray(self.maps)
        # zero rows or cols are allowed: a pooling offset may leave no whole block
        if maps.ndim != 3 or maps.shape[0] < 1:
            raise ShapeError(f"fragment maps must be an (n, rows, cols) stack with n >= 1, got {maps.shape}")
        if maps.flags.writeable:
            maps = maps.view()
            maps.flags.writeable = False
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "lineage", _check_lineage(self.lineage))

    @property
    def n_maps(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True, eq=False)
class Storage:
    fragments: tuple[Fragment, ...]

    def __post_init__(self):
        frags = tuple(self.fragments)
        if not frags:
            raise ShapeError("a storage needs at least one fragment")
        n_maps = frags[0].n_maps
        depth = len(frags[0].lineage)
        for i, f in enumerate(frags):
            if f.n_maps != n_maps:
                raise ShapeError(f"fragment {i} has {f.n_maps} maps, expected {n_maps}")
            if len(f.lineage) != depth:
                raise ShapeError(f"fragment {i} has lineage depth {len(f.lineage)}, expected {depth}")
        object.__setattr__(self, "fragments", frags)

    def __len__(self) -> int:
        return len(self.fragments)

    def __iter__(self) -> Iterator[Fragment]:
        return iter(self.fragments)

    def __getitem__(self, i: int) -> Fragment:
        return self.fragments[i]

    @property
    def n_maps(self) -> int:
        return self.fragments[0].n_maps

    @property
    def dtype(self):
        return self.fragments[0].maps.dtype

    def like(self, arrays: Iterable[np.ndarray]) -> "Storage":
        """New storage with this storage's lineages and the given map stacks."""
        return Storage(tuple(Fragment(a, f.lineage) for a, f in zip(arrays, self.fragments, strict=True)))


def storage_from_image(image) -> Storage:
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise InvalidInputError(f"expected a nonempty 2D image, got shape {image.shape}")
    return Storage((Fragment(image[None, :, :].copy()),))


def expected_fragment_count(pool_factors: Sequence[int]) -> int:
    count = 1
    for k in pool_factors:
        if int(k) < 1:
            raise InvalidInputError(f"pool factor must be >= 1, got {k}")
        count *= int(k) ** 2
    return count


def lineage_to_pixel(lineage: Lineage, m, n):
    """Map a within-fragment position to full-resolution grid coordinates.

    ``m`` and ``n`` may be integers or integer arrays.  The first lineage
    entry belongs to the first pooling layer, so it ends up as the least
    significant digit::

        row = r1 + k1 * (r2 + k2 * (... (rL + kL * m)))
    """
    row, col = m, n
    for r, c, k in reversed(lineage):
        row = r + k * row
        col = c + k * col
    return row, col


def lineage_axes(lineage: Lineage, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid row and column coordinates of every position of a ``rows x cols`` fragment."""
    return lineage_to_pixel(lineage, np.arange(rows), np.arange(cols))


# -- tensor dump format -------------------------------------------------------

def dump_tensor(maps, fh: TextIO) -> None:
    """Write a map stack as ``rows cols nmaps`` followed by the values."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    n, rows, cols = maps.shape
    fh.write(f"{rows} {cols} {n}\n")
    for plane in maps:
        for line in plane:
            fh.write(" ".join(format(v, ".17g") for v in line))
            fh.write("\n")


def load_tensor(fh: TextIO) -> np.ndarray:
    """Read one map stack written by :func:`dump_tensor` as an ``(n, rows, cols)`` array."""
    header = fh.readline().split()
    if len(header) != 3:
        raise DataError(f"bad tensor header {header!r}")
    rows, cols, n = (int(v) for v in header)
    values: list[float] = []
    while len(values) < rows * cols * n:
        line = fh.readline()
        if not line:
            raise DataError(f"truncated tensor: expected {rows * cols * n} values, got {len(values)}")
        values.extend(float(v) for v in line.split())
    if len(values) != rows * cols * n:
        raise DataError("tensor body does not end on a row boundary")
    return np.array(values, dtype=np.float64).reshape(n, rows, cols)
