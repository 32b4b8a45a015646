"""Token grids in raster-scan order and the operators that assemble panoramas.

A TokenGrid is an immutable 2D arrangement of discrete token ids, stored
row-major (left-to-right, top-to-bottom). All indexing is 0-based. Grids with
zero rows or zero columns are legal and act as identities for concatenation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodebookError, GridIndexError, InputError, ShapeError

PTOK_MAGIC = b"PTOK"
PTOK_VERSION = 1


@dataclass(frozen=True)
class TokenGrid:
    """Immutable grid of token ids, `rows * cols` entries in raster order."""

    rows: int
    cols: int
    tokens: tuple[int, ...]

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise ShapeError(f"grid dimensions must be non-negative, got {self.rows}x{self.cols}")
        if len(self.tokens) != self.rows * self.cols:
            raise ShapeError(
                f"token count {len(self.tokens)} does not match {self.rows}x{self.cols}"
            )
        if self.tokens and min(self.tokens) < 0:
            raise ShapeError("token ids must be non-negative")

    @classmethod
    def from_rows(cls, rows_of_tokens) -> "TokenGrid":
        rows = len(rows_of_tokens)
        cols = len(rows_of_tokens[0]) if rows else 0
        flat = []
        for row in rows_of_tokens:
            if len(row) != cols:
                raise ShapeError("ragged rows")
            flat.extend(int(t) for t in row)
        return cls(rows, cols, tuple(flat))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TokenGrid":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ShapeError(f"expected 2D array, got shape {arr.shape}")
        return cls(arr.shape[0], arr.shape[1], tuple(int(t) for t in arr.ravel()))

    def to_array(self) -> np.ndarray:
        return np.fromiter(self.tokens, dtype=np.uint32, count=len(self.tokens)).reshape(
            self.rows, self.cols
        )

    def row(self, j: int) -> tuple[int, ...]:
        if not 0 <= j < self.rows:
            raise GridIndexError(f"row {j} out of range for {self.rows} rows")
        return self.tokens[j * self.cols : (j + 1) * self.cols]

    def token_at(self, row: int, col: int) -> int:
        return self.tokens[raster_index(row, col, self.cols)]


def raster_index(row: int, col: int, cols: int) -> int:
    """Flat raster-scan index of (row, col) in a grid with `cols` columns."""
    if row < 0 or col < 0:
        raise GridIndexError(f"negative position ({row}, {col})")
    if col >= cols:
        raise GridIndexError(f"col {col} out of range for {cols} columns")
    return row * cols + col


def vconcat(top: TokenGrid, bottom: TokenGrid) -> TokenGrid:
    """Stack `bottom` under `top`; column counts must match.

    Empty grids (0 rows) pass through as identities.
    """
    if top.rows == 0:
        return bottom
    if bottom.rows == 0:
        return top
    if top.cols != bottom.cols:
        raise ShapeError(f"vconcat column mismatch: {top.cols} vs {bottom.cols}")
    return TokenGrid(top.rows + bottom.rows, top.cols, top.tokens + bottom.tokens)


def hconcat(left: TokenGrid, right: TokenGrid) -> TokenGrid:
    """Join `right` onto the right edge of `left`; row counts must match."""
    if left.cols == 0:
        return right
    if right.cols == 0:
        return left
    if left.rows != right.rows:
        raise ShapeError(f"hconcat row mismatch: {left.rows} vs {right.rows}")
    flat: list[int] = []
    for j in range(left.rows):
        flat.extend(left.row(j))
        flat.extend(right.row(j))
    return TokenGrid(left.rows, left.cols + right.cols, tuple(flat))


def tail_tokens(grid: TokenGrid, count: int) -> tuple[int, ...]:
    """The final `count` tokens of the grid in raster order."""
    if count < 0 or count > len(grid.tokens):
        raise GridIndexError(f"tail of {count} tokens from a grid of {len(grid.tokens)}")
    if count == 0:
        return ()
    return grid.tokens[-count:]


def row_tail(grid: TokenGrid, row: int, count: int) -> tuple[int, ...]:
    """The final `count` tokens of one row."""
    if not 0 <= row < grid.rows:
        raise GridIndexError(f"row {row} out of range for {grid.rows} rows")
    if count < 0 or count > grid.cols:
        raise GridIndexError(f"row tail of {count} tokens from {grid.cols} columns")
    r = grid.row(row)
    return r[len(r) - count :] if count else ()


def write_ptok(grid: TokenGrid, codebook_size: int, path) -> None:
    """Serialize a grid to the PTOK v1 byte format.

    Layout: magic 'PTOK', 1-byte version, u32-LE rows, u32-LE cols,
    u32-LE codebook size, then rows*cols u32-LE token ids in raster order.
    """
    if grid.tokens and max(grid.tokens) >= codebook_size:
        raise CodebookError(
            f"token id {max(grid.tokens)} outside codebook of size {codebook_size}"
        )
    payload = bytearray()
    payload += PTOK_MAGIC
    payload += struct.pack("<B", PTOK_VERSION)
    payload += struct.pack("<III", grid.rows, grid.cols, codebook_size)
    payload += np.asarray(grid.tokens, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def read_ptok(path) -> tuple[TokenGrid, int]:
    """Read a PTOK v1 file; returns (grid, codebook_size)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 17 or data[:4] != PTOK_MAGIC:
        raise InputError(f"{path}: not a PTOK file")
    version = data[4]
    if version != PTOK_VERSION:
        raise InputError(f"{path}: unsupported PTOK version {version}")
    rows, cols, k = struct.unpack_from("<III", data, 5)
    expected = 17 + 4 * rows * cols
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes, found {len(data)}")
    tokens = np.frombuffer(data, dtype="<u4", count=rows * cols, offset=17)
    grid = TokenGrid(rows, cols, tuple(int(t) for t in tokens))
    if grid.tokens and max(grid.tokens) >= k:
        raise CodebookError(f"{path}: token id exceeds stored codebook size {k}")
    return grid, k
