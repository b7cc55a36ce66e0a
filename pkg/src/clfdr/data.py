"""Count data containers and CSV ingestion.

The canonical on-disk layout is a CSV whose first row holds the covariate
values (one per count column) and whose remaining rows hold one test each::

    species,0.86,1.34,1.81,2.37,3.00
    sp1,0,1,1,0,5
    sp2,9,2,0,0,3

The leading label column is optional and is detected from a non-numeric
first cell.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import IO, Sequence, Union

import numpy as np

MAX_COUNT = 2**31 - 1

PathOrStream = Union[str, os.PathLike, IO[str], IO[bytes]]


class DataError(ValueError):
    """Invalid count data; carries the offending 1-based row/column."""

    def __init__(self, message: str, row: int | None = None, col: int | None = None):
        self.row = row
        self.col = col
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"column {col}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Covariate:
    """Strictly increasing covariate vector shared by every test (e.g. biomass)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size < 2:
            raise DataError("need at least two covariate values")
        if not np.all(np.isfinite(v)):
            raise DataError("covariate values must be finite")
        bad = np.nonzero(np.diff(v) <= 0)[0]
        if bad.size:
            raise DataError(
                f"covariate values must be strictly increasing "
                f"({v[bad[0]]!r} followed by {v[bad[0] + 1]!r})",
                row=1, col=int(bad[0]) + 2,
            )
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, Covariate):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True)
class TestRecord:
    """A single test's count vector and its row total."""

    __test__ = False  # not a pytest class

    y: np.ndarray
    n_total: int = field(default=-1)

    def __post_init__(self):
        raw = np.asarray(self.y).ravel()
        if raw.dtype.kind == "f" and (not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw))):
            raise DataError("counts must be integers")
        y = raw.astype(np.int64)
        if np.any(y < 0):
            raise DataError("counts must be non-negative")
        total = int(y.sum())
        if self.n_total not in (-1, total):
            raise DataError(f"n_total={self.n_total} does not match sum of counts {total}")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "n_total", total)


@dataclass(frozen=True)
class CountDataset:
    """M tests by N covariate levels of non-negative integer counts."""

    covariate: Covariate
    counts: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if not isinstance(self.covariate, Covariate):
            object.__setattr__(self, "covariate", Covariate(self.covariate))
        raw = np.asarray(self.counts)
        if raw.ndim == 1:
            raw = raw[None, :]
        if raw.ndim != 2 or raw.shape[0] < 1:
            raise DataError("counts must be a non-empty M x N matrix")
        if raw.shape[1] != len(self.covariate):
            raise DataError(
                f"each row needs {len(self.covariate)} counts, got {raw.shape[1]}"
            )
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise DataError("counts must be integers")
        elif raw.dtype.kind not in "iu":
            raise DataError("counts must be integers")
        if np.any(raw < 0):
            r, c = np.argwhere(raw < 0)[0]
            raise DataError("negative count", row=int(r) + 1, col=int(c) + 1)
        if np.any(raw > MAX_COUNT):
            r, c = np.argwhere(raw > MAX_COUNT)[0]
            raise DataError(f"count exceeds {MAX_COUNT}", row=int(r) + 1, col=int(c) + 1)
        counts = np.array(raw, dtype=np.int64)
        object.__setattr__(self, "counts", _frozen(counts))
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != counts.shape[0]:
                raise DataError("one label per row required")
            object.__setattr__(self, "labels", labels)

    @property
    def x(self) -> np.ndarray:
        return self.covariate.values

    @property
    def M(self) -> int:
        return self.counts.shape[0]

    @property
    def N(self) -> int:
        return self.counts.shape[1]

    @property
    def totals(self) -> np.ndarray:
        return row_totals(self)

    @property
    def usable(self) -> np.ndarray:
        """Boolean mask of rows with a positive total."""
        return self.totals > 0

    def record(self, m: int) -> TestRecord:
        return TestRecord(self.counts[m])

    def ids(self) -> list[str]:
        if self.labels is not None:
            return list(self.labels)
        return [str(m + 1) for m in range(self.M)]

    def take(self, rows: Sequence[int] | np.ndarray) -> "CountDataset":
        rows = np.asarray(rows)
        labels = None if self.labels is None else tuple(self.labels[i] for i in rows)
        return CountDataset(self.covariate, self.counts[rows], labels)

    def __eq__(self, other):
        if not isinstance(other, CountDataset):
            return NotImplemented
        return (
            self.covariate == other.covariate
            and np.array_equal(self.counts, other.counts)
            and self.labels == other.labels
        )


def row_totals(ds: CountDataset) -> np.ndarray:
    return ds.counts.sum(axis=1)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_text(source: PathOrStream) -> str:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    return data.lstrip("﻿")


def _parse_count(cell: str, row: int, col: int) -> int:
    cell = cell.strip()
    try:
        value = int(cell)
    except ValueError:
        try:
            f = float(cell)
        except ValueError:
            raise DataError(f"malformed numeric cell {cell!r}", row, col) from None
        if not math.isfinite(f) or f != int(f):
            raise DataError(f"count must be an integer, got {cell!r}", row, col) from None
        value = int(f)
    if value < 0:
        raise DataError(f"negative count {value}", row, col)
    if value > MAX_COUNT:
        raise DataError(f"count {value} exceeds {MAX_COUNT}", row, col)
    return value


def load_counts(source: PathOrStream, covariate: Sequence[float] | None = None) -> CountDataset:
    """Read a count CSV into a validated :class:`CountDataset`.

    Parameters
    ----------
    source : path or file-like
        UTF-8 CSV, comma-delimited.
    covariate : sequence of float, optional
        Covariate values supplied separately. When given, the file has no
        covariate header row and every row is data.

    Raises
    ------
    DataError
        With the 1-based row and column of the first offending cell.
    """
    text = _read_text(source)
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if covariate is None:
        if not rows:
            raise DataError("empty input")
        header, body, first_data_row = rows[0], rows[1:], 2
    else:
        header, body, first_data_row = None, rows, 1

    has_labels = False
    if header is not None and not _is_number(header[0].strip()):
        has_labels = True
    if any(not _is_number(r[0].strip()) for r in body):
        has_labels = True

    if header is not None:
        cov_cells = header[1:] if has_labels and not _is_number(header[0].strip()) else header
        offset = len(header) - len(cov_cells)
        values = []
        for j, cell in enumerate(cov_cells):
            try:
                values.append(float(cell))
            except ValueError:
                raise DataError(f"malformed covariate value {cell!r}", 1, j + 1 + offset) from None
        cov = Covariate(values)
    else:
        cov = Covariate(covariate)
    N = len(cov)

    if not body:
        raise DataError("no count rows")
    counts = np.empty((len(body), N), dtype=np.int64)
    labels: list[str] = []
    for i, r in enumerate(body):
        lineno = first_data_row + i
        cells = r
        if has_labels:
            labels.append(r[0].strip())
            cells = r[1:]
        if len(cells) != N:
            raise DataError(f"expected {N} counts, found {len(cells)}", lineno)
        for j, cell in enumerate(cells):
            counts[i, j] = _parse_count(cell, lineno, j + 1 + int(has_labels))
    return CountDataset(cov, counts, tuple(labels) if has_labels else None)


def dump_counts(ds: CountDataset, fh: IO[str] | None = None, label_header: str = "id") -> str:
    """Serialize ``ds`` in the layout :func:`load_counts` reads.

    Covariates are written with ``repr`` so they reload bit-for-bit.
    """
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    head = [repr(float(v)) for v in ds.x]
    if ds.labels is not None:
        head = [label_header] + head
    w.writerow(head)
    for m in range(ds.M):
        row = [str(int(c)) for c in ds.counts[m]]
        if ds.labels is not None:
            row = [ds.labels[m]] + row
        w.writerow(row)
    text = out.getvalue()
    if fh is not None:
        fh.write(text)
    return text


# Biomass (grams) for the five plant groups of the motivating wheat study.
WHEAT_BIOMASS = (0.86, 1.34, 1.81, 2.37, 3.00)
