"""Row-sliced data panels and the LFPB binary container.

A panel is a p x n matrix of float64 values (p features/voxels as rows,
n observation columns) processed as L consecutive row slices so that no
operation ever needs the full matrix in memory. Panels are backed either
by an in-memory array or by an LFPB file read slice by slice.

LFPB layout (all integers little-endian):

    bytes 0-3    magic ``LFPB``
    u32          format version (currently 1)
    u64          p, number of rows
    u64          n, number of columns
    u32          L, slice count
    (L+1) x u64  row index where each slice starts, first 0, last p
    payload      float64 little-endian, row-major, slices in order

Slices are consecutive row ranges, so the payload is simply the full
matrix in row-major order; arbitrary row ranges can be read directly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ValidationError

MAGIC = b"LFPB"
FORMAT_VERSION = 1
DEFAULT_SLICE_BYTES = 256 * 1024 * 1024

_HEAD = struct.Struct("<4sIQQI")


def slice_starts(p: int, n_slices: int) -> list[int]:
    """Row boundaries for ``n_slices`` slices of ceil(p / L) rows each."""
    if n_slices < 1:
        raise ValidationError(f"slice count must be >= 1, got {n_slices}")
    height = math.ceil(p / n_slices)
    return [min(l * height, p) for l in range(n_slices + 1)]


def default_slice_count(p: int, n: int, slice_bytes: int = DEFAULT_SLICE_BYTES) -> int:
    """Smallest L whose slices stay at or below ``slice_bytes``."""
    return max(1, math.ceil(p * n * 8 / slice_bytes))


@dataclass
class DataPanel:
    """A p x n float64 matrix exposed as ordered row slices.

    ``mean`` is the estimated column-average carried along after centering;
    ``centered`` records whether it has been subtracted from every column.
    """

    p: int
    n: int
    row_starts: list[int]
    centered: bool = False
    mean: np.ndarray | None = None
    _array: np.ndarray | None = field(default=None, repr=False)
    _path: Path | None = field(default=None, repr=False)
    _payload_offset: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.p < 1 or self.n < 1:
            raise ValidationError(f"panel dimensions must be positive, got p={self.p}, n={self.n}")
        rs = self.row_starts
        if rs[0] != 0 or rs[-1] != self.p or any(b < a for a, b in zip(rs, rs[1:])):
            raise ValidationError(f"invalid slice boundaries {rs} for p={self.p}")
        if (self._array is None) == (self._path is None):
            raise ValidationError("panel needs exactly one backing: array or path")
        if self.mean is not None and self.mean.shape != (self.p,):
            raise ValidationError(f"mean must have shape ({self.p},), got {self.mean.shape}")

    @classmethod
    def from_array(cls, values, n_slices: int = 1, centered: bool = False,
                   mean: np.ndarray | None = None) -> "DataPanel":
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"panel array must be 2-D, got shape {arr.shape}")
        p, n = arr.shape
        return cls(p=p, n=n, row_starts=slice_starts(p, n_slices),
                   centered=centered, mean=mean, _array=arr)

    @property
    def n_slices(self) -> int:
        return len(self.row_starts) - 1

    @property
    def file_backed(self) -> bool:
        return self._path is not None

    def read_rows(self, start: int, stop: int) -> np.ndarray:
        """Rows [start, stop) as a (stop-start) x n float64 array."""
        if not (0 <= start <= stop <= self.p):
            raise ValidationError(f"row range [{start}, {stop}) outside panel of {self.p} rows")
        if self._array is not None:
            return self._array[start:stop]
        count = (stop - start) * self.n
        with open(self._path, "rb") as fh:
            fh.seek(self._payload_offset + start * self.n * 8)
            block = np.fromfile(fh, dtype="<f8", count=count)
        if block.size != count:
            raise ValidationError(f"short read from {self._path}: wanted {count} values")
        return block.reshape(stop - start, self.n)

    def iter_slices(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (start_row, block) for each slice, in ascending order."""
        for a, b in zip(self.row_starts, self.row_starts[1:]):
            yield a, self.read_rows(a, b)

    def with_slices(self, n_slices: int) -> "DataPanel":
        """Same backing, re-partitioned into ``n_slices`` slices."""
        return DataPanel(p=self.p, n=self.n, row_starts=slice_starts(self.p, n_slices),
                         centered=self.centered, mean=self.mean,
                         _array=self._array, _path=self._path,
                         _payload_offset=self._payload_offset)

    def to_array(self) -> np.ndarray:
        """Materialize the full matrix (small panels / tests only)."""
        if self._array is not None:
            return self._array
        return self.read_rows(0, self.p)


class PanelWriter:
    """Incremental LFPB writer; slices must arrive in order and cover all rows."""

    def __init__(self, path, p: int, n: int, n_slices: int = 1,
                 row_starts: list[int] | None = None):
        self.path = Path(path)
        self.p, self.n = p, n
        self.row_starts = list(row_starts) if row_starts is not None else slice_starts(p, n_slices)
        if self.row_starts[0] != 0 or self.row_starts[-1] != p:
            raise ValidationError(f"invalid slice boundaries {self.row_starts} for p={p}")
        self._fh = open(self.path, "wb")
        self._fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, p, n, len(self.row_starts) - 1))
        self._fh.write(np.asarray(self.row_starts, dtype="<u8").tobytes())
        self._next = 0  # index of next slice expected

    def write_slice(self, block: np.ndarray) -> None:
        a, b = self.row_starts[self._next], self.row_starts[self._next + 1]
        if block.shape != (b - a, self.n):
            raise ValidationError(
                f"slice {self._next} must have shape {(b - a, self.n)}, got {block.shape}")
        np.ascontiguousarray(block, dtype="<f8").tofile(self._fh)
        self._next += 1

    def close(self) -> None:
        if self._next != len(self.row_starts) - 1:
            self._fh.close()
            raise ValidationError(f"panel file {self.path} incomplete: "
                                  f"{self._next} of {len(self.row_starts) - 1} slices written")
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_panel(panel: DataPanel, path) -> None:
    """Write a panel to an LFPB file, preserving its slice boundaries."""
    with PanelWriter(path, panel.p, panel.n, row_starts=panel.row_starts) as writer:
        for _, block in panel.iter_slices():
            writer.write_slice(block)


def read_panel(path, centered: bool = False, mean: np.ndarray | None = None) -> DataPanel:
    """Open an LFPB file as a lazily-read panel (no payload is loaded)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"panel file not found: {path}")
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise ValidationError(f"{path} too short for an LFPB header")
        magic, version, p, n, n_slices = _HEAD.unpack(head)
        if magic != MAGIC:
            raise ValidationError(f"{path} is not an LFPB panel (bad magic {magic!r})")
        if version != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported LFPB version {version}")
        offsets = np.fromfile(fh, dtype="<u8", count=n_slices + 1)
        payload_offset = fh.tell()
    if offsets.size != n_slices + 1:
        raise ValidationError(f"{path}: truncated slice offset table")
    row_starts = [int(v) for v in offsets]
    expected = payload_offset + p * n * 8
    if size != expected:
        raise ValidationError(f"{path}: payload size mismatch, expected {expected} bytes, found {size}")
    return DataPanel(p=p, n=n, row_starts=row_starts, centered=centered, mean=mean,
                     _path=path, _payload_offset=payload_offset)


def center_panel(panel: DataPanel, out_path=None, threads: int = 1) -> DataPanel:
    """Subtract the column-average from every column.

    Two passes over the slices: one accumulating the mean, one subtracting
    it. The output is array-backed when the input is and no ``out_path`` is
    given; otherwise it is written to ``out_path`` (required for file-backed
    input).
    """
    if panel.centered:
        raise ValidationError("panel is already centered")
    mean = np.empty(panel.p)
    for start, block in panel.iter_slices():
        mean[start:start + block.shape[0]] = block.sum(axis=1) / panel.n
    block = None

    if out_path is None and not panel.file_backed:
        arr = panel.to_array() - mean[:, None]
        return DataPanel.from_array(arr, n_slices=panel.n_slices, centered=True, mean=mean)
    if out_path is None:
        raise ValidationError("centering a file-backed panel requires out_path")
    from ._parallel import ordered_map

    def _centered(item):
        start, block = item
        return block - mean[start:start + block.shape[0], None]

    with PanelWriter(out_path, panel.p, panel.n, row_starts=panel.row_starts) as writer:
        for block in ordered_map(_centered, panel.iter_slices(), threads):
            writer.write_slice(block)
            block = None  # keep at most two slices in flight
    return read_panel(out_path, centered=True, mean=mean)


def panel_to_csv(panel: DataPanel, path) -> None:
    """Debug converter: one CSV row per panel row, 17 significant digits."""
    with open(path, "w") as fh:
        for _, block in panel.iter_slices():
            for row in block:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def panel_from_csv(path, n_slices: int = 1) -> DataPanel:
    """Debug converter: read a dense CSV written by :func:`panel_to_csv`."""
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"cannot parse panel CSV {path}: {exc}") from None
    return DataPanel.from_array(arr, n_slices=n_slices)
