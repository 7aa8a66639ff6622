"""Binary field snapshots and CSV monitor series."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import HermitianField, ScalarField

MAGIC = "KRFG"
VERSION = 1
_DTYPE = np.dtype("<f8")
# block order of Hermitian snapshots
HERMITIAN_BLOCKS = ("g_zz", "g_ss", "re_g_zs", "im_g_zs")


class SnapshotError(ValueError):
    pass


@dataclass
class Snapshot:
    """Raw snapshot contents: ``values`` has shape ``(blocks,) + dims``."""

    kind: str
    dims: tuple
    values: np.ndarray

    def to_field(self, grid):
        if tuple(grid.shape) != self.dims:
            raise SnapshotError(f"snapshot dims {self.dims} do not match grid {tuple(grid.shape)}")
        if self.kind == "scalar":
            return ScalarField(grid, self.values[0])
        return HermitianField(grid, self.values)


def _blocks(field):
    if isinstance(field, ScalarField):
        return "scalar", field.values[None]
    if isinstance(field, HermitianField):
        if field.comps.shape[0] != 4:
            raise SnapshotError("Hermitian snapshots hold total-space fields (4 components)")
        return "hermitian", field.comps
    raise TypeError(f"cannot snapshot {type(field).__name__}")


def write_snapshot(field, path) -> None:
    """``KRFG 1 <kind> <dims>`` header, then little-endian float64 blocks."""
    kind, blocks = _blocks(field)
    dims = blocks.shape[1:]
    header = f"{MAGIC} {VERSION} {kind} " + " ".join(str(d) for d in dims) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(blocks, dtype=_DTYPE).tobytes(order="C"))


def read_snapshot(path) -> Snapshot:
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if end < 0:
        raise SnapshotError("missing header line terminator")
    try:
        parts = data[:end].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise SnapshotError(f"non-ASCII header at byte offset {exc.start}") from exc
    if not parts or parts[0] != MAGIC:
        raise SnapshotError(f"bad magic at byte offset 0: expected {MAGIC!r}, found "
                            f"{parts[0] if parts else ''!r}")
    offset = len(MAGIC) + 1
    if len(parts) < 2 or not parts[1].isdigit():
        raise SnapshotError(f"missing version at byte offset {offset}")
    if int(parts[1]) != VERSION:
        raise SnapshotError(f"unsupported version {parts[1]} at byte offset {offset} "
                            f"(reader supports {VERSION})")
    if len(parts) < 3 or parts[2] not in ("scalar", "hermitian"):
        raise SnapshotError(f"unknown field kind {parts[2] if len(parts) > 2 else ''!r}")
    try:
        dims = tuple(int(d) for d in parts[3:])
    except ValueError as exc:
        raise SnapshotError(f"malformed dimensions {parts[3:]}") from exc
    if len(dims) not in (2, 4) or any(d <= 0 for d in dims):
        raise SnapshotError(f"expected 2 or 4 positive dimensions, got {dims}")
    if parts[2] == "hermitian" and len(dims) != 4:
        raise SnapshotError("Hermitian snapshots need 4 dimensions")
    nblocks = 1 if parts[2] == "scalar" else 4
    expected = nblocks * math.prod(dims) * _DTYPE.itemsize
    actual = len(data) - (end + 1)
    if actual != expected:
        raise SnapshotError(f"payload size mismatch after header (byte offset {end + 1}): "
                            f"expected {expected} bytes, found {actual}")
    values = np.frombuffer(data, dtype=_DTYPE, offset=end + 1).reshape((nblocks,) + dims)
    return Snapshot(parts[2], dims, values.astype(np.float64))


# ----------------------------------------------------------------------------
# CSV series


def series_columns(record_type) -> list:
    """Column order of a record dataclass (``t`` first)."""
    names = [f.name for f in fields(record_type)]
    if "t" in names:
        names.remove("t")
        names.insert(0, "t")
    return names


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path, names, rows, config_hash: Optional[str] = None) -> None:
    """Header plus ``%.17g`` rows; the config hash goes on a leading ``#`` line."""
    with open(path, "w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Returns ``(names, rows as float array, config hash or None)``."""
    config_hash = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("#"):
        key, _, value = lines[0][1:].strip().partition("=")
        if key == "config_hash":
            config_hash = value
        lines = lines[1:]
    rows = list(csv.reader(lines))
    names = rows[0] if rows else []
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    return names, data.reshape(len(rows) - 1, len(names)), config_hash


PLOT_TEMPLATE = '''"""Standard plots for {csv_name} (config {config_hash})."""
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

lines = [ln for ln in Path(__file__).with_name("{csv_name}").read_text().splitlines()
         if not ln.startswith("#")]
data = np.genfromtxt(lines, delimiter=",", names=True)
t = data["t"]
fig, axes = plt.subplots(1, 3, figsize=(13, 4))
axes[0].semilogy(t, data["fiber_norm"], label="sup fiber norm")
axes[0].semilogy(t, data["fiber_norm"][0] * np.exp(-t), "--", label="e^-t")
axes[0].set_xlabel("t")
axes[0].legend()
axes[1].semilogy(t, np.maximum(np.abs(data["phidot_region_sup"]), 1e-300))
axes[1].set_xlabel("t")
axes[1].set_ylabel("sup |d phi / dt| on region")
axes[2].plot(t, data["scalar_inf"], label="inf R")
axes[2].plot(t, data["scalar_sup"], label="sup R")
axes[2].set_xlabel("t")
axes[2].legend()
fig.tight_layout()
fig.savefig(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).with_name("{stem}.png"), dpi=120)
'''


def emit_series(series, path, config_hash: Optional[str] = None, record_type=None) -> list:
    """Write a monitor series as CSV plus a companion plot script.

    Returns the written paths.  The column order is the record dataclass
    field order with ``t`` first, so an empty series still has a header.
    """
    from .flow import MonitorRecord

    record_type = record_type or MonitorRecord
    names = series_columns(record_type)
    rows = [[getattr(r, n) for n in names] for r in series.records]
    path = Path(path)
    write_csv(path, names, rows, config_hash)
    script = path.with_name(path.stem + "_plot.py")
    script.write_text(PLOT_TEMPLATE.format(csv_name=path.name, config_hash=config_hash,
                                           stem=path.stem))
    return [path, script]
