import subprocess
import sys

import numpy as np
import pytest

from krflow.flow import MonitorRecord, MonitorSeries
from krflow.grid import BaseGrid, HermitianField, ScalarField, TotalGrid
from krflow.io import (SnapshotError, emit_series, read_csv, read_snapshot, series_columns,
                       write_csv, write_snapshot)

MONITOR_HEADER = (
    "t,phi_sup,phi_inf,phidot_sup,phidot_inf,phidot_region_sup,u_sup,u_inf,tr_chi_sup,"
    "tr_omega0_sup,fiber_area_min,fiber_area_max,fiber_osc_sup,fiber_lap_inf,fiber_lap_sup,"
    "fiber_norm,scalar_inf,scalar_sup,scalar_gap,twist_sup,schwarz,schwarz_u_sup,"
    "grad_phidot_sup,limit_gap,dt,retries")


def test_scalar_snapshot_roundtrip(tmp_path, rng):
    g = BaseGrid("torus", 8, 16)
    f = ScalarField(g, rng.normal(size=g.shape))
    write_snapshot(f, tmp_path / "a.krfg")
    raw = (tmp_path / "a.krfg").read_bytes()
    assert raw.startswith(b"KRFG 1 scalar 8 16\n")
    snap = read_snapshot(tmp_path / "a.krfg")
    assert snap.kind == "scalar" and snap.dims == (8, 16)
    assert np.array_equal(snap.to_field(g).values, f.values)


def test_hermitian_snapshot_roundtrip(tmp_path, rng):
    total = TotalGrid(BaseGrid("torus", 8, 8), 8, 8)
    h = HermitianField(total, rng.normal(size=(4,) + total.shape))
    write_snapshot(h, tmp_path / "h.krfg")
    back = read_snapshot(tmp_path / "h.krfg").to_field(total)
    assert np.array_equal(back.comps, h.comps)
    with pytest.raises(SnapshotError):
        read_snapshot(tmp_path / "h.krfg").to_field(TotalGrid(BaseGrid("torus", 8, 8), 8, 10))


def test_truncated_snapshot_reports_sizes(tmp_path):
    g = BaseGrid("torus", 8, 8)
    write_snapshot(ScalarField(g, np.ones(g.shape)), tmp_path / "t.krfg")
    data = (tmp_path / "t.krfg").read_bytes()
    (tmp_path / "t.krfg").write_bytes(data[:-9])
    with pytest.raises(SnapshotError, match="expected 512 bytes, found 503"):
        read_snapshot(tmp_path / "t.krfg")


def test_bad_header_fields(tmp_path):
    p = tmp_path / "v.krfg"
    p.write_bytes(b"KRFG 2 scalar 8 8\n" + b"\0" * 512)
    with pytest.raises(SnapshotError, match="version 2 at byte offset 5"):
        read_snapshot(p)
    p.write_bytes(b"XXXX 1 scalar 8 8\n")
    with pytest.raises(SnapshotError, match="byte offset 0"):
        read_snapshot(p)
    p.write_bytes(b"KRFG 1 vector 8 8\n")
    with pytest.raises(SnapshotError, match="field kind"):
        read_snapshot(p)
    p.write_bytes(b"KRFG 1 scalar 8")
    with pytest.raises(SnapshotError, match="terminator"):
        read_snapshot(p)


def test_csv_roundtrip_is_exact(tmp_path, rng):
    rows = rng.normal(size=(5, 3)) * 10.0 ** rng.integers(-20, 20, size=(5, 3))
    write_csv(tmp_path / "x.csv", ["a", "b", "c"], rows, "0123abcd")
    names, data, h = read_csv(tmp_path / "x.csv")
    assert names == ["a", "b", "c"] and h == "0123abcd"
    assert np.array_equal(data, rows)
    write_csv(tmp_path / "y.csv", ["a"], [])
    names, data, h = read_csv(tmp_path / "y.csv")
    assert names == ["a"] and data.shape == (0, 1) and h is None


def test_monitor_header_and_empty_series(tmp_path):
    assert ",".join(series_columns(MonitorRecord)) == MONITOR_HEADER
    csv_path, script = emit_series(MonitorSeries(), tmp_path / "s.csv", "feedface")
    lines = csv_path.read_text().splitlines()
    assert lines == ["# config_hash=feedface", MONITOR_HEADER]
    assert script.name == "s_plot.py"


def test_plot_script_runs(tmp_path):
    pytest.importorskip("matplotlib")
    series = MonitorSeries()
    for k in range(4):
        rec = MonitorRecord(*([1.0] * 25), 0)
        rec.t = float(k)
        rec.fiber_norm = float(np.exp(-k))
        series.append(rec)
    _, script = emit_series(series, tmp_path / "s.csv", "abc")
    out = tmp_path / "plot.png"
    subprocess.run([sys.executable, str(script), str(out)], check=True, cwd="/")
    assert out.stat().st_size > 0
