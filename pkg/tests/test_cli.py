import json

import pytest

from krflow.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, build_parser, main
from krflow.io import read_csv


def run(tmp_path, name, args, config=None):
    out = tmp_path / name
    argv = list(args) + ["--out", str(out)]
    if config is not None:
        path = tmp_path / f"{name}.cfg"
        path.write_text(config)
        argv += ["--config", str(path)]
    return main(argv), out


def test_parser_lists_every_experiment():
    parser = build_parser()
    for name in ("solve-base", "run-flow", "k3-family", "density-fit", "wp-check", "schwarz-check"):
        args = parser.parse_args([name, "--grid", "16", "--seed", "2"])
        assert args.command == name and args.grid == 16 and args.seed == 2


def test_manifest_and_hash_consistency(tmp_path):
    rc, out = run(tmp_path, "flow", ["run-flow", "--snapshot-every", "0.5"],
                  "[grid]\nbase = 16\nfiber = 8\n[flow]\nt_max = 1.0\n")
    assert rc == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == "run-flow"
    h = manifest["config_hash"]
    _, _, csv_hash = read_csv(out / "series.csv")
    assert csv_hash == h
    for name in manifest["outputs"]:
        assert (out / name).exists()
    assert "phi_0002.krfg" in manifest["outputs"]
    assert all(manifest["checks"].values())
    assert "grid.base = 16" in (out / "config.txt").read_text()


@pytest.mark.parametrize("kind, config", [
    ("density-fit", "[model]\nkind = mI0\nm = 2\n[grid]\nrho_min = -4.0\nrho_max = -0.1\n"
                    "base = 64\n"),
    ("wp-check", "[model]\nkind = II\n[grid]\nrho_min = -3.0\nrho_max = 0.0\nbase = 32\n"),
    ("k3-family", "[grid]\nbase = 8\nfiber = 8\n[family]\nt_min = 0.1\n"),
    ("solve-base", "[grid]\nbase = 32\n"),
])
def test_experiments_succeed(tmp_path, kind, config):
    rc, out = run(tmp_path, kind, [kind], config)
    assert rc == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == kind and all(manifest["checks"].values())


def test_config_error_exit_code(tmp_path, capsys):
    rc, _ = run(tmp_path, "bad", ["run-flow"], "[grid]\nbase = 7\n[flow]\ndt = x\n")
    assert rc == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "grid.base" in err and "flow.dt" in err


def test_subcommand_kind_mismatch(tmp_path):
    rc, _ = run(tmp_path, "mismatch", ["run-flow"], "[experiment]\nkind = wp-check\n")
    assert rc == EXIT_CONFIG


def test_failed_check_exit_code(tmp_path, capsys, monkeypatch):
    from krflow import semiflat
    real = semiflat.fit_singular_exponent

    def shifted(*args, **kw):
        fit = real(*args, **kw)
        fit.exponent += 0.5
        return fit

    monkeypatch.setattr(semiflat, "fit_singular_exponent", shifted)
    rc, out = run(tmp_path, "shifted", ["density-fit"],
                  "[model]\nkind = mI0\nm = 2\n[grid]\nrho_min = -4.0\nrho_max = -0.1\n")
    assert rc == EXIT_SOLVER
    assert "FAIL exponent" in capsys.readouterr().out
    assert json.loads((out / "manifest.json").read_text())["checks"]["exponent"] is False


def test_solver_failure_exit_code(tmp_path, capsys, monkeypatch):
    from krflow import gke

    def diverge(*args, **kw):
        raise gke.NewtonDivergence("forced", [1.0, 2.0])

    monkeypatch.setattr(gke, "solve_gke", diverge)
    rc, _ = run(tmp_path, "diverge", ["solve-base"], "[grid]\nbase = 16\n")
    assert rc == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_unusable_grid_exit_code(tmp_path, capsys):
    rc, _ = run(tmp_path, "coarse", ["density-fit"],
                "[model]\nkind = mI0\nm = 3\n[grid]\nbase = 8\nrho_min = -0.8\nrho_max = -0.1\n")
    assert rc == EXIT_SOLVER
    assert "radial shells" in capsys.readouterr().err
