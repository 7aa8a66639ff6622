import pytest

from krflow.config import SCHEMA, ConfigError, parse_config

MINIMAL = "[experiment]\nkind = run-flow\n"


def violations(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return info.value.violations


def test_minimal_config_uses_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.kind == "run-flow"
    for key, p in SCHEMA.items():
        if key != "experiment.kind":
            assert cfg[key] == p.default


def test_comments_and_types():
    cfg = parse_config("# header\n[experiment]\nkind = wp-check ; trailing\n[model]\nkind = II\n"
                       "tau0 = 0.5+1.2i\n[grid]\nbase = 64\n")
    assert cfg["model.tau0"] == complex(0.5, 1.2)
    assert cfg["grid.base"] == 64


def test_ib_without_b_names_the_key():
    errs = violations("[experiment]\nkind = density-fit\n[model]\nkind = Ib\n")
    assert any("model.b" in e for e in errs)


def test_duplicate_key_cites_both_lines():
    errs = violations("[experiment]\nkind = run-flow\n[flow]\ndt = 0.01\n\ndt = 0.02\n")
    assert errs == ["duplicate key 'flow.dt' on lines 4 and 6"]


def test_all_violations_are_collected():
    errs = violations("[experiment]\nkind = run-flow\n[grid]\nbase = 15\nfibre = 8\n"
                      "[flow]\ndt = abc\n[solvr]\n")
    assert len(errs) == 4
    assert any("nearest valid key is 'grid.fiber'" in e for e in errs)
    assert any("did you mean [solver]" in e for e in errs)
    assert any("must be even" in e for e in errs)
    assert any("not a valid float" in e for e in errs)


def test_cross_field_rules():
    assert any("rho_min" in e for e in violations(
        MINIMAL.replace("run-flow", "wp-check") + "[model]\nkind = II\n[grid]\nrho_min = -0.1\n"
        "rho_max = -0.5\n"))
    assert any("torus" in e for e in violations(MINIMAL + "[model]\nkind = II\n"))
    assert any("Kodaira" in e for e in violations("[experiment]\nkind = density-fit\n"))
    assert any("monitor_every" in e for e in violations(MINIMAL + "[flow]\ndt = 1.0\n"))
    assert any("imaginary" in e for e in violations(
        "[experiment]\nkind = wp-check\n[model]\nkind = I0*\ntau0 = 1-1i\n"))
    assert any("m must be >= 2" in e for e in violations(
        "[experiment]\nkind = density-fit\n[model]\nkind = mI0\n"))


def test_missing_kind():
    assert violations("[grid]\nbase = 16\n") == ["missing required key 'experiment.kind'"]
    assert parse_config("", defaults={"experiment.kind": "solve-base"}).kind == "solve-base"


def test_hash_is_stable_and_sensitive():
    a = parse_config(MINIMAL)
    b = parse_config("[flow]\nt_max = 12.0\n[experiment]\nkind = run-flow  # same\n")
    assert a.hash() == b.hash() and len(a.hash()) == 16
    c = a.with_overrides(grid__base=16)
    assert c.hash() != a.hash() and c["grid.base"] == 16
    with pytest.raises(ConfigError):
        a.with_overrides(grid__base=7)
    with pytest.raises(ConfigError):
        a.with_overrides(grid__bsae=16)
