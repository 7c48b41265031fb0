from __future__ import annotations

import pytest

from tmsynce.config import SCHEMA_VERSION, ExperimentConfig, MapSpec, bundled_configs, load_config, parse_config
from tmsynce.errors import ConfigurationError

MINIMAL = """schema_version = 1
name = "demo"

[run]
iterations = 100
burn_in = 10
"""


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.iterations == 100 and cfg.burn_in == 10
    assert cfg.fine_map == MapSpec("triangular", 4) and cfg.coarse_map == MapSpec("triangular", 2)
    assert cfg.covariance_scale is None and cfg.schema_version == SCHEMA_VERSION


def test_bundled_fixtures_cover_every_row():
    found = bundled_configs()
    assert len(found) == 11
    rows = {(c.name, c.omega, c.problem) for c in map(load_config, found.values())}
    for name in ("No map", "True direct", "True deep", "LT direct", "LT deep"):
        for omega in (0.0, 0.5):
            assert (name, omega, "banana-quartic") in rows
    assert any(p == "synthetic-bifidelity" for _, _, p in rows)


def test_bundled_protocol_settings():
    cfg = load_config(bundled_configs()["banana_quartic_true_direct_omega05"])
    assert (cfg.iterations, cfg.burn_in, cfg.repetitions, cfg.retrain_period) == (100_000, 30_000, 5, 5000)
    assert cfg.covariance_scale == pytest.approx(2.38**2 / 2)
    syn = load_config(bundled_configs()["synthetic_bifidelity"])
    assert syn.retrain_period == 250 and syn.adapt and syn.fine_map.order == 3


@pytest.mark.parametrize("text,line,fragment", [
    (MINIMAL + "bogus = 3\n", 7, "unknown key 'run.bogus'"),
    (MINIMAL + "[extra]\nx = 1\n", 7, "unknown table [extra]"),
    (MINIMAL + "[maps.middle]\nkind = 'identity'\n", 7, "unknown table [maps.middle]"),
    (MINIMAL.replace("burn_in = 10", "burn_in = 100"), 6, "burn_in"),
    (MINIMAL.replace("iterations = 100", "iterations = 'many'"), 5, "wrong type"),
    (MINIMAL + "[method]\nomega = 2.0\n", 8, "omega"),
    (MINIMAL + "[proposal]\nadapt = 1\n", 8, "wrong type"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigurationError) as err:
        parse_config(text, "exp.toml")
    assert f"exp.toml:{line}:" in str(err.value)
    assert fragment in str(err.value)


def test_syntax_error_reports_position():
    with pytest.raises(ConfigurationError, match=r"line 2"):
        parse_config("schema_version = 1\nname = \n", "bad.toml")


def test_missing_schema_version_and_wrong_version():
    with pytest.raises(ConfigurationError, match="schema_version"):
        parse_config("name = 'x'\n")
    with pytest.raises(ConfigurationError, match="schema_version"):
        parse_config("schema_version = 99\n")


def test_semantic_checks():
    with pytest.raises(ConfigurationError, match="analytical"):
        parse_config(MINIMAL + "[problem]\nkind = 'synthetic-bifidelity'\n[maps.fine]\nkind = 'analytical'\n")
    with pytest.raises(ConfigurationError, match="deep"):
        parse_config(MINIMAL + "[method]\nkind = 'no-map-synce'\nconfiguration = 'deep'\n")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(burn_in=10, iterations=10)


def test_hash_ignores_seed_and_io_only():
    cfg = parse_config(MINIMAL)
    same = cfg.with_overrides(seed=5, output="elsewhere", workers=3)
    assert same.hash() == cfg.hash() and same.seed == 5
    assert cfg.with_overrides(omega=0.5).hash() != cfg.hash()
    assert cfg.with_overrides(seed=None) == cfg


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "nope.toml")
