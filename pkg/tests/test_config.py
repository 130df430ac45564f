from pathlib import Path

import pytest

from smpdefault.config import ExperimentConfig, load_config, parse_config
from smpdefault.errors import ConfigError

DEFAULT_TOML = Path(__file__).resolve().parents[1] / "configs" / "default.toml"


def test_shipped_config_equals_builtin_defaults():
    assert load_config(DEFAULT_TOML) == ExperimentConfig()


def test_empty_config_is_default():
    assert parse_config("") == ExperimentConfig()


def test_values_are_coerced():
    cfg = parse_config("[model]\nalpha = 1\nintensity_times = [0, 1]\nintensity_values = [0.1, 0.4]\n")
    assert cfg.model.alpha == 1.0 and isinstance(cfg.model.alpha, float)
    assert cfg.model.intensity_spec().values == (0.1, 0.4)


@pytest.mark.parametrize("text,field,line", [
    ("[model]\nalpha = 0.1\nbogus = 3\n", "model.bogus", 3),
    ("[numerics]\nn_steps = 1\n", "numerics.n_steps", 2),
    ("[numerics]\n\nn_paths = 'many'\n", "numerics.n_paths", 3),
    ("[model]\nmu = -1.5\n", "model.mu", 2),
    ("[run]\nscheme = 'rk4'\n", "run.scheme", 2),
    ("[extras]\na = 1\n", "extras", 1),
    ("[numerics]\nbasis = ['1', 'W9']\n", "numerics.basis", 2),
    ("[model]\nintensity_times = [0, 1]\nintensity_values = [0.1, -0.4]\n", "model.intensity_times", 2),
])
def test_invalid_config_reports_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == field
    assert exc.value.line == line


def test_syntax_error_has_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("[model]\nalpha = = 2\n")
    assert exc.value.line == 2


def test_overrides_and_report_echo():
    cfg = ExperimentConfig().with_overrides(seed=5, n_paths=300, n_steps=8, out="/tmp/x")
    assert (cfg.numerics.seed, cfg.numerics.n_paths, cfg.numerics.n_steps) == (5, 300, 8)
    assert cfg.output.dir == "/tmp/x"
    assert "dir" not in cfg.to_dict()["output"]
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(n_steps=1)
