"""
Tests for run configuration loading, overrides and validation.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import pytest

from backend.core.errors import ConfigError
from backend.core.run_config import (
    SCENARIOS,
    RunConfig,
    apply_overrides,
    dump_toml,
    load_config,
    parse_override,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def small_config(tmp_path: Path) -> RunConfig:
    return load_config(CONFIGS / "small_gaussian.toml", out_dir=tmp_path / "run")


class TestLoading:
    def test_shipped_configs_validate(self, tmp_path: Path) -> None:
        for path in sorted(CONFIGS.glob("*.toml")):
            cfg = load_config(path, out_dir=tmp_path / path.stem)
            assert cfg.scenario in SCENARIOS

    def test_file_values_are_read(self, small_config: RunConfig) -> None:
        assert small_config.grid.n == 16
        assert small_config.time.T == 20.0
        assert small_config.initial_state.target_l2 == 0.1
        assert small_config.build_grid().box_length == 16.0

    def test_cli_values_replace_file_values(self, tmp_path: Path) -> None:
        cfg = load_config(CONFIGS / "small_gaussian.toml", scenario="energy_drift", out_dir=tmp_path / "other")
        assert cfg.scenario == "energy_drift"
        assert cfg.out_dir == tmp_path / "other"

    def test_dotted_overrides(self, tmp_path: Path) -> None:
        cfg = load_config(
            CONFIGS / "small_gaussian.toml",
            ["grid.n=32", "solver.terminal_closure=false", "initial_state.family=two_gaussians", "seed=7"],
            out_dir=tmp_path,
        )
        assert cfg.grid.n == 32
        assert cfg.solver.terminal_closure is False
        assert cfg.initial_state.family == "two_gaussians"
        assert cfg.seed == 7

    def test_missing_file_is_an_io_error(self, tmp_path: Path) -> None:
        with pytest.raises(OSError):
            load_config(tmp_path / "absent.toml", out_dir=tmp_path)

    def test_toml_syntax_error_has_reason(self, tmp_path: Path) -> None:
        path = tmp_path / "broken.toml"
        path.write_text("[grid\nn = 16\n")
        with pytest.raises(ConfigError) as info:
            load_config(path, scenario="fixed_point", out_dir=tmp_path)
        assert info.value.reason == "toml_syntax"

    def test_relative_dump_path_follows_config_file(self, tmp_path: Path) -> None:
        path = tmp_path / "dump.toml"
        path.write_text('[initial_state]\nfamily = "dump"\ndump_path = "w_plus.fld"\n')
        cfg = load_config(path, scenario="fixed_point", out_dir=tmp_path / "out")
        assert cfg.initial_state.dump_path == tmp_path / "w_plus.fld"


class TestEnvironment:
    def test_workers_default_from_environment(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.delenv("MSSCATTER_WORKERS", raising=False)
        assert load_config(CONFIGS / "vacuum.toml", out_dir=tmp_path).solver.workers == 4
        monkeypatch.setenv("MSSCATTER_WORKERS", "2")
        assert load_config(CONFIGS / "vacuum.toml", out_dir=tmp_path).solver.workers == 2

    def test_explicit_workers_win(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("MSSCATTER_WORKERS", "2")
        cfg = load_config(CONFIGS / "vacuum.toml", ["solver.workers=1"], out_dir=tmp_path)
        assert cfg.solver.workers == 1

    def test_out_root_prefixes_relative_dirs(self, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("MSSCATTER_OUT_ROOT", str(tmp_path))
        cfg = load_config(CONFIGS / "vacuum.toml", out_dir="runs/a")
        assert cfg.out_dir == tmp_path / "runs" / "a"
        absolute = load_config(CONFIGS / "vacuum.toml", out_dir=tmp_path / "b")
        assert absolute.out_dir == tmp_path / "b"


class TestValidation:
    @pytest.mark.parametrize(
        "overrides, reason",
        [
            (["physics.beta=0.2"], "beta_alpha_constraint"),
            (["physics.beta=0.6"], "invalid_config"),
            (["physics.alpha=1.0"], "invalid_config"),
            (["time.T=1.5"], "time_floor"),
            (["time.T_max=10.0"], "time_window"),
            (["grid.spacing=0.5"], "invalid_config"),
            (["grid.n=12"], "invalid_config"),
        ],
    )
    def test_violations_carry_reason(self, tmp_path: Path, overrides, reason: str) -> None:
        with pytest.raises(ConfigError) as info:
            load_config(CONFIGS / "small_gaussian.toml", overrides, out_dir=tmp_path)
        assert info.value.reason == reason

    def test_decay_suite_needs_a_fit_decade(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError) as info:
            load_config(CONFIGS / "small_gaussian.toml", ["time.T_max=200.0"], scenario="decay_suite", out_dir=tmp_path)
        assert info.value.reason == "decay_window"
        cfg = load_config(CONFIGS / "small_gaussian.toml", scenario="decay_suite", out_dir=tmp_path)
        assert cfg.time.T_max / cfg.time.T >= 10.0

    def test_crosscheck_t0_inside_window(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError) as info:
            load_config(
                CONFIGS / "vacuum.toml", ["diagnostics.t0_factor=500.0"],
                scenario="finite_t0_crosscheck", out_dir=tmp_path,
            )
        assert info.value.reason == "t0_outside_window"

    def test_unknown_scenario_rejected(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            load_config(CONFIGS / "vacuum.toml", scenario="sweep", out_dir=tmp_path)


class TestOverrides:
    def test_values_parse_as_toml(self) -> None:
        assert parse_override("grid.n=32") == (["grid", "n"], 32)
        assert parse_override("time.rho = 1.5") == (["time", "rho"], 1.5)
        assert parse_override("initial_state.center=[1.0, 0.0, 0.0]")[1] == [1.0, 0.0, 0.0]
        assert parse_override('initial_state.family="gaussian"')[1] == "gaussian"

    def test_bare_words_stay_strings(self) -> None:
        assert parse_override("physics.variant=closed_form")[1] == "closed_form"

    @pytest.mark.parametrize("text", ["grid.n", "grid..n=3", "=3"])
    def test_malformed_overrides(self, text: str) -> None:
        with pytest.raises(ConfigError) as info:
            parse_override(text)
        assert info.value.reason == "override_syntax"

    def test_cannot_descend_into_scalar(self) -> None:
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 1}, ["seed.inner=2"])


class TestProvenance:
    def test_hash_ignores_out_dir(self, tmp_path: Path) -> None:
        a = load_config(CONFIGS / "vacuum.toml", out_dir=tmp_path / "a")
        b = load_config(CONFIGS / "vacuum.toml", out_dir=tmp_path / "b")
        assert a.config_hash() == b.config_hash()

    def test_hash_tracks_content(self, tmp_path: Path) -> None:
        a = load_config(CONFIGS / "vacuum.toml", out_dir=tmp_path)
        b = load_config(CONFIGS / "vacuum.toml", ["seed=3"], out_dir=tmp_path)
        assert a.config_hash() != b.config_hash()

    def test_archived_toml_reloads_to_same_config(self, small_config: RunConfig) -> None:
        again = RunConfig.model_validate(tomllib.loads(small_config.to_toml()))
        assert again == small_config
        assert again.config_hash() == small_config.config_hash()

    def test_dump_toml_writes_top_level_keys_first(self) -> None:
        text = dump_toml({"grid": {"n": 8}, "seed": 2, "scenario": "identities"})
        assert text.index("seed = 2") < text.index("[grid]")
        assert tomllib.loads(text) == {"grid": {"n": 8}, "seed": 2, "scenario": "identities"}
