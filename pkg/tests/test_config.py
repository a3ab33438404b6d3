from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfdba.config import (ConfigError, DatasetSpec, format_value, load_dataset_spec,
                          load_run_config, parse_value)
from mfdba.factors import Combined, Oracle, Scheduled
from mfdba.synth import SceneSpec, TrajectorySpec

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_encoding_round_trip(x):
    assert parse_value(format_value(x), 0.0) == x


@pytest.mark.parametrize("v", [True, False, 3, (0.5, 0.25), ((0, 0, 0, 0), (1, 2, 3, 4)), "abc"])
def test_value_round_trip(v):
    assert parse_value(format_value(v), v) == v


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_value("maybe", True)
    with pytest.raises(ConfigError):
        parse_value("1.5", 3)


def test_dataset_round_trip(tmp_path):
    spec = DatasetSpec(TrajectorySpec(kind="lissajous", duration=2.5),
                       SceneSpec(outlier_fraction=0.15, feature_noise=0.02)).with_seed(42)
    p = tmp_path / "d.ini"
    p.write_text(spec.dumps())
    back = load_dataset_spec(p)
    assert back == spec
    assert back.dumps() == spec.dumps()


def test_seed_derivation_and_cli_seed(tmp_path):
    p = tmp_path / "d.ini"
    p.write_text("[dataset]\nseed = 5\n")
    a = load_dataset_spec(p)
    assert (a.trajectory.seed, a.scene.seed, a.noise.seed) == (5, 6, 7)
    assert load_dataset_spec(p, seed=9).seed == 9


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "d.ini"
    p.write_text("[trajectory]\nduration = 2.0\n")
    spec = load_dataset_spec(p, overrides=["trajectory.duration=4.0", "scene.pixel_noise=1"])
    assert spec.trajectory.duration == 4.0 and spec.scene.pixel_noise == 1.0


@pytest.mark.parametrize("text", [
    "[trajectory]\nspeed = 3\n",
    "[bogus]\nx = 1\n",
    "[dataset]\nflavor = x\n",
    "[scene]\nseed = 3\n",
    "[trajectory]\nkind = zigzag\n",
    "[dataset]\nstride = 0\n",
    "not an ini file",
])
def test_dataset_errors(tmp_path, text):
    p = tmp_path / "d.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_dataset_spec(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset_spec(tmp_path / "nope.ini")


def test_directory_reads_manifest(tmp_path):
    (tmp_path / "manifest.ini").write_text("[dataset]\nseed = 3\n")
    assert load_dataset_spec(tmp_path).seed == 3


def test_shipped_configs_load():
    d = load_dataset_spec(CONFIGS / "dataset.ini")
    assert d.seed == 7 and d.trajectory.kind == "lissajous"
    r = load_run_config(CONFIGS / "run.ini")
    assert r.factors.reproj and r.factors.featmetric and r.factors.inertial
    assert isinstance(r.provider_instance(), Combined)
    assert r.pipeline.window.flow_threshold == 0.3


def test_run_round_trip(tmp_path):
    cfg = load_run_config(CONFIGS / "run.ini", overrides=["lm.max_iter=7"])
    p = tmp_path / "r.ini"
    p.write_text(cfg.dumps())
    back = load_run_config(p)
    assert back.pipeline == cfg.pipeline
    assert back.pipeline.lm.max_iter == 7
    assert back.provider_params == cfg.provider_params


def test_run_defaults_and_provider():
    cfg = load_run_config(overrides=["run.provider=scheduled", "run.outlier_oracle=false",
                                     "provider.ratio=1.2"])
    prov = cfg.provider_instance()
    assert isinstance(prov, Scheduled) and prov.ratio == 1.2
    assert isinstance(load_run_config(overrides=["run.provider=oracle"]).provider_instance(),
                      Oracle)


@pytest.mark.parametrize("ov", [
    ["run.reproj=false", "run.featmetric=false"],
    ["run.mode=lidar"],
    ["run.provider=psychic"],
    ["run.colour=red"],
    ["provider.gamma=3"],
    ["pipeline.mode=mono"],
    ["window.size=x"],
    ["nodot=1"],
    ["lm.nope=1"],
])
def test_run_errors(ov):
    with pytest.raises(ConfigError):
        load_run_config(overrides=ov)


def test_world_from_spec_is_deterministic():
    spec = DatasetSpec(TrajectorySpec(duration=1.0)).with_seed(3)
    a, b = spec.world(), spec.world()
    assert np.array_equal(a.depths, b.depths)


def test_provider_cap_is_a_config_error():
    with pytest.raises(ConfigError):
        load_run_config(overrides=["provider.ratio=5.0"])
