"""Tests for the run configuration and the scale schedule"""
import json

import pytest

from bags.config import RunConfig, ScaleSchedule, Stage, env_defaults
from bags.errors import ConfigError, ScheduleError


class TestSchedule:
    def test_default_plan(self):
        schedule = ScaleSchedule()
        assert [(s.scale, s.kernel_size) for s in schedule.stages] == [(3, 5), (2, 9), (1, 17)]
        assert schedule.total_iterations == 40000
        assert [s.factor for s in schedule.stages] == [4, 2, 1]

    def test_field_of_view_range(self):
        with pytest.raises(ScheduleError):
            ScaleSchedule(stages=[Stage(2, 5, 10), Stage(1, 17, 10)])
        relaxed = ScaleSchedule(stages=[Stage(2, 3, 10), Stage(1, 5, 10)], strict_fov=False)
        assert relaxed.stage_for(1).kernel_size == 5

    def test_scales_must_decrease(self):
        with pytest.raises(ScheduleError):
            ScaleSchedule(stages=[Stage(1, 3, 1), Stage(2, 5, 1)], strict_fov=False)

    def test_kernels_must_grow(self):
        with pytest.raises(ScheduleError):
            ScaleSchedule(stages=[Stage(2, 5, 1), Stage(1, 5, 1)], strict_fov=False)

    def test_even_kernel(self):
        with pytest.raises(ScheduleError):
            ScaleSchedule(stages=[Stage(1, 4, 1)], strict_fov=False)

    def test_empty(self):
        with pytest.raises(ScheduleError):
            ScaleSchedule(stages=[])

    def test_from_lists(self):
        schedule = ScaleSchedule.from_lists([2, 1], [3, 5], [4, 6], warmup_iters=0, strict_fov=False)
        assert schedule.total_iterations == 10
        with pytest.raises(ScheduleError):
            ScaleSchedule.from_lists([2, 1], [3], [4, 6])

    def test_missing_scale(self):
        with pytest.raises(ScheduleError):
            ScaleSchedule().stage_for(4)


class TestRunConfig:
    def test_round_trip_through_json(self, tmp_path):
        config = RunConfig(
            seed=7,
            use_rgbd=False,
            schedule=ScaleSchedule(stages=[Stage(2, 3, 5), Stage(1, 5, 5)], warmup_iters=2, strict_fov=False),
        )
        path = tmp_path / "run" / "config.json"
        config.save(path)
        loaded = RunConfig.load(path)
        assert loaded.to_dict() == config.to_dict()
        assert isinstance(loaded.schedule.stages[0], Stage)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"seed": 1, "learning_rate": 0.1})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.load(path)

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            RunConfig(dtype="float16")
        with pytest.raises(ConfigError):
            RunConfig(background=[0.0, 0.0])
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"lrs": {"positions": -1.0}})

    def test_nested_dicts(self):
        config = RunConfig.from_dict(json.loads('{"weights": {"mask": 0.05}, "densify": {"enabled": false}}'))
        assert config.weights.mask == 0.05
        assert config.weights.photo == 0.8
        assert config.densify.enabled is False


class TestEnvironment:
    def test_reads_bags_variables(self, monkeypatch):
        monkeypatch.setenv("BAGS_SEED", "42")
        monkeypatch.setenv("BAGS_DTYPE", "float32")
        monkeypatch.setenv("BAGS_LOG_LEVEL", "debug")
        monkeypatch.delenv("BAGS_TILE_SIZE", raising=False)
        assert env_defaults() == {"seed": 42, "dtype": "float32", "log_level": "DEBUG"}

    def test_bad_integer(self, monkeypatch):
        monkeypatch.setenv("BAGS_SEED", "many")
        with pytest.raises(ConfigError):
            env_defaults()
