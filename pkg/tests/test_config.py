import numpy as np
import pytest

from config import ConfigError, RunConfig


def test_defaults_are_valid(config):
    assert config.validate()
    assert config.solver.outer == 3
    assert config.map.insert_degenerate is True


def test_text_sets_typed_values():
    config = RunConfig.from_text(
        """
        # comment
        solver.one_pass = true
        solver.max_inner = 7
        lidar.sigma = 0.05   # trailing comment
        sim.preset = rest
        scan.extrinsic_translation = 0.1, 0.0, -0.2
        """
    )
    assert config.solver.one_pass is True
    assert config.solver.max_inner == 7
    assert config.lidar.sigma == 0.05
    assert config.sim.preset == "rest"
    assert config.scan.extrinsic_translation == (0.1, 0.0, -0.2)


def test_dump_round_trip():
    config = RunConfig()
    config.solver.one_pass = True
    config.sim.velocity = (2.0, 0.5, 0.0)
    config.map.voxel_edge = 0.15
    loaded = RunConfig.from_text(config.dump())
    assert loaded == config


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="solver.bogus"):
        RunConfig.from_text("solver.bogus = 1")
    with pytest.raises(ConfigError, match="nosection.x"):
        RunConfig().set("nosection.x", "1")


def test_bad_value_is_named():
    with pytest.raises(ConfigError, match="solver.max_inner"):
        RunConfig.from_text("solver.max_inner = lots")
    with pytest.raises(ConfigError, match="sim.velocity"):
        RunConfig.from_text("sim.velocity = 1, 2")


def test_missing_equals_reports_the_line():
    with pytest.raises(ConfigError, match=":2:"):
        RunConfig.from_text("solver.outer = 2\nsolver.outer 3")


def test_validation_names_the_key():
    config = RunConfig()
    config.lidar.sigma = 0.0
    with pytest.raises(ConfigError, match="lidar.sigma"):
        config.validate()

    config = RunConfig()
    config.features.planar_threshold = 1.0
    with pytest.raises(ConfigError, match="features.edge_threshold"):
        config.validate()


def test_environment_overrides_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("solver.outer = 2\nimu.sigma_acc = 0.02\n")
    config = RunConfig.load(path, environ={"LIO_SOLVER__OUTER": "5", "OTHER": "x"})
    assert config.solver.outer == 5
    assert config.imu.sigma_acc == 0.02


def test_malformed_environment_variable():
    with pytest.raises(ConfigError, match="LIO_SOLVER"):
        RunConfig().apply_env({"LIO_SOLVER": "1"})


def test_invalid_environment_value_fails_validation():
    with pytest.raises(ConfigError, match="solver.max_inner"):
        RunConfig.load(environ={"LIO_SOLVER__MAX_INNER": "0"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read"):
        RunConfig.from_file(tmp_path / "absent.cfg")


def test_extrinsic_transform():
    config = RunConfig.from_text("scan.extrinsic_translation = 1, 2, 3\nscan.extrinsic_rotation = 0, 0, 1.5707963267948966")
    extrinsic = config.scan.extrinsic()
    np.testing.assert_allclose(extrinsic.apply([1.0, 0.0, 0.0]), [1.0, 3.0, 3.0], atol=1e-12)
