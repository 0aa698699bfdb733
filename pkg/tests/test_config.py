import logging

import pytest

from clefbench import config, utilities
from clefbench.errors import ArtifactError, ValidationError
from clefbench.experiment import ExperimentConfig, config_hash, load_experiment_config


def test_example_config_matches_defaults():
    assert load_experiment_config(None) == ExperimentConfig()


def test_get_bool_and_list():
    assert config.get_bool("yes") is True
    assert config.get_bool("Off") is False
    with pytest.raises(ValidationError):
        config.get_bool("maybe")
    assert config.get_list("0, 1,, 2", int) == [0, 1, 2]
    with pytest.raises(ValidationError):
        config.get_list("0, x", int)


def test_section_values(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[model]\nwidth=12\n[train]\nepochs=3\nspeed=fast\n")
    parser = config.create_config(str(path))
    assert config.section_values(parser, "model", {"width": int, "depth": int}) == {"width": 12}
    assert config.section_values(parser, "bias", {"beta": float}) == {}
    with pytest.raises(ValidationError):
        config.section_values(parser, "train", {"epochs": int})


def test_bad_value_is_validation_error(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nepochs=many\n")
    with pytest.raises(ValidationError):
        load_experiment_config(str(path))
    path.write_text("[experiment]\ntest_split=sideways\n")
    with pytest.raises(ValidationError):
        load_experiment_config(str(path))


def test_prior_map_parsing(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(
        "[bias]\nnum_classes=4\nnum_context_types=2\nprior_map=0 1 | 2 3 1\npreferred=1, 3\n"
    )
    cfg = load_experiment_config(str(path))
    assert cfg.bias.prior_map == ((0, 1), (2, 3, 1))
    assert cfg.bias.preferred == (1, 3)


def test_config_file_lookup(tmp_path, monkeypatch):
    explicit = tmp_path / "mine.ini"
    explicit.write_text("")
    assert config.get_config_file(str(explicit)) == str(explicit)
    with pytest.raises(ValidationError):
        config.get_config_file(str(tmp_path / "absent.ini"))
    monkeypatch.setenv("CLEFBENCH_CONFIG", str(explicit))
    assert config.get_config_file() == str(explicit)


def test_default_config_is_copied(tmp_path, monkeypatch):
    monkeypatch.delenv("CLEFBENCH_CONFIG", raising=False)
    target = tmp_path / "home" / "config.ini"
    monkeypatch.setattr(config, "config_path", str(target.parent))
    monkeypatch.setattr(config, "DEFAULT_CONFIG_FILE", str(target))
    assert config.get_config_file() == str(target)
    assert target.read_text() == open(config.EXAMPLE_CONFIG_FILE).read()


def test_config_hash_ignores_placement():
    cfg = ExperimentConfig()
    moved = cfg.with_overrides(out="elsewhere", seed=7, workers=3)
    assert config_hash(moved) == config_hash(cfg)
    assert config_hash(cfg.with_overrides(epochs=5)) != config_hash(cfg)


def test_overrides():
    cfg = ExperimentConfig().with_overrides(mode="no_mask", test_split="decorrelated")
    assert cfg.train.mode == "clef" and cfg.test_split == "decorrelated"
    with pytest.raises(ValidationError):
        ExperimentConfig().with_overrides(mode="fancy")
    with pytest.raises(ValidationError):
        ExperimentConfig().with_overrides(workers=0)


def test_setup_logging_writes_file(tmp_path):
    config.setup_logging(str(tmp_path), debug=True)
    logging.getLogger("EXPT").debug("hello log")
    for h in logging.getLogger("").handlers:
        h.flush()
    assert "hello log" in (tmp_path / config.LOG_NAME).read_text()


def test_utilities():
    assert utilities.naturalsize(300) == "300B"
    assert utilities.naturalsize(2048) == "2.0K"
    assert utilities.naturalsize(3 * 1024 ** 2) == "3.0M"
    assert utilities.stable_hash({"b": 1, "a": [1, 2]}) == utilities.stable_hash({"a": [1, 2], "b": 1})
    assert len(utilities.stable_hash("x")) == 16
    table = utilities.format_table(["name", "v"], [["a", 0.5], ["bb", None]])
    assert [line.rstrip() for line in table.splitlines()] == [
        "name  v", "----  ------", "a     0.5000", "bb    -"
    ]


def test_json_helpers(tmp_path):
    import numpy as np

    path = utilities.write_json(str(tmp_path / "d" / "x.json"), {"v": np.arange(3)})
    assert utilities.read_json(path) == {"v": [0, 1, 2]}
    with pytest.raises(ArtifactError):
        utilities.read_json(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ArtifactError):
        utilities.read_json(str(bad))
