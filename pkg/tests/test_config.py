"""Run-configuration parsing: strict keys, invariants, roundtrip."""

import pytest

from ssmdet.config import ConfigError, RunConfig, load_config, save_config


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg == RunConfig()
    assert cfg.lr_initial == 0.01
    assert cfg.lr_final == 0.0001
    assert cfg.momentum == 0.937
    assert cfg.warmup_epochs == 3
    assert cfg.input_size == 640


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path)


def test_indivisible_input_size_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("input_size = 641\n")
    with pytest.raises(ConfigError, match="divisible by 32"):
        load_config(path)


def test_lr_ordering_enforced(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("lr_initial = 0.0001\nlr_final = 0.01\n")
    with pytest.raises(ConfigError, match="smaller than"):
        load_config(path)


def test_duplicate_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(path)


def test_type_errors_name_the_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs = soon\n")
    with pytest.raises(ConfigError, match="epochs"):
        load_config(path)


def test_comments_and_blank_lines_ignored(tmp_path):
    path = tmp_path / "ok.cfg"
    path.write_text("# comment\n\nseed = 5  # trailing\n")
    assert load_config(path).seed == 5


def test_save_load_roundtrip_is_identity(tmp_path):
    cfg = RunConfig(scale="s", seed=11, batch_size=4, epochs=7,
                    input_size=160, width_override=0.125, out_dir="x/y")
    path = tmp_path / "run.cfg"
    save_config(cfg, path)
    assert path.read_text().startswith("version = 1")
    assert load_config(path) == cfg


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "v9.cfg"
    path.write_text("version = 9\n")
    with pytest.raises(ConfigError, match="version"):
        load_config(path)
