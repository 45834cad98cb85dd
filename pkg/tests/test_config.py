import pytest

from hapfuse.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.model.horizon == cfg.model.H + 1
    assert cfg.world.action_dim == 7 and cfg.world.proprio_dim == 7
    assert cfg.world.block_size * cfg.world.control_rate == cfg.world.sample_rate


def test_text_round_trip():
    cfg = RunConfig().with_(model={"D": 32, "fusion": "concat_ps"}, train={"lr": 3e-4})
    assert parse_config(cfg.to_text()) == cfg
    assert parse_config(cfg.to_text()).digest() == cfg.digest()


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[model]\nD = 16  # small\n[world]\ntask = latch\n")
    cfg = load_config(path)
    assert cfg.model.D == 16
    assert cfg.world.task == "latch"
    assert cfg.train == RunConfig().train


@pytest.mark.parametrize("text, key", [
    ("[modle]\nD = 3\n", "modle.D"),
    ("[model]\nDD = 3\n", "model.DD"),
    ("[model]\nD = many\n", "model.D"),
    ("[model]\nfusion = late\n", "model.fusion"),
    ("[train]\nsteps = -1\n", "train.steps"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_with_rejects_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig().with_(model={"width": 3})
