import pytest

from lafasr.config import Config, ConfigError, dump_config, load_config, parse_config


def test_defaults_round_trip():
    cfg = Config()
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


def test_parse_with_comments_and_types():
    cfg = parse_config("# comment\nencoder.d_model = 32  # inline\nfeatures.spec_augment = false\n"
                       "synth.len_range = 2, 5\ntrain.lr = 1e-3\n")
    assert cfg.encoder.d_model == 32 and cfg.features.spec_augment is False
    assert cfg.synth.len_range == (2, 5) and cfg.train.lr == 1e-3


@pytest.mark.parametrize("text", ["encoder.d_modle = 3", "nosuch.key = 1", "encoder.d_model = abc", "just text"])
def test_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_none_is_default():
    assert dump_config(load_config(None)) == dump_config(Config())


def test_copy_is_independent():
    a = Config()
    b = a.copy()
    b.encoder.d_model = 8
    assert a.encoder.d_model == 64
