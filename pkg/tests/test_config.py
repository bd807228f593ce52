import pytest

from crtlab import config as cf
from crtlab.generator import GeneratorConfig
from crtlab.pipeline import ExperimentConfig, desk_config
from crtlab.tokenizer import TokenizerConfig


def test_parse_values():
    assert cf.parse_value("3") == 3
    assert cf.parse_value("2.5e-4") == 2.5e-4
    assert cf.parse_value("TRUE") is True
    assert cf.parse_value("[8, 8, 4]") == [8, 8, 4]
    assert cf.parse_value("vq") == "vq"
    assert cf.parse_value("null") is None


def test_config_text_round_trip():
    cfg = TokenizerConfig().with_overrides({"crt.enabled": True, "quantizer.fsq_levels": [4, 4]})
    text = cf.dump_config_text(cfg)
    assert text.startswith("version = 1\n")
    assert "crt.enabled = true" in text
    back = TokenizerConfig().with_overrides(cf.parse_config_text(text))
    assert back == cfg
    assert cf.config_hash(back) == cf.config_hash(cfg)


def test_parse_config_text_comments_and_errors():
    assert cf.parse_config_text("# hi\nversion = 1\na.b = 2  # trailing\n\n") == {"a.b": 2}
    with pytest.raises(cf.ConfigError, match="version"):
        cf.parse_config_text("version = 2\n")
    with pytest.raises(cf.ConfigError, match="line 1"):
        cf.parse_config_text("no equals sign\n")
    with pytest.raises(cf.ConfigError):
        cf.parse_overrides(["novalue"])


def test_overrides_coerce_and_validate():
    cfg = TokenizerConfig().with_overrides({"lr": 1, "widths": [8, 16], "crt.layers": 4.0})
    assert cfg.lr == 1.0 and isinstance(cfg.lr, float)
    assert cfg.widths == (8, 16) and cfg.crt.layers == 4
    for bad in ({"nope": 1}, {"crt.nope": 1}, {"crt": 1}, {"crt.layers": 2.5}, {"crt.enabled": "yes"},
                {"widths": 3}, {"missing.section": 1}):
        with pytest.raises(cf.ConfigError):
            TokenizerConfig().with_overrides(bad)


def test_crt_lambda_alias():
    cfg = TokenizerConfig().with_overrides({"crt.enabled": True, "crt.lambda": 2.0})
    assert cfg.crt.lam == 2.0
    assert cf.parse_overrides(["crt.lambda=4.0"]) == {"crt.lambda": 4.0}


def test_overrides_do_not_mutate_original():
    base = TokenizerConfig()
    base.with_overrides({"crt.enabled": True})
    assert base.crt.enabled is False


def test_config_hash_changes_with_values():
    assert cf.config_hash(GeneratorConfig()) != cf.config_hash(GeneratorConfig(layers=4))


def test_experiment_resolution():
    cfg = desk_config({"tokenizer.quantizer.codebook_size": 64, "corpus.classes": 5}).resolved()
    assert cfg.generator.vocab_size == 64
    assert cfg.generator.num_classes == 5
    assert cfg.generator.seq_len == 16
    side = desk_config({"eval.token_side": 48}).resolved()
    assert side.generator.seq_len == 36
    fsq = ExperimentConfig().with_overrides({"tokenizer.quantizer.mode": "fsq"}).resolved()
    assert fsq.generator.vocab_size == 256
    with pytest.raises(ValueError):
        desk_config({"eval.token_side": 44}).resolved()
