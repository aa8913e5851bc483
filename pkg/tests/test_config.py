"""Config parsing and serialization tests."""

from __future__ import annotations

import pytest

from vqsplit.config import ConfigError, RunConfig, load_config, parse_config_text


class TestDefaults:
    def test_geometry(self):
        cfg = RunConfig()
        assert cfg.grid_size == 8
        assert cfg.total_tokens == 64
        assert cfg.num_classes == 8

    def test_subconfigs_consistent(self):
        cfg = RunConfig()
        tok = cfg.tokenizer_config()
        enc = cfg.encoder_config()
        assert tok.grid_h * tok.grid_w == enc.max_tokens
        assert tok.codebook_size == enc.vocab

    def test_bad_geometry_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(image_size=30)

    def test_bad_k_range_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(k_min=32, k_max=16)
        with pytest.raises(ConfigError):
            RunConfig(k_max=65)

    def test_bad_transport_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(transport="pigeon")


class TestParsing:
    def test_roundtrip_through_text(self):
        cfg = RunConfig(seed=9, lr=1e-3, enc_widths=(16, 32), k_min=4,
                        fill_dropped=True, transport="socket")
        again = parse_config_text(cfg.to_text())
        assert again == cfg

    def test_comments_and_blanks(self):
        text = """
        # optimizer
        lr = 0.001   # comment after value

        seed = 5
        """
        cfg = parse_config_text(text)
        assert cfg.lr == 0.001 and cfg.seed == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_text("warp_speed = 9")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just some words")

    def test_bad_int_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("seed = fast")

    def test_bool_spellings(self):
        assert parse_config_text("fill_dropped = yes").fill_dropped is True
        assert parse_config_text("fill_dropped = 0").fill_dropped is False
        with pytest.raises(ConfigError):
            parse_config_text("fill_dropped = maybe")

    def test_tuple_field(self):
        cfg = parse_config_text("enc_widths = 16, 32\nimage_size = 32")
        assert cfg.enc_widths == (16, 32)

    def test_base_overlay(self):
        base = RunConfig(seed=3, lr=0.01)
        cfg = parse_config_text("lr = 0.5", base=base)
        assert cfg.seed == 3 and cfg.lr == 0.5

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("batch_size = 8\n")
        assert load_config(path).batch_size == 8
