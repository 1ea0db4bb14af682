import math

import pytest

from crossview.config import parse_config, serialize_config
from crossview.errors import ValidationError


class TestDefaults:
    def test_empty_file_yields_training_recipe_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        bundle = parse_config(path)
        assert bundle.sampler.picks_per_anchor == 64
        assert bundle.sampler.pool_size == 128
        assert bundle.sampler.refresh_every == 4
        assert bundle.sampler.batch_size == 128
        assert bundle.train.loss.label_smoothing == 0.1
        assert bundle.train.epochs == 40
        assert bundle.train.lr_max == 0.001
        assert bundle.train.warmup_epochs == 1
        assert math.exp(bundle.train.loss.logit_scale) == pytest.approx(1 / 0.07)

    def test_no_file_same_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        assert parse_config(None) == parse_config(path)


class TestParsing:
    def test_override_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("sampler.picks_per_anchor=32\n")
        bundle = parse_config(path, ["sampler.picks_per_anchor=16"])
        assert bundle.sampler.picks_per_anchor == 16

    def test_odd_picks_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("sampler.picks_per_anchor=3\n")
        with pytest.raises(ValidationError, match="even"):
            parse_config(path)

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("sampler.pool_depth=4\n")
        with pytest.raises(ValidationError, match="sampler.pool_depth"):
            parse_config(path)

    def test_bad_value_reports_key_and_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\ntrain.epochs=forty\n")
        with pytest.raises(ValidationError, match=r"2.*train\.epochs"):
            parse_config(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("just a line\n")
        with pytest.raises(ValidationError, match="key=value"):
            parse_config(path)

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("\n# settings\ntrain.epochs=7\n\n")
        assert parse_config(path).train.epochs == 7

    def test_bools_parsed(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.shared_weights=false\n")
        assert parse_config(path).train.shared_weights is False


class TestRoundTrip:
    def test_serialise_parse_fixed_point(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "synth.n_pairs=500\nsampler.strategy=dss\ntrain.lr_max=0.0025\n"
            "loss.label_smoothing=0.05\ngeo.earth_radius_m=6400000.0\n"
            "train.shared_weights=false\n"
        )
        bundle = parse_config(path)
        text = serialize_config(bundle)
        path2 = tmp_path / "round.cfg"
        path2.write_text(text)
        again = parse_config(path2)
        assert again == bundle
        assert serialize_config(again) == text
