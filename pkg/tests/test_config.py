import json

import pytest

from simembed import config
from simembed.errors import ConfigError
from simembed.losses import AngularConfig, ContrastiveConfig


class TestDefaults:
    def test_empty_document_gives_all_defaults(self):
        run = config.parse_run_config("{}")
        assert run.net.final_embed_dim == 64
        assert run.net.input_shape == (1, 28, 28)
        assert run.sampler.n_candidates == 100
        assert run.sampler.in_class_fraction == 0.3
        assert run.train.learning_rate == 1e-4
        assert isinstance(run.train.loss, ContrastiveConfig)
        assert run.metric.exponent == 0.25
        assert run.scorer.kind == "intensity_histogram"

    def test_accepts_decoded_mapping(self):
        assert config.parse_run_config({}) == config.parse_run_config("{}")


class TestOverrides:
    def test_scalar_overrides_land(self):
        run = config.parse_run_config(json.dumps({
            "train": {"learning_rate": 0.5, "epochs": 3,
                      "augmentation": ["hflip", "shift"]},
            "sampler": {"n_candidates": 7, "strategy": "random_baseline"},
            "metric": {"exponent": 0.5},
        }))
        assert run.train.learning_rate == 0.5
        assert run.train.epochs == 3
        assert run.train.augmentation == frozenset({"hflip", "shift"})
        assert run.sampler.n_candidates == 7
        assert run.sampler.strategy == "random_baseline"
        assert run.metric.exponent == 0.5

    def test_loss_kind_contrastive(self):
        run = config.parse_run_config(json.dumps({
            "train": {"loss": {"kind": "contrastive", "margin": 2.0,
                               "hinge_variant": "squared_hinge"}}}))
        assert run.train.loss == ContrastiveConfig(2.0, "squared_hinge")

    def test_loss_kind_angular(self):
        run = config.parse_run_config(json.dumps({
            "train": {"loss": {"kind": "angular", "alpha_degrees": 30.0}}}))
        assert run.train.loss == AngularConfig(30.0)

    def test_unknown_loss_kind_rejected(self):
        with pytest.raises(ConfigError, match="kind"):
            config.parse_run_config(
                '{"train": {"loss": {"kind": "pull-push"}}}')

    def test_nested_branches_build_custom_net(self):
        run = config.parse_run_config(json.dumps({"net": {
            "input_shape": [1, 8, 8],
            "final_embed_dim": 6,
            "branches": [
                {"input_downsample_factor": 1,
                 "conv_layers": [{"filters": 2, "kernel": 3,
                                  "padding": 1, "pool_after": True}],
                 "branch_embed_dim": 8},
                {"input_downsample_factor": 2,
                 "conv_layers": [{"filters": 2, "kernel": 3, "padding": 1}],
                 "branch_embed_dim": 4},
            ]}}))
        assert run.net.final_embed_dim == 6
        assert len(run.net.branches) == 2
        assert run.net.branches[0].conv_layers[0].pool_after is True

    def test_scorer_section_nested_in_sampler(self):
        run = config.parse_run_config(json.dumps({
            "sampler": {"scorer": {"kind": "color_histogram",
                                   "bins": 32}}}))
        assert run.scorer.kind == "color_histogram"
        assert run.scorer.bins == 32


class TestUnknownKeys:
    def test_single_unknown_top_key(self):
        with pytest.raises(ConfigError, match="unknown config keys: extra"):
            config.parse_run_config('{"extra": 1}')

    def test_all_offenders_listed_as_dotted_paths(self):
        doc = {
            "net": {"final_embed_dim": 8, "bogus_a": 1},
            "train": {"bogus_b": 2, "loss": {"kind": "contrastive",
                                             "bogus_c": 3}},
            "sampler": {"bogus_d": 4},
            "metric": {"bogus_e": 5},
            "bogus_top": 6,
        }
        with pytest.raises(ConfigError) as err:
            config.parse_run_config(json.dumps(doc))
        message = str(err.value)
        for path in ("net.bogus_a", "train.bogus_b", "train.loss.bogus_c",
                     "sampler.bogus_d", "metric.bogus_e", "bogus_top"):
            assert path in message

    def test_offenders_sorted(self):
        with pytest.raises(ConfigError) as err:
            config.parse_run_config('{"zzz": 1, "aaa": 2}')
        message = str(err.value)
        assert message.index("aaa") < message.index("zzz")

    def test_branch_level_unknown_key_has_index_in_path(self):
        doc = {"net": {"branches": [
            {"input_downsample_factor": 1,
             "conv_layers": [{"filters": 2, "kernel": 3, "oops": 1}],
             "branch_embed_dim": 4}]}}
        with pytest.raises(ConfigError,
                           match=r"net\.branches\[0\]\.conv_layers\[0\]"
                                 r"\.oops"):
            config.parse_run_config(json.dumps(doc))


class TestMalformedInput:
    def test_invalid_json_is_config_error(self):
        with pytest.raises(ConfigError, match="JSON"):
            config.parse_run_config("{not json")

    def test_non_object_root_rejected(self):
        with pytest.raises(ConfigError):
            config.parse_run_config("[1, 2]")

    def test_non_object_section_rejected(self):
        with pytest.raises(ConfigError):
            config.parse_run_config('{"train": 5}')

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text('{"train": {"epochs": 2}}')
        run = config.load_run_config(str(path))
        assert run.train.epochs == 2
