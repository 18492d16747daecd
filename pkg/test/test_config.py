import os
import tempfile
from unittest import TestCase
from unittest.mock import patch

import simplejson

from spacedecode.config_handling import (DecodeConfig, ModelConfig, RunConfig, SamplingConfig, SamplingMode,
                                         SarSftConfig, VerificationMode)
from spacedecode.exceptions import SpaceInvalidConfig


class TestConfiguration(TestCase):

    def setUp(self) -> None:
        self.tempdir = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        self.tempdir.cleanup()

    def write_config(self, document) -> str:
        path = os.path.join(self.tempdir.name, "config.json")
        with open(path, "w", encoding="utf-8") as fp:
            if isinstance(document, str):
                fp.write(document)
            else:
                simplejson.dump(document, fp)
        return path

    def test_defaults_without_file(self):
        config = RunConfig()
        assert config.model == ModelConfig()
        assert config.model.eos_token_id == config.model.vocab_size - 2
        assert config.model.mask_token_id == config.model.vocab_size - 1
        assert config.decode.k == 5
        assert config.decode.sampling.is_greedy
        assert config.decode.verification == VerificationMode.GREEDY_MATCH
        assert config.sarsft.p_ar == 0.5
        assert config.sarsft.schedule == "cosine"
        assert config.source == "Default config"

    def test_empty_file_takes_defaults(self):
        config = RunConfig(self.write_config({}))
        assert config.decode == DecodeConfig()
        assert config.sarsft == SarSftConfig()

    def test_sections_are_read(self):
        config = RunConfig(self.write_config({
            "model": {"vocab_size": 10, "d_model": 24, "n_heads": 3},
            "decode": {"k": 3, "sampling": "stochastic", "top_p": 0.9, "top_k": 0},
            "sarsft": {"k": 3, "p_ar": 1.0, "epochs": 4},
            "paths": {"checkpoint": "~/model.spc"},
        }))
        assert config.model.vocab_size == 10
        assert config.model.mask_token_id == 9
        assert config.model.eos_token_id == 8
        assert config.model.head_dim == 8
        assert config.decode.sampling.mode == SamplingMode.STOCHASTIC
        assert config.decode.verification == VerificationMode.LOSSLESS_RESIDUAL
        assert config.decode.sampling.top_p == 0.9
        assert config.sarsft.is_plain_sft
        assert config.paths.checkpoint == os.path.expanduser("~/model.spc")

    def test_unknown_parameter_rejected(self):
        with self.assertRaises(SpaceInvalidConfig) as err:
            RunConfig(self.write_config({"decode": {"kk": 3}}))
        assert "unknown parameters" in str(err.exception)

    def test_unknown_section_rejected(self):
        with self.assertRaises(SpaceInvalidConfig):
            RunConfig(self.write_config({"decoder": {}}))

    def test_bad_types_rejected(self):
        for document in ({"model": {"d_model": "32"}}, {"decode": {"top_p": "high"}},
                         {"sarsft": {"epochs": True}}, {"decode": {"sampling": 1}}):
            with self.assertRaises(SpaceInvalidConfig):
                RunConfig(self.write_config(document))

    def test_invariants_enforced(self):
        for document in ({"model": {"d_model": 30, "n_heads": 4}},
                         {"model": {"mask_token_id": 3, "eos_token_id": 3}},
                         {"model": {"vocab_size": 8, "eos_token_id": 9}},
                         {"sarsft": {"p_ar": 1.5}},
                         {"sarsft": {"schedule": "linear"}},
                         {"decode": {"sampling": "greedy", "verification": "lossless-residual"}},
                         {"decode": {"sampling": "stochastic", "verification": "greedy-match"}}):
            with self.assertRaises(SpaceInvalidConfig):
                RunConfig(self.write_config(document))

    def test_malformed_json(self):
        with self.assertRaises(SpaceInvalidConfig):
            RunConfig(self.write_config("{ not json"))

    @patch("spacedecode.config_handling.os.path.exists", return_value=False)
    def test_missing_file(self, _exists):
        with self.assertRaises(SpaceInvalidConfig) as err:
            RunConfig("/path/to/config.json")
        assert "does not exist" in str(err.exception)

    def test_directory_rejected(self):
        with self.assertRaises(SpaceInvalidConfig):
            RunConfig(self.tempdir.name)

    def test_overrides_win(self):
        config = RunConfig(self.write_config({"decode": {"k": 2}, "sarsft": {"p_ar": 0.3}}))
        config.apply_overrides("decode", k=4, seed=None)
        config.apply_overrides("sarsft", p_ar=1.0)
        assert config.decode.k == 4
        assert config.sarsft.p_ar == 1.0

    def test_sampling_override_switches_verification(self):
        config = RunConfig()
        config.apply_overrides("decode", sampling="stochastic", temperature=0.7)
        assert config.decode.verification == VerificationMode.LOSSLESS_RESIDUAL
        assert config.decode.sampling.temperature == 0.7
        config.apply_overrides("decode", verification="paper-literal")
        assert config.decode.verification == VerificationMode.PAPER_LITERAL

    def test_invalid_override_rejected(self):
        config = RunConfig()
        with self.assertRaises(SpaceInvalidConfig):
            config.apply_overrides("decode", k=0)
        with self.assertRaises(SpaceInvalidConfig):
            config.apply_overrides("decode", beam=3)

    def test_mode_parsing(self):
        assert VerificationMode.from_string("lossless_residual") == VerificationMode.LOSSLESS_RESIDUAL
        assert VerificationMode.from_string("Greedy-Match") == VerificationMode.GREEDY_MATCH
        assert SamplingMode.from_string("sample") == SamplingMode.STOCHASTIC
        with self.assertRaises(SpaceInvalidConfig):
            VerificationMode.from_string("exact")

    def test_untruncated_sampling(self):
        sampling = SamplingConfig.untruncated()
        assert not sampling.is_greedy
        assert sampling.top_k == 0 and sampling.top_p == 1.0 and sampling.temperature == 1.0

    def test_model_config_round_trip(self):
        config = ModelConfig(vocab_size=12, mask_token_id=11, eos_token_id=10)
        assert ModelConfig.from_dict(config.to_dict()) == config
        assert config.content_tokens == list(range(10))
