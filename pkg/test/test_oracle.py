import csv
import math
import os
import tempfile
import unittest
from unittest import TestCase
from unittest.mock import patch

import simplejson

from spacedecode.exceptions import SpaceGuardExceeded, SpaceInvalidConfig
from spacedecode.model import ModelParams
from spacedecode.oracle import (SequenceDistribution, ar_sampler, empirical_distribution, equivalence_report,
                                exact_ar_distribution, greedy_cross_check, space_sampler, tv_distance,
                                write_equivalence_csv, write_equivalence_json)
from test.model_fixtures import SLOW_TESTS, constant_model, random_model, successor_model


def drifting_draft_model(drafted: int = 0) -> ModelParams:
    """
    Every real token predicts a uniform distribution over the non-mask tokens; mask slots always draft `drafted`.
    """
    params = successor_model({}, mask_prediction=drafted, vocab_size=6)
    config = params.config
    weight = 10.0
    params["head.weight"].value[:] = 0.0
    params["head.weight"].value[config.mask_token_id, drafted] = weight
    # cancels the normalized off-index activation seen by real-token rows
    params["head.bias"].value[0, drafted] = weight / math.sqrt(config.d_model - 1)
    return params


class TestExactDistribution(TestCase):

    def test_sums_to_one(self):
        params = random_model(seed=2, vocab_size=6)
        exact = exact_ar_distribution(params, [0, 1], horizon=3)
        assert math.isclose(exact.total(), 1.0, rel_tol=1e-9)
        assert all(len(seq) <= 3 for seq in exact.probs)
        assert all(params.config.eos_token_id not in seq for seq in exact.probs)
        assert all(params.config.mask_token_id not in seq for seq in exact.probs)

    def test_constant_models(self):
        assert exact_ar_distribution(constant_model(token=2), [0], horizon=2).probs == {(2, 2): 1.0}
        assert exact_ar_distribution(constant_model(token=6), [0], horizon=2).probs == {(): 1.0}

    def test_uniform_model(self):
        exact = exact_ar_distribution(drifting_draft_model(), [1], horizon=2)
        assert math.isclose(exact[()], 0.2, rel_tol=1e-4)
        assert math.isclose(exact[(3,)], 0.04, rel_tol=1e-4)
        assert math.isclose(exact[(0, 3)], 0.04, rel_tol=1e-4)
        assert exact.support_size == 1 + 4 + 16

    def test_guard(self):
        params = random_model(vocab_size=8)
        with self.assertRaises(SpaceGuardExceeded) as err:
            exact_ar_distribution(params, [0], horizon=7)
        assert err.exception.estimate == 8 ** 7
        with self.assertRaises(SpaceInvalidConfig):
            exact_ar_distribution(params, [0], horizon=0)


class TestSampledDistributions(TestCase):

    def test_tv_distance(self):
        a = SequenceDistribution({(1,): 0.5, (2,): 0.5})
        b = SequenceDistribution({(1,): 0.25, (3,): 0.75})
        assert tv_distance(a, b) == 0.75
        assert tv_distance(a, a) == 0.0

    def test_reproducible_and_independent_of_workers(self):
        params = random_model(seed=1, vocab_size=6)
        sampler = space_sampler(params, 2, 2)
        one = empirical_distribution(sampler, [0, 1], 2, 300, seed=4, tag=2, workers=1)
        three = empirical_distribution(sampler, [0, 1], 2, 300, seed=4, tag=2, workers=3)
        assert one.probs == three.probs
        assert math.isclose(one.total(), 1.0)
        other = empirical_distribution(sampler, [0, 1], 2, 300, seed=5, tag=2)
        assert other.probs != one.probs

    def test_zero_samples_rejected(self):
        with self.assertRaises(SpaceInvalidConfig):
            empirical_distribution(ar_sampler(random_model(), 2), [0], 2, 0, seed=0)


class TestEquivalence(TestCase):

    def test_lossless_matches_exact(self):
        params = random_model(seed=7, vocab_size=6)
        report = equivalence_report(params, [0, 1, 2], horizon=2, k=2, n_samples=10000, seed=0,
                                    include_literal=False, workers=2)
        assert report.passed, report.summary()
        assert report.tv_literal is None
        assert report.to_dict()["result"] == "PASS"

    def test_literal_mode_is_biased(self):
        params = drifting_draft_model()
        report = equivalence_report(params, [1], horizon=2, k=2, n_samples=4000, seed=1)
        assert report.tv_literal > report.tv_control + 0.05, report.summary()
        assert report.tv_space < 0.06, report.summary()
        # second token: the drafted token is accepted with probability 0.2 and redrawn otherwise
        literal_second = sum(p for seq, p in report.literal.probs.items() if len(seq) == 2 and seq[1] == 0)
        assert abs(literal_second - 0.8 * 0.36) < 0.04

    def test_report_files(self):
        params = random_model(seed=3, vocab_size=6)
        report = equivalence_report(params, [0], horizon=1, k=2, n_samples=200, seed=0)
        with tempfile.TemporaryDirectory() as tempdir:
            json_path = os.path.join(tempdir, "r", "oracle.json")
            csv_path = os.path.join(tempdir, "r", "oracle.csv")
            write_equivalence_json(json_path, report)
            write_equivalence_csv(csv_path, report)
            with open(json_path, encoding="utf-8") as fp:
                document = simplejson.load(fp)
            with open(csv_path, newline="", encoding="utf-8") as fp:
                rows = list(csv.reader(fp))
        assert document["k"] == 2 and document["horizon"] == 1
        assert document["result"] in ("PASS", "FAIL")
        assert rows[0] == ["sequence", "exact", "space", "control", "literal"]
        assert len(rows) - 1 == len(set(report.exact.probs) | set(report.space.probs) | set(report.control.probs)
                                    | set(report.literal.probs))

    @unittest.skipUnless(SLOW_TESTS, "set SPACE_SLOW_TESTS=1 for the full-size sampling check")
    def test_full_size_check(self):
        params = random_model(seed=0, vocab_size=6, d_model=32)
        report = equivalence_report(params, [0, 1, 2], horizon=2, k=2, n_samples=200000, seed=0, workers=4)
        assert report.passed, report.summary()


class TestGreedyCrossCheck(TestCase):

    def test_no_mismatch(self):
        params = random_model(seed=9)
        assert greedy_cross_check(params, [[0], [1, 2], [3, 4, 5]], [1, 2, 4], max_new_tokens=12) == []

    def test_mismatch_reported(self):
        params = random_model(seed=9, no_eos=True)
        with patch("spacedecode.oracle.space_generate", return_value=([5], None)):
            mismatches = greedy_cross_check(params, [[0, 1]], [2], max_new_tokens=4)
        assert len(mismatches) == 1
        prompt, k, ar_out, space_out = mismatches[0]
        assert prompt == [0, 1] and k == 2 and space_out == [5]
        assert len(ar_out) == 4
