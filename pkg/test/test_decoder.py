import os
import tempfile
from unittest import TestCase
from unittest.mock import Mock, patch

import numpy as np
import simplejson

from spacedecode.config_handling import DecodeConfig, SamplingConfig, VerificationMode
from spacedecode.exceptions import SpaceInvalidConfig, SpaceLayoutError
from spacedecode.decoder import (CandidateState, ar_generate, placeholder_token, space_generate, space_step,
                                 verify_candidates, write_trace_jsonl)
from spacedecode.layout import build_layout
from spacedecode.model import KVCache, SlotKind, forward
from spacedecode.sampling import draw_from
from test.model_fixtures import (close_rows, constant_model, cycle_successor, random_model, successor_model,
                                 tiny_config)


def greedy(k, max_new_tokens=32) -> DecodeConfig:
    return DecodeConfig(k=k, max_new_tokens=max_new_tokens).validate()


def lossless(k, max_new_tokens=32, seed=0) -> DecodeConfig:
    return DecodeConfig(k=k, sampling=SamplingConfig.untruncated(), verification=VerificationMode.LOSSLESS_RESIDUAL,
                        max_new_tokens=max_new_tokens, seed=seed).validate()


def state_of(tokens, drafts) -> CandidateState:
    drafts = np.asarray(drafts, dtype=np.float64)
    return CandidateState(tokens=list(tokens), probs=np.array([drafts[i][t] for i, t in enumerate(tokens)]),
                          drafts=drafts)


def uniform_rng(*values) -> Mock:
    rng = Mock()
    rng.random.side_effect = list(values)
    return rng


class TestVerification(TestCase):

    def test_sentinel_rejects_without_randomness(self):
        state = CandidateState.initial(2, tiny_config())
        q_rows = np.array([[0.5, 0.5], [0.1, 0.9], [0.2, 0.8]])
        rng = uniform_rng()
        accepted, dist = verify_candidates(q_rows, state, lossless(2), rng)
        assert accepted == 0
        assert np.array_equal(dist, q_rows[0])
        rng.random.assert_not_called()

    def test_greedy_match(self):
        state = state_of([1, 0], [[0.4, 0.6], [0.5, 0.5]])
        q_rows = np.array([[0.2, 0.8], [0.7, 0.3], [0.6, 0.4]])
        accepted, dist = verify_candidates(q_rows, state, greedy(2), uniform_rng())
        assert accepted == 2
        assert np.array_equal(dist, q_rows[2])
        q_rows[1] = [0.3, 0.7]
        accepted, dist = verify_candidates(q_rows, state, greedy(2), uniform_rng())
        assert accepted == 1
        assert np.array_equal(dist, q_rows[1])

    def test_lossless_acceptance_ratio(self):
        state = state_of([0], [[0.9, 0.1]])
        q_rows = np.array([[0.45, 0.55], [0.5, 0.5]])
        # ratio is 0.5: a uniform of 0.49 accepts, 0.51 rejects
        assert verify_candidates(q_rows, state, lossless(1), uniform_rng(0.49))[0] == 1
        accepted, dist = verify_candidates(q_rows, state, lossless(1), uniform_rng(0.51))
        assert accepted == 0
        assert np.allclose(dist, [0.0, 1.0])

    def test_higher_target_always_accepts(self):
        state = state_of([1, 1], [[0.5, 0.5], [0.9, 0.1]])
        q_rows = np.array([[0.2, 0.8], [0.3, 0.7], [1.0, 0.0]])
        accepted, dist = verify_candidates(q_rows, state, lossless(2), uniform_rng(0.999, 0.999))
        assert accepted == 2
        assert np.array_equal(dist, q_rows[2])

    def test_residual_distribution(self):
        state = state_of([2], [[0.1, 0.2, 0.7]])
        q_rows = np.array([[0.3, 0.3, 0.4], [1.0, 0.0, 0.0]])
        accepted, dist = verify_candidates(q_rows, state, lossless(1), uniform_rng(0.9))
        assert accepted == 0
        assert np.allclose(dist, [2 / 3, 1 / 3, 0.0])

    def test_empty_residual_falls_back(self):
        drafts = [[0.5, 0.5]]
        state = state_of([0], drafts)
        q_rows = np.array([[0.5, 0.5], [1.0, 0.0]])
        state.probs[0] = 1.0
        accepted, dist = verify_candidates(q_rows, state, lossless(1), uniform_rng(0.9))
        assert accepted == 0
        assert np.array_equal(dist, q_rows[0])

    def test_literal_mode_resamples_from_target(self):
        config = DecodeConfig(k=1, sampling=SamplingConfig.untruncated(),
                              verification=VerificationMode.PAPER_LITERAL).validate()
        state = state_of([2], [[0.1, 0.2, 0.7]])
        q_rows = np.array([[0.3, 0.3, 0.4], [1.0, 0.0, 0.0]])
        accepted, dist = verify_candidates(q_rows, state, config, uniform_rng(0.9))
        assert accepted == 0
        assert np.array_equal(dist, q_rows[0])

    def test_acceptance_rate_calibration(self):
        # P_c = 0.5 and Q_c = 0.25, so half of the candidates survive
        state = state_of([0], [[0.5, 0.1, 0.1, 0.3]])
        q_rows = np.array([[0.25, 0.3, 0.35, 0.1], [1.0, 0.0, 0.0, 0.0]])
        config = lossless(1)
        rng = np.random.default_rng(11)
        trials = 100000
        accepted_count = 0
        replacements = np.zeros(4)
        for _ in range(trials):
            accepted, dist = verify_candidates(q_rows, state, config, rng)
            if accepted:
                accepted_count += 1
            else:
                token = draw_from(dist, rng)
                replacements[token] += 1
        assert abs(accepted_count / trials - 0.5) < 0.01
        residual = np.array([0.0, 0.2, 0.25, 0.0]) / 0.45
        assert 0.5 * np.abs(replacements / replacements.sum() - residual).sum() < 0.02

    def test_row_count_checked(self):
        state = state_of([0], [[0.5, 0.5]])
        with self.assertRaises(SpaceLayoutError):
            verify_candidates(np.ones((1, 2)), state, greedy(1), uniform_rng())


class TestSpaceStep(TestCase):

    def setUp(self) -> None:
        self.params = random_model(seed=3, no_eos=True)
        self.mask_id = self.params.config.mask_token_id

    def test_first_step_emits_one_token(self):
        config = greedy(3)
        state = CandidateState.initial(3, self.params.config)
        assert state.tokens == [placeholder_token(self.params.config)] * 3
        emitted, new_state, cache, record = space_step(self.params, [0, 1, 2], state, config, None,
                                                       np.random.default_rng(0))
        expected = forward(self.params, [0, 1, 2], None, None)[-1]
        assert emitted == [int(np.argmax(expected))]
        assert record.accepted == 0
        assert not new_state.sentinel and new_state.is_coherent()
        assert len(cache) == 3
        assert cache.kinds == [SlotKind.PROMPT] * 3

    def test_drafts_come_from_group_after_accepted(self):
        config = greedy(3)
        prompt = [0, 1, 2]
        state = state_of([3, 4, 5], np.full((3, 8), 1.0 / 8))
        layout = build_layout(prompt, state.tokens, 3, self.mask_id)
        probs = forward(self.params, layout.tokens, layout.attn_mask, layout.pos_indices)
        for accepted in range(4):
            with patch("spacedecode.decoder.verify_candidates",
                       side_effect=lambda q, s, c, r, n=accepted: (n, q[n])):
                emitted, new_state, cache, record = space_step(self.params, prompt, state, config, None,
                                                               np.random.default_rng(0))
            assert record.accepted == accepted
            assert emitted[:accepted] == state.tokens[:accepted]
            assert close_rows(new_state.drafts, probs[layout.group_rows(accepted + 1)])
            assert len(cache) == len(prompt) + accepted
            assert cache.kinds[len(prompt):] == [SlotKind.ACCEPTED] * accepted

    def test_compacted_cache_matches_fresh_pass(self):
        for config in (greedy(3), lossless(3)):
            rng_cached = np.random.default_rng(9)
            rng_fresh = np.random.default_rng(9)
            output = [0, 1, 2]
            cached_state = CandidateState.initial(3, self.params.config)
            fresh_state = cached_state
            cache = None
            for step in range(50):
                emitted, cached_state, cache, _ = space_step(self.params, output, cached_state, config, cache,
                                                             rng_cached, step)
                fresh, fresh_state, _, _ = space_step(self.params, output, fresh_state, config, None, rng_fresh,
                                                      step)
                assert emitted == fresh
                assert cached_state.tokens == fresh_state.tokens
                assert close_rows(cached_state.drafts, fresh_state.drafts)
                assert cached_state.is_coherent()
                output = output + emitted
                assert len(cache) < len(output)
                if len(output) > 150:
                    break

    def test_cache_must_be_shorter_than_output(self):
        cache = KVCache.for_model(self.params)
        forward(self.params, [0, 1], None, None, cache=cache)
        with self.assertRaises(SpaceLayoutError):
            space_step(self.params, [0, 1], CandidateState.initial(2, self.params.config), greedy(2), cache,
                       np.random.default_rng(0))

    def test_candidate_count_checked(self):
        with self.assertRaises(SpaceLayoutError):
            space_step(self.params, [0, 1], CandidateState.initial(3, self.params.config), greedy(2), None,
                       np.random.default_rng(0))


class TestGeneration(TestCase):

    def test_greedy_matches_ar(self):
        # 5 models x 4 prompts x k in 1..5
        for seed in range(5):
            params = random_model(seed=seed)
            rng = np.random.default_rng(seed)
            for _ in range(4):
                prompt = [int(t) for t in rng.integers(0, 6, size=int(rng.integers(1, 5)))]
                for k in range(1, 6):
                    config = greedy(k, max_new_tokens=24)
                    expected, _ = ar_generate(params, prompt, config)
                    output, trace = space_generate(params, prompt, config)
                    assert output == expected, (seed, prompt, k)
                    assert trace.invocations <= max(len(expected), 1) + 1

    def test_ceiling_with_constant_model(self):
        params = constant_model(token=2)
        k, max_new = 5, 31
        output, trace = space_generate(params, [0, 1], greedy(k, max_new_tokens=max_new))
        assert output == [2] * max_new
        assert [len(s.emitted) for s in trace.steps] == [1] + [k + 1] * 5
        assert trace.avg_accepted_tokens == max_new / 6
        assert trace.accepted_histogram() == [0, 1, 0, 0, 0, 0, 5]

    def test_floor_with_mispredicting_masks(self):
        config = tiny_config()
        content = config.content_tokens
        params = successor_model(cycle_successor(content[:-1]), mask_prediction=content[-1])
        output, trace = space_generate(params, [0, 1], greedy(3, max_new_tokens=12))
        expected, invocations = ar_generate(params, [0, 1], greedy(3, max_new_tokens=12))
        assert output == expected == [2, 3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 3]
        assert trace.invocations == invocations == 12
        assert trace.avg_accepted_tokens == 1.0

    def test_truncation_to_budget(self):
        params = constant_model(token=1)
        output, trace = space_generate(params, [0], greedy(5, max_new_tokens=3))
        assert output == [1, 1, 1]
        assert trace.tokens_generated == 7
        assert trace.tokens_delivered == 3
        assert trace.invocations == 2

    def test_immediate_eos(self):
        params = constant_model(token=6)
        output, trace = space_generate(params, [0], greedy(2, max_new_tokens=8))
        assert output == [] and trace.hit_eos
        assert trace.tokens_delivered == 1
        assert trace.avg_accepted_tokens == 1.0
        assert ar_generate(params, [0], greedy(2, max_new_tokens=8)) == ([], 1)

    def test_zero_budget(self):
        params = constant_model(token=1)
        output, trace = space_generate(params, [0], greedy(2, max_new_tokens=0))
        assert output == [] and trace.invocations == 0
        assert trace.avg_accepted_tokens == 0.0

    def test_stochastic_runs_repeat_with_seed(self):
        params = random_model(seed=4)
        first = space_generate(params, [0, 1], lossless(3, seed=5))[0]
        second = space_generate(params, [0, 1], lossless(3, seed=5))[0]
        assert first == second

    def test_prompt_checks(self):
        params = random_model(max_position=16)
        with self.assertRaises(SpaceLayoutError):
            space_generate(params, [], greedy(2))
        with self.assertRaises(SpaceLayoutError):
            space_generate(params, [0, 7], greedy(2))
        with self.assertRaises(SpaceLayoutError):
            ar_generate(params, [0, 9], greedy(2))
        with self.assertRaises(SpaceInvalidConfig):
            space_generate(params, [0, 1], greedy(2, max_new_tokens=12))
        ar_generate(params, [0, 1], greedy(2, max_new_tokens=12))


class TestTraceOutput(TestCase):

    def test_write_trace_jsonl(self):
        params = constant_model(token=3)
        _, trace = space_generate(params, [0], greedy(2, max_new_tokens=6))
        with tempfile.TemporaryDirectory() as tempdir:
            path = os.path.join(tempdir, "trace.jsonl")
            write_trace_jsonl(trace, path)
            with open(path, encoding="utf-8") as fp:
                records = [simplejson.loads(line) for line in fp]
        assert [r["step"] for r in records] == list(range(trace.invocations))
        assert records[0]["accepted"] == 0
        assert records[1]["emitted"] == [3, 3, 3]
        assert records[1]["drafted"] == [3, 3]
        summary = trace.summary()
        assert summary["tokens_delivered"] == 6
        assert summary["invocations"] == 3
