"""Tests for the LSTM language model and encoder-decoder."""

import math

import numpy as np
import pytest
from hypothesis import given, settings

from latentprog.autodiff import Tape, backward, total
from latentprog.exceptions import (
    ConfigurationError,
    DatasetError,
    ShapeError,
    UnknownTokenError,
)
from latentprog.sequence import (
    LanguageModel,
    Seq2Seq,
    enumerate_sequences,
    greedy_decode,
    lm_log_prob,
    pretrain_prior,
    sample_sequence,
    seq2seq_log_prob,
    step_log_probs,
)
from latentprog.vocab import Vocabulary
from tests.strategies import rng_from, seeds

TOKENS = Vocabulary(["a", "b", "c", "d"])
WORDS = Vocabulary(["is", "there", "red"])


def small_lm(seed=0, vocab=TOKENS):
    return LanguageModel(vocab, 5, 7, np.random.default_rng(seed))


def small_seq2seq(seed=0):
    return Seq2Seq(WORDS, TOKENS, 5, 7, np.random.default_rng(seed), name="coder")


class TestScoring:
    """Teacher-forced sequence log-probabilities."""

    def test_zero_init_is_uniform(self):
        """Two tokens plus END under a uniform 5-way output."""
        model = LanguageModel(TOKENS, 3, 3, zero_init=True)
        log_prob = lm_log_prob(model, [("a", "b")])
        assert log_prob.item() == pytest.approx(3 * math.log(1 / 5))

    def test_cap_drops_end_step(self):
        model = LanguageModel(TOKENS, 3, 3, zero_init=True)
        log_prob = lm_log_prob(model, [("a", "b")], max_len=2)
        assert log_prob.item() == pytest.approx(2 * math.log(1 / 5))

    def test_normalized_over_capped_sequences(self):
        vocab = Vocabulary(["x", "y"])
        model = small_lm(seed=4, vocab=vocab)
        sequences = enumerate_sequences(vocab, 3)
        probs = np.exp(lm_log_prob(model, sequences, max_len=3).data)
        assert probs.sum() == pytest.approx(1.0)

    def test_seq2seq_normalized_per_source(self):
        vocab = Vocabulary(["x", "y"])
        model = Seq2Seq(WORDS, vocab, 4, 5, np.random.default_rng(1))
        sequences = enumerate_sequences(vocab, 2)
        sources = [("is", "red")] * len(sequences)
        probs = np.exp(seq2seq_log_prob(model, sources, sequences, max_len=2).data)
        assert probs.sum() == pytest.approx(1.0)

    def test_batch_rows_independent(self):
        model = small_lm()
        alone = lm_log_prob(model, [("a", "c")]).item()
        batched = lm_log_prob(model, [("b",), ("a", "c"), ()]).data
        assert batched[1] == pytest.approx(alone)

    def test_source_changes_score(self):
        model = small_seq2seq()
        scores = seq2seq_log_prob(model, [("is",), ("there", "red")], [("a",), ("a",)])
        assert scores.data[0] != pytest.approx(scores.data[1])

    def test_step_terms_sum_to_score(self):
        model = small_lm()
        targets = [("a", "b", "c"), ("d",)]
        steps = step_log_probs(model, targets, max_len=5)
        summed = sum(step.data for step in steps)
        np.testing.assert_allclose(summed, lm_log_prob(model, targets, max_len=5).data)

    def test_length_normalize(self):
        model = small_lm()
        raw = lm_log_prob(model, [("a", "b")]).item()
        normalized = lm_log_prob(model, [("a", "b")], length_normalize=True).item()
        assert normalized == pytest.approx(raw / 3)

    def test_unknown_token(self):
        with pytest.raises(UnknownTokenError) as excinfo:
            lm_log_prob(small_lm(), [("a", "zebra")])
        assert excinfo.value.position == 2

    def test_too_long(self):
        with pytest.raises(ShapeError, match="max_len"):
            lm_log_prob(small_lm(), [("a", "b", "c")], max_len=2)

    def test_source_count_mismatch(self):
        with pytest.raises(ShapeError):
            seq2seq_log_prob(small_seq2seq(), [("is",)], [("a",), ("b",)])

    def test_gradients_reach_all_parameters(self):
        model = small_seq2seq()
        with Tape() as tape:
            loss = total(seq2seq_log_prob(model, [("is", "red")], [("a", "b")]))
        backward(tape, loss)
        assert all(p.grad is not None for p in model.parameters().values())


class TestSampling:
    """Ancestral sampling and greedy decoding."""

    @settings(max_examples=20, deadline=None)
    @given(seeds())
    def test_sample_score_agree(self, seed):
        """A sample's recorded log-probability equals the re-scored value."""
        model = small_lm(seed=1)
        dist = sample_sequence(model, rng_from(seed), n=6, max_len=4)
        rescored = lm_log_prob(model, dist.tokens, max_len=4)
        np.testing.assert_allclose(dist.log_prob.data, rescored.data, rtol=1e-12)

    def test_conditional_sample_score_agree(self):
        model = small_seq2seq()
        sources = [("is", "there"), ("red",), ("there", "red", "is")]
        rng = np.random.default_rng(7)
        dist = sample_sequence(model, rng, sources=sources, max_len=5)
        rescored = seq2seq_log_prob(model, sources, dist.tokens, max_len=5)
        np.testing.assert_allclose(dist.log_prob.data, rescored.data, rtol=1e-12)

    def test_respects_cap(self):
        model = LanguageModel(TOKENS, 3, 3, zero_init=True)
        dist = sample_sequence(model, np.random.default_rng(0), n=200, max_len=3)
        assert all(len(tokens) <= 3 for tokens in dist.tokens)
        assert dist.truncated.any()
        assert all(len(dist.tokens[i]) == 3 for i in np.flatnonzero(dist.truncated))

    def test_deterministic_given_stream(self):
        model = small_lm()
        first = sample_sequence(model, np.random.default_rng(3), n=5, max_len=4)
        second = sample_sequence(model, np.random.default_rng(3), n=5, max_len=4)
        assert first.tokens == second.tokens

    def test_step_probs_are_distributions(self):
        dist = sample_sequence(small_lm(), np.random.default_rng(0), n=4, max_len=4)
        assert dist.step_probs.shape[2] == TOKENS.output_size
        np.testing.assert_allclose(dist.step_probs.sum(axis=2), 1.0)

    def test_empirical_frequencies(self):
        """Uniform single-token model: P(empty) = 1/2."""
        model = LanguageModel(Vocabulary(["a"]), 2, 2, zero_init=True)
        dist = sample_sequence(model, np.random.default_rng(11), n=4000, max_len=5)
        empty = np.mean([len(t) == 0 for t in dist.tokens])
        assert abs(empty - 0.5) < 4 * math.sqrt(0.25 / 4000)

    def test_greedy_ties_take_lowest_index(self):
        model = LanguageModel(TOKENS, 3, 3, zero_init=True)
        assert greedy_decode(model, n=2, max_len=3) == [("a", "a", "a")] * 2

    def test_greedy_untaped(self):
        with Tape() as tape:
            greedy_decode(small_lm(), n=2, max_len=3)
        assert len(tape) == 0

    def test_needs_batch(self):
        with pytest.raises(ConfigurationError):
            sample_sequence(small_lm(), np.random.default_rng(0), max_len=3)
        with pytest.raises(ConfigurationError):
            greedy_decode(small_lm(), max_len=3)

    def test_bad_cap(self):
        with pytest.raises(ConfigurationError, match="max_len"):
            sample_sequence(small_lm(), np.random.default_rng(0), n=1, max_len=0)


class TestPretrainPrior:
    """Maximum-likelihood fitting of the prior."""

    def test_empirical_fits_corpus_and_freezes(self):
        model = small_lm(vocab=Vocabulary(["a", "b", "c"]))
        pretrain_prior(
            model,
            np.random.default_rng(0),
            mode="empirical",
            corpus=[("a", "b")],
            steps=200,
            batch_size=4,
            lr=0.05,
            max_len=4,
        )
        assert model.frozen
        assert lm_log_prob(model, [("a", "b")], max_len=4).item() > math.log(0.5)

    def test_syntactic_uses_simulator(self):
        calls = []

        def simulate(rng):
            calls.append(1)
            return ("c",)

        model = small_lm()
        pretrain_prior(
            model, np.random.default_rng(0), simulate=simulate, steps=3, batch_size=2
        )
        assert len(calls) == 6
        assert model.frozen

    def test_zero_steps_only_freezes(self):
        model = small_lm()
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        rng = np.random.default_rng(0)
        pretrain_prior(model, rng, simulate=lambda r: ("a",), steps=0)
        for name, param in model.parameters().items():
            np.testing.assert_array_equal(param.data, before[name])
        assert model.frozen

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError, match="mode"):
            pretrain_prior(small_lm(), np.random.default_rng(0), mode="neural")

    def test_syntactic_needs_simulator(self):
        with pytest.raises(ConfigurationError, match="simulator"):
            pretrain_prior(small_lm(), np.random.default_rng(0))

    def test_empirical_needs_corpus(self):
        with pytest.raises(DatasetError):
            pretrain_prior(
                small_lm(), np.random.default_rng(0), mode="empirical", corpus=[]
            )
