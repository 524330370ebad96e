"""Tests for the score-function estimator and the three training stages."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentprog import training
from latentprog.autodiff import Tape, Tensor, backward, mul, suspend_tape, total
from latentprog.config import (
    DataConfig,
    ExperimentConfig,
    Hyperparams,
    ModelConfig,
    StageConfig,
)
from latentprog.context import ModelBundle
from latentprog.exceptions import NumericError, TrainingError
from latentprog.grammar import default_program_vocab
from latentprog.probe import Metrics
from latentprog.sequence import (
    LanguageModel,
    Seq2Seq,
    enumerate_sequences,
    lm_log_prob,
    sample_sequence,
    seq2seq_log_prob,
)
from latentprog.shapes import build_dataset, question_vocab
from latentprog.training import (
    BaselineState,
    joint_training_batch,
    module_training_batch,
    question_coding_batch,
    question_coding_epoch,
    reinforce_grad,
    reinforce_surrogate,
    run_stage,
    start_stage,
    update_baseline,
)
from latentprog.vocab import Vocabulary

STAGE = StageConfig(epochs=1, batch_size=4, lr=1e-2)
CONFIG = ExperimentConfig(
    data=DataConfig(train_size=8, val_size=2, test_size=2, supervision_fraction=0.25),
    model=ModelConfig(embed_dim=4, hidden_dim=8, channels=4),
    hyperparams=Hyperparams(samples=2),
    question_coding=STAGE,
    module_training=STAGE,
    joint_training=STAGE,
)


@pytest.fixture(scope="module")
def data():
    return build_dataset(
        train_size=8, val_size=2, test_size=2, supervision_fraction=0.25, seed=0
    )


@pytest.fixture
def bundle():
    models = ModelBundle.initialize(
        default_program_vocab(), question_vocab(), CONFIG.model, seed=0
    )
    models.prior.freeze()
    return models


def snapshot(params):
    return {name: p.data.copy() for name, p in params.items()}


def unchanged(params, before):
    return all(np.array_equal(p.data, before[name]) for name, p in params.items())


def flat_grads(model):
    return np.concatenate([p.grad.reshape(-1) for p in model.parameters().values()])


class TestBaseline:
    """Moving-average reward baseline."""

    def test_single_update(self):
        updated = update_baseline(BaselineState(0.0, 0.99), 1.0)
        assert updated.value == pytest.approx(0.99)

    @settings(max_examples=50)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=30),
        st.floats(0.0, 1.0),
        st.floats(-5, 5),
    )
    def test_recurrence_matches_closed_form(self, rewards, decay, start):
        state = BaselineState(start, decay)
        for reward in rewards:
            state = update_baseline(state, reward)
        n = len(rewards)
        expected = (1 - decay) ** n * start + sum(
            decay * (1 - decay) ** (n - 1 - k) * r for k, r in enumerate(rewards)
        )
        assert state.value == pytest.approx(expected, abs=1e-9)

    def test_non_finite_reward(self):
        with pytest.raises(NumericError):
            update_baseline(BaselineState(), float("nan"))


def toy_coder():
    return Seq2Seq(
        Vocabulary(["x"]), Vocabulary(["a", "b", "c"]), 3, 4, np.random.default_rng(5)
    )


def reward(programs):
    return np.array([1.0 if p == ("a",) else 0.0 for p in programs])


class TestScoreFunction:
    """REINFORCE surrogate and its expectation."""

    def test_surrogate_coefficients(self):
        log_q = Tensor([0.0, 0.0, 0.0], requires_grad=True)
        with Tape() as tape:
            surrogate = reinforce_surrogate(
                np.array([1.0, 2.0, 3.0]), log_q, 1.0, path_coef=0.5
            )
        backward(tape, surrogate)
        np.testing.assert_allclose(log_q.grad, [-0.5 / 3, 0.5 / 3, 1.5 / 3])

    def test_shape_mismatch(self):
        with pytest.raises(TrainingError):
            reinforce_surrogate(np.ones(2), Tensor(np.zeros(3)), 0.0)

    def test_non_finite_reward(self):
        with pytest.raises(NumericError):
            reinforce_surrogate(np.array([np.inf]), Tensor(np.zeros(1)), 0.0)

    def test_constant_reward_has_zero_expected_gradient(self):
        """Sum over all capped sequences of q * grad log q vanishes."""
        model = toy_coder()
        sequences = enumerate_sequences(model.vocab, 2)
        with Tape() as tape:
            sources = [("x",)] * len(sequences)
            log_q = seq2seq_log_prob(model, sources, sequences, max_len=2)
            loss = total(mul(log_q, Tensor(np.exp(log_q.data))))
        backward(tape, loss)
        np.testing.assert_allclose(flat_grads(model), 0.0, atol=1e-10)

    def test_monte_carlo_matches_exact_gradient(self):
        model = toy_coder()
        sequences = enumerate_sequences(model.vocab, 2)
        with Tape() as tape:
            sources = [("x",)] * len(sequences)
            log_q = seq2seq_log_prob(model, sources, sequences, max_len=2)
            weights = np.exp(log_q.data) * reward(sequences)
            loss = total(mul(log_q, Tensor(weights)))
        backward(tape, loss)
        exact = flat_grads(model)
        model.zero_grad()

        n = 20000
        with Tape() as tape:
            dist = sample_sequence(
                model, np.random.default_rng(0), sources=[("x",)] * n, max_len=2
            )
            surrogate, baseline = reinforce_grad(reward, dist, BaselineState(0.3, 0.5))
        backward(tape, surrogate)
        estimate = flat_grads(model)
        assert np.linalg.norm(estimate - exact) < 0.15 * np.linalg.norm(exact)
        mean = reward(dist.tokens).mean()
        assert baseline.value == pytest.approx(0.3 + 0.5 * (mean - 0.3))


class TestEvidenceBound:
    """The beta-scaled reward lower-bounds log p(x) for beta >= 1."""

    @pytest.fixture(scope="class")
    def exact_terms(self):
        programs, words = Vocabulary(["a", "b"]), Vocabulary(["x", "y"])
        prior = LanguageModel(programs, 3, 4, np.random.default_rng(1))
        inference = Seq2Seq(words, programs, 3, 4, np.random.default_rng(2))
        reconstructor = Seq2Seq(programs, words, 3, 4, np.random.default_rng(3))
        question = ("x", "y")
        latents = enumerate_sequences(programs, 2)
        questions = [question] * len(latents)
        with suspend_tape():
            log_prior = lm_log_prob(prior, latents, max_len=2).data
            log_recon = seq2seq_log_prob(
                reconstructor, latents, questions, max_len=2
            ).data
            log_q = seq2seq_log_prob(inference, questions, latents, max_len=2).data
        return log_prior, log_recon, log_q

    @pytest.mark.parametrize("beta", [1.0, 1.5])
    def test_bound_below_marginal(self, exact_terms, beta):
        log_prior, log_recon, log_q = exact_terms
        log_marginal = np.logaddexp.reduce(log_prior + log_recon)
        rewards = log_recon - beta * (log_q - log_prior)
        expected_reward = np.sum(np.exp(log_q) * rewards)
        assert expected_reward <= log_marginal + 1e-12

    def test_gap_is_posterior_divergence(self, exact_terms):
        log_prior, log_recon, log_q = exact_terms
        log_marginal = np.logaddexp.reduce(log_prior + log_recon)
        bound = np.sum(np.exp(log_q) * (log_recon - (log_q - log_prior)))
        log_posterior = log_prior + log_recon - log_marginal
        divergence = np.sum(np.exp(log_q) * (log_q - log_posterior))
        assert log_marginal - bound == pytest.approx(divergence, abs=1e-10)


class TestStageIsolation:
    """Each stage updates only its own parameter groups."""

    def test_question_coding_touches_coder_only(self, bundle, data):
        frozen = {
            **bundle.prior.parameters(),
            **bundle.stem.parameters(),
            **bundle.bank.parameters(),
        }
        coder = {**bundle.inference.parameters(), **bundle.reconstructor.parameters()}
        before_frozen, before_coder = snapshot(frozen), snapshot(coder)
        state = start_stage("question_coding", bundle, CONFIG)
        record = question_coding_batch(bundle, data.train, CONFIG, state)
        assert unchanged(frozen, before_frozen)
        assert not unchanged(coder, before_coder)
        assert record.objective == pytest.approx(sum(record.components.values()))
        decay = CONFIG.hyperparams.baseline_decay
        assert state.baseline.value == pytest.approx(decay * record.mean_reward)

    def test_module_training_touches_executor_only(self, bundle, data):
        coder = {
            **bundle.prior.parameters(),
            **bundle.inference.parameters(),
            **bundle.reconstructor.parameters(),
        }
        executor = {**bundle.stem.parameters(), **bundle.bank.parameters()}
        before_coder, before_executor = snapshot(coder), snapshot(executor)
        state = start_stage("module_training", bundle, CONFIG)
        record = module_training_batch(bundle, data.teaching, data, CONFIG, state)
        assert record.stepped and record.invalid == 0
        assert unchanged(coder, before_coder)
        assert not unchanged(executor, before_executor)

    def test_module_training_skips_all_invalid_batch(self, bundle, data):
        """A zero-initialized coder decodes the same token repeatedly."""
        bundle.inference = Seq2Seq(
            bundle.question_vocab,
            bundle.program_vocab,
            4,
            8,
            zero_init=True,
            name="inference",
        )
        items = [replace(item, teaching=False) for item in data.train[:3]]
        before = snapshot(bundle.bank.parameters())
        state = start_stage("module_training", bundle, CONFIG)
        record = module_training_batch(bundle, items, data, CONFIG, state)
        assert not record.stepped
        assert record.invalid == 3
        assert unchanged(bundle.bank.parameters(), before)

    def test_joint_training_leaves_prior(self, bundle, data):
        before_prior = snapshot(bundle.prior.parameters())
        before_coder = snapshot(bundle.inference.parameters())
        state = start_stage("joint_training", bundle, CONFIG)
        record = joint_training_batch(bundle, data.train, data, CONFIG, state)
        assert unchanged(bundle.prior.parameters(), before_prior)
        decay = CONFIG.hyperparams.baseline_decay
        assert state.baseline.value == pytest.approx(decay * record.mean_reward)
        assert not unchanged(bundle.inference.parameters(), before_coder)
        assert record.objective == pytest.approx(sum(record.components.values()))

    def test_joint_training_invalid_programs_take_flat_penalty(
        self, bundle, data, monkeypatch
    ):
        monkeypatch.setattr(training, "is_valid_program", lambda *args: False)
        items = [replace(item, teaching=False) for item in data.train[:2]]
        before_bank = snapshot(bundle.bank.parameters())
        state = start_stage("joint_training", bundle, CONFIG)
        record = joint_training_batch(bundle, items, data, CONFIG, state)
        assert record.invalid == 2 * CONFIG.hyperparams.samples
        assert record.components["answer"] == pytest.approx(
            CONFIG.hyperparams.invalid_reward
        )
        assert unchanged(bundle.bank.parameters(), before_bank)

    def test_unfrozen_prior_rejected(self, data):
        models = ModelBundle.initialize(
            default_program_vocab(), question_vocab(), CONFIG.model, seed=0
        )
        state = start_stage("question_coding", models, CONFIG)
        with pytest.raises(TrainingError, match="frozen prior"):
            question_coding_epoch(models, data, CONFIG, state)


class TestStageStreams:
    """Seed-derived per-stage random streams."""

    def test_same_stage_same_stream(self, bundle):
        first = start_stage("joint_training", bundle, CONFIG).rng.random(4)
        second = start_stage("joint_training", bundle, CONFIG).rng.random(4)
        np.testing.assert_array_equal(first, second)

    def test_stages_differ(self, bundle):
        first = start_stage("question_coding", bundle, CONFIG).rng.random(4)
        second = start_stage("module_training", bundle, CONFIG).rng.random(4)
        assert not np.array_equal(first, second)


class TestRunStage:
    """Epoch loop with validation, lr halving and early stopping."""

    def test_module_training_epoch(self, bundle, data):
        report = run_stage("module_training", bundle, data, CONFIG)
        assert report.stage == "module_training"
        assert len(report.epochs) == 1
        assert report.epochs[0].batches == 2
        assert report.last_metrics is not None
        assert len(report.validations) == 1

    def test_plateau_halves_then_stops(self, bundle, data, monkeypatch):
        monkeypatch.setattr(
            training,
            "compute_metrics",
            lambda *args, **kwargs: Metrics(0.5, 0.5, 0.5, 0.5, 2),
        )
        stage = StageConfig(
            epochs=5,
            batch_size=4,
            lr=0.02,
            validate_every=1,
            patience=1,
            max_halvings=1,
        )
        config = replace(CONFIG, question_coding=stage)
        calls = []
        report = run_stage(
            "question_coding", bundle, data, config, sink=lambda *row: calls.append(row)
        )
        assert report.stopped_early
        assert len(report.validations) == 3
        assert len(report.epochs) == 2
        assert report.final_lr == pytest.approx(0.01)
        assert ("question_coding", 1, "program_accuracy", 0.5) in calls
        assert any(row[2] == "objective" for row in calls)


class TestConfigurableTerms:
    """Reconstruction scaling and the module-training program source."""

    def test_reconstruction_scaled_by_alpha(self, bundle, data):
        hp = replace(CONFIG.hyperparams, scale_reconstruction_with_alpha=True)
        scaled = replace(CONFIG, hyperparams=hp)
        with suspend_tape():
            _, plain = training._supervised_terms(bundle, data.teaching, CONFIG, 1.0)
            _, boosted = training._supervised_terms(bundle, data.teaching, scaled, 1.0)
        alpha = CONFIG.hyperparams.alpha
        program = plain["supervised_program"]
        assert boosted["supervised_program"] == pytest.approx(program)
        assert boosted["supervised_question"] == pytest.approx(
            alpha * plain["supervised_question"]
        )

    def test_sampled_programs_keep_gold_for_teaching(self, bundle, data):
        config = replace(
            CONFIG, module_training=replace(STAGE, program_source="sample")
        )
        items = [replace(item, teaching=False) for item in data.train[:3]]
        items.append(data.teaching[0])
        state = start_stage("module_training", bundle, config)
        programs = training._training_programs(bundle, items, config, state)
        assert programs[-1] == data.teaching[0].program
        for program in programs[:3]:
            assert len(program) <= config.data.max_program_len
            assert all(token in bundle.program_vocab for token in program)
