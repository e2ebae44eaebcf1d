import numpy as np
import pytest

from fedsim_contribution_ledger.data import generate_dataset
from fedsim_contribution_ledger.metrics import (
    accuracy, empirical_oracle, evaluate, perplexity, utility
)
from fedsim_contribution_ledger.models import Batch, init_params, predict_distribution
from fedsim_contribution_ledger.utils.config import DomainError, ModelSpec, ScenarioSpec

class TestAccuracy:
    def test_one_hot_predictions(self):
        targets = np.array([2, 0, 1, 2])
        assert accuracy(np.eye(3)[targets], targets) == 1.0

    def test_ties_break_towards_lowest_class(self):
        uniform = np.full((10, 10), 0.1)
        assert accuracy(uniform, np.arange(10)) == pytest.approx(0.1)
        assert accuracy(uniform, np.zeros(10, dtype=int)) == 1.0

    def test_half_correct(self):
        predictions = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        assert accuracy(predictions, np.array([0, 1, 1, 0])) == 0.5

    def test_empty_input(self):
        with pytest.raises(DomainError):
            accuracy(np.zeros((0, 3)), np.zeros(0))

class TestPerplexity:
    @pytest.mark.parametrize('vocab', [10, 50, 256])
    def test_uniform_predictor_scores_vocabulary_size(self, vocab, rng):
        targets = rng.integers(0, vocab, 500)
        assert perplexity(np.full((500, vocab), 1.0 / vocab), targets) == pytest.approx(vocab, rel=1e-9)

    def test_perfect_predictor(self):
        targets = np.array([0, 2, 1])
        assert perplexity(np.eye(3)[targets], targets) == 1.0

    def test_hand_evaluated_cross_entropy(self):
        predictions = np.array([[0.5, 0.5, 0.0], [0.25, 0.0, 0.75]])
        assert perplexity(predictions, np.array([0, 0])) == pytest.approx(2 ** 1.5)

    def test_zero_probability_is_floored(self):
        value = perplexity(np.array([[1.0, 0.0]]), np.array([1]))
        assert np.isfinite(value) and value > 1e11

    def test_row_permutation_invariance(self, rng):
        predictions = rng.dirichlet(np.ones(5), size=40)
        targets = rng.integers(0, 5, 40)
        order = rng.permutation(40)
        assert perplexity(predictions[order], targets[order]) == pytest.approx(perplexity(predictions, targets))
        assert accuracy(predictions[order], targets[order]) == accuracy(predictions, targets)

    def test_empty_input(self):
        with pytest.raises(DomainError):
            perplexity(np.zeros((0, 3)), np.zeros(0))

class TestEmpiricalOracle:
    def test_distribution_per_context(self):
        inputs = np.array([[0, 1], [0, 1], [0, 1], [2, 2]])
        targets = np.array([1, 1, 2, 0])
        oracle = empirical_oracle(inputs, targets, 3)
        np.testing.assert_allclose(oracle[0], [0.0, 2 / 3, 1 / 3])
        np.testing.assert_allclose(oracle[3], [1.0, 0.0, 0.0])

    def test_oracle_lower_bounds_model_perplexity(self):
        spec = ScenarioSpec(task='next-token', num_agents=1, samples_per_agent=50, eval_samples=400,
                            vocab_size=8, context_window=2)
        eval_set = generate_dataset(spec, np.random.default_rng(0)).eval_set
        oracle_ppl = perplexity(empirical_oracle(eval_set.inputs, eval_set.targets, 8), eval_set.targets)
        model = ModelSpec(kind='next-token', input_dim=4, hidden_dims=[6], output_dim=8, context_window=2)
        for seed in range(5):
            params = init_params(model, np.random.default_rng(seed))
            model_ppl = perplexity(predict_distribution(model, params, eval_set.inputs), eval_set.targets)
            assert model_ppl >= oracle_ppl

class TestEvaluate:
    def test_classifier_reports_accuracy(self, rng):
        spec = ModelSpec(kind='classifier', input_dim=3, hidden_dims=[], output_dim=2)
        eval_set = Batch(rng.standard_normal((20, 3)), rng.integers(0, 2, 20))
        report = evaluate(spec, init_params(spec, rng), eval_set, 4)
        assert report.metric == 'accuracy'
        assert report.sample_count == 20 and report.round_idx == 4
        assert 0.0 <= report.value <= 1.0

    def test_next_token_utility_is_negative_log_perplexity(self, rng):
        spec = ModelSpec(kind='next-token', input_dim=2, hidden_dims=[], output_dim=5, context_window=1)
        eval_set = Batch(rng.integers(0, 5, (30, 1)), rng.integers(0, 5, 30))
        params = init_params(spec, rng)
        report = evaluate(spec, params, eval_set, 1)
        assert report.metric == 'perplexity' and report.value >= 1.0
        assert utility(spec, params, eval_set) == pytest.approx(-np.log2(report.value))
