import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError
from sklearn.linear_model import LogisticRegression

from fedsim_contribution_ledger.data import (
    SCENARIO_PRESETS, apply_corruptions, batch_digest, build_scenario, build_vocabulary,
    generate_dataset, load_external_dataset, make_grammar, preset_spec
)
from fedsim_contribution_ledger.utils.config import (
    ConfigError, DataError, ScenarioError, ScenarioSpec
)

def classification_spec(**fields):
    return ScenarioSpec(**{'task': 'classification', 'num_agents': 10, 'samples_per_agent': 500, **fields})

def language_spec(**fields):
    return ScenarioSpec(**{'task': 'next-token', 'num_agents': 4, 'samples_per_agent': 200,
                           'vocab_size': 12, 'context_window': 3, **fields})

class TestGenerateDataset:
    def test_partition_shape_and_class_balance(self):
        data = generate_dataset(classification_spec(), np.random.default_rng(0))
        assert len(data.shards) == 10
        assert all(len(shard) == 500 for shard in data.shards)
        assert len(data.eval_set) == 1000
        for shard in data.shards:
            counts = np.bincount(shard.targets, minlength=10)
            assert np.all(np.abs(counts - 50) <= 5)

    def test_shards_are_disjoint(self):
        data = generate_dataset(classification_spec(num_agents=4, samples_per_agent=100), np.random.default_rng(0))
        rows = [row.tobytes() for shard in data.shards for row in shard.inputs]
        assert len(set(rows)) == len(rows)

    def test_same_seed_same_data(self):
        first = generate_dataset(language_spec(), np.random.default_rng(3), np.random.default_rng(4))
        second = generate_dataset(language_spec(), np.random.default_rng(3), np.random.default_rng(4))
        assert first.digests() == second.digests()
        assert batch_digest(first.eval_set) == batch_digest(second.eval_set)

    def test_single_agent(self):
        data = generate_dataset(classification_spec(num_agents=1, samples_per_agent=80), np.random.default_rng(0))
        assert len(data.shards) == 1 and len(data.shards[0]) == 80

    def test_next_token_samples(self):
        spec = language_spec()
        data = generate_dataset(spec, np.random.default_rng(0))
        for shard in data.shards:
            assert shard.inputs.shape == (200, 3)
            assert shard.inputs.min() >= 0 and shard.inputs.max() < 12
        # consecutive windows overlap by context_window - 1 tokens
        shard = data.shards[0]
        np.testing.assert_array_equal(shard.inputs[1, :2], shard.inputs[0, 1:])
        assert shard.inputs[1, 2] == shard.targets[0]

    def test_grammar_rows_are_distributions(self):
        transition = make_grammar(10, 3, np.random.default_rng(0))
        np.testing.assert_allclose(transition.sum(axis=1), 1.0)
        assert np.all(transition > 0)

class TestCorruptions:
    def test_reduce_keeps_the_stated_share(self):
        spec = classification_spec(corruptions=[{'agent_ids': [9], 'treatment': 'reduce', 'magnitude': 0.7}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        shards = apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))
        assert len(shards[9]) == 150

    def test_full_mislabel_changes_every_label(self):
        spec = classification_spec(corruptions=[{'agent_ids': [8, 9], 'treatment': 'mislabel', 'magnitude': 1.0}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        shards = apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))
        for agent in (8, 9):
            assert np.sum(shards[agent].targets == clean.shards[agent].targets) == 0
            assert shards[agent].targets.max() < 10

    def test_partial_mislabel_is_exact(self):
        spec = classification_spec(corruptions=[{'agent_ids': [0], 'treatment': 'mislabel', 'magnitude': 0.3}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        shards = apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))
        assert np.sum(shards[0].targets != clean.shards[0].targets) == 150

    def test_untargeted_agents_are_untouched(self):
        spec = classification_spec(corruptions=[{'agent_ids': [8, 9], 'treatment': 'feature-noise'}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        shards = apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))
        digests = [batch_digest(s) for s in shards]
        assert digests[:8] == clean.digests()[:8]
        assert digests[8] != clean.digests()[8]
        np.testing.assert_array_equal(shards[8].targets, clean.shards[8].targets)

    def test_feature_noise_removes_class_structure(self):
        spec = classification_spec(num_agents=30,
                                   corruptions=[{'agent_ids': list(range(30)), 'treatment': 'feature-noise'}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        shards = apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))
        chance = 1.0 / spec.num_classes
        eval_set = clean.eval_set
        # one classifier per noised shard, each scored on the clean eval set
        noised = [LogisticRegression(max_iter=1000).fit(s.inputs, s.targets).score(eval_set.inputs, eval_set.targets)
                  for s in shards]
        assert abs(np.mean(noised) - chance) <= 0.05
        clean_classifier = LogisticRegression(max_iter=1000).fit(clean.shards[9].inputs, clean.shards[9].targets)
        assert clean_classifier.score(eval_set.inputs, eval_set.targets) > chance + 0.2

    def test_shuffle_tokens_randomizes_sequences(self):
        spec = language_spec(corruptions=[{'agent_ids': [3], 'treatment': 'shuffle-tokens'}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        shards = apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))
        assert batch_digest(shards[3]) != batch_digest(clean.shards[3])
        assert shards[3].inputs.max() < 12 and shards[3].targets.max() < 12
        assert [batch_digest(s) for s in shards[:3]] == clean.digests()[:3]

    def test_reduction_to_nothing(self):
        spec = classification_spec(num_agents=2, samples_per_agent=1,
                                   corruptions=[{'agent_ids': [1], 'treatment': 'reduce', 'magnitude': 0.7}])
        clean = generate_dataset(spec, np.random.default_rng(0))
        with pytest.raises(ScenarioError):
            apply_corruptions(list(clean.shards), spec, np.random.default_rng(1))

    @pytest.mark.parametrize('corruption', [
        {'agent_ids': [1], 'treatment': 'reduce', 'magnitude': 1.0},
        {'agent_ids': [1], 'treatment': 'mislabel', 'magnitude': 0.0},
        {'agent_ids': [10], 'treatment': 'mislabel', 'magnitude': 0.5},
        {'agent_ids': [1], 'treatment': 'shuffle-tokens', 'magnitude': 0.5},
    ])
    def test_invalid_corruptions(self, corruption):
        with pytest.raises(ValidationError):
            classification_spec(corruptions=[corruption])

class TestPresets:
    def test_every_preset_validates(self):
        for name in SCENARIO_PRESETS:
            spec = preset_spec(name)
            assert spec.name == name

    def test_graded_reduction(self):
        spec = preset_spec('reduce-graded')
        assert spec.num_agents == 20 and spec.task == 'next-token'
        assert {c.magnitude: c.agent_ids for c in spec.corruptions} == {0.3: [16, 17], 0.7: [18, 19]}

    def test_overrides(self):
        assert preset_spec('noise-last2', samples_per_agent=50).samples_per_agent == 50

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_spec('no-such-preset')

    def test_build_scenario_corrupts_only_listed_agents(self):
        spec = preset_spec('mislabel-last2', samples_per_agent=60, eval_samples=100)
        corrupted = build_scenario(spec, 5)
        clean = build_scenario(preset_spec('normal', samples_per_agent=60, eval_samples=100), 5)
        assert corrupted.digests()[:8] == clean.digests()[:8]
        assert corrupted.corrupted_agents == (8, 9)

class TestExternalDataset:
    def test_classification_csv(self, tmp_path, rng):
        spec = ScenarioSpec(task='classification', num_agents=3, num_features=2, num_classes=2)
        frame = pd.DataFrame({'x0': rng.standard_normal(31), 'x1': rng.standard_normal(31),
                              'label': rng.integers(0, 2, 31)})
        frame.to_csv(tmp_path / 'train.csv', index=False)
        frame.head(10).to_csv(tmp_path / 'eval.csv', index=False)
        data = load_external_dataset(tmp_path / 'train.csv', tmp_path / 'eval.csv', spec)
        assert [len(s) for s in data.shards] == [10, 10, 10]
        assert len(data.eval_set) == 10
        np.testing.assert_allclose(data.shards[0].inputs, frame[['x0', 'x1']].to_numpy()[:10])

    def test_missing_columns(self, tmp_path):
        spec = ScenarioSpec(task='classification', num_agents=1, num_features=2, num_classes=2)
        pd.DataFrame({'x0': [0.0], 'label': [1]}).to_csv(tmp_path / 'bad.csv', index=False)
        with pytest.raises(DataError):
            load_external_dataset(tmp_path / 'bad.csv', tmp_path / 'bad.csv', spec)

    def test_token_files(self, tmp_path):
        spec = ScenarioSpec(task='next-token', num_agents=2, vocab_size=4, context_window=2)
        (tmp_path / 'train.txt').write_text("a b a c a b d a b a c a\n")
        (tmp_path / 'eval.txt').write_text("a b zz a\n")
        data = load_external_dataset(tmp_path / 'train.txt', tmp_path / 'eval.txt', spec)
        assert [len(s) for s in data.shards] == [5, 5]
        assert data.eval_set.inputs.tolist() == [[1, 2], [2, 0]]
        assert data.eval_set.targets.tolist() == [0, 1]

    def test_vocabulary_keeps_most_frequent(self):
        vocabulary = build_vocabulary("a b a c a b d".split(), 3)
        assert vocabulary == {'<unk>': 0, 'a': 1, 'b': 2}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError):
            load_external_dataset(tmp_path / 'nope.csv', tmp_path / 'nope.csv', ScenarioSpec())
