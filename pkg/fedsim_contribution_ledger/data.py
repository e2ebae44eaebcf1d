# data.py
"""
Scenario data for federated contribution experiments. Core functionality:

1. Generation:
- Classification: Gaussian-blob classes, class-balanced labels per shard
- Next-token: corpora sampled from a fixed first-order Markov grammar,
  cut into (context window, next token) samples
- Disjoint, equal-sized agent shards plus a clean held-out eval set

2. Corruptions (applied to listed agents only):
- feature-noise: rows replaced by noise matching the shard's feature scale
- mislabel: labels moved to a uniformly drawn OTHER class
- reduce: seeded subsample down to (1 - magnitude) of the shard
- shuffle-tokens: contexts and targets replaced by uniform random ids

3. Presets and external data:
- SCENARIO_PRESETS: the shipped scenario shapes
- load_external_dataset: CSV (classification) or whitespace token files

Class: ScenarioData - shards, eval set and the spec that produced them
"""
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from fedsim_contribution_ledger.models import Batch
from fedsim_contribution_ledger.utils.config import (
    ConfigError, CorruptionSpec, DataError, ScenarioError, ScenarioSpec
)
from fedsim_contribution_ledger.utils.seeding import CORRUPT, DATA, GRAMMAR, derive_stream
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

# Share of each grammar row spread uniformly over the whole vocabulary
GRAMMAR_SMOOTHING = 0.1
UNKNOWN_TOKEN = '<unk>'

#--------------------------------------------
# Presets
#--------------------------------------------
_LAST2 = [8, 9]
_LAST4 = [16, 17, 18, 19]

SCENARIO_PRESETS: Dict[str, Dict] = {
    'normal': {
        'task': 'classification', 'num_agents': 10,
    },
    'noise-last2': {
        'task': 'classification', 'num_agents': 10,
        'corruptions': [{'agent_ids': _LAST2, 'treatment': 'feature-noise', 'magnitude': 1.0}],
    },
    'mislabel-last2': {
        'task': 'classification', 'num_agents': 10,
        'corruptions': [{'agent_ids': _LAST2, 'treatment': 'mislabel', 'magnitude': 1.0}],
    },
    'reduce-last4-70': {
        'task': 'next-token', 'num_agents': 20,
        'corruptions': [{'agent_ids': _LAST4, 'treatment': 'reduce', 'magnitude': 0.7}],
    },
    'reduce-graded': {
        'task': 'next-token', 'num_agents': 20,
        'corruptions': [{'agent_ids': [16, 17], 'treatment': 'reduce', 'magnitude': 0.3},
                        {'agent_ids': [18, 19], 'treatment': 'reduce', 'magnitude': 0.7}],
    },
    'shuffle-last4': {
        'task': 'next-token', 'num_agents': 20,
        'corruptions': [{'agent_ids': _LAST4, 'treatment': 'shuffle-tokens', 'magnitude': 1.0}],
    },
    'normal-language': {
        'task': 'next-token', 'num_agents': 20,
    },
}

PRESET_DESCRIPTIONS: Dict[str, str] = {
    'normal': "10 agents, clean classification data",
    'noise-last2': "10 agents, agents 8-9 hold pure feature noise",
    'mislabel-last2': "10 agents, every label of agents 8-9 changed",
    'reduce-last4-70': "20 agents, next-token data of agents 16-19 reduced by 70%",
    'reduce-graded': "20 agents, next-token data of agents 16-17 reduced by 30%, 18-19 by 70%",
    'shuffle-last4': "20 agents, token sequences of agents 16-19 randomized",
    'normal-language': "20 agents, clean next-token data",
}

def preset_spec(name: str, **overrides) -> ScenarioSpec:
    """ScenarioSpec for a named preset, with optional field overrides."""
    if name not in SCENARIO_PRESETS:
        raise ConfigError(f"Unknown scenario preset '{name}'. Available: {sorted(SCENARIO_PRESETS)}")
    fields = {'name': name, **SCENARIO_PRESETS[name], **overrides}
    return ScenarioSpec(**fields)

#--------------------------------------------
# Scenario container
#--------------------------------------------
def batch_digest(batch: Batch) -> str:
    """sha256 over a shard's inputs and targets."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(batch.inputs).tobytes())
    digest.update(np.ascontiguousarray(batch.targets).tobytes())
    return digest.hexdigest()

@dataclass(frozen=True)
class ScenarioData:
    spec: ScenarioSpec
    shards: Tuple[Batch, ...]
    eval_set: Batch

    @property
    def shard_sizes(self) -> Dict[int, int]:
        return {k: len(shard) for k, shard in enumerate(self.shards)}

    @property
    def corrupted_agents(self) -> Tuple[int, ...]:
        return tuple(sorted({a for c in self.spec.corruptions for a in c.agent_ids}))

    def digests(self) -> List[str]:
        return [batch_digest(shard) for shard in self.shards]

#--------------------------------------------
# Classification generator
#--------------------------------------------
def _blob_samples(centers: np.ndarray, n: int, stream: np.random.Generator) -> Batch:
    num_classes = len(centers)
    labels = stream.permutation(np.arange(n) % num_classes)
    inputs = centers[labels] + stream.standard_normal((n, centers.shape[1]))
    return Batch(inputs, labels.astype(np.int64))

def _generate_classification(spec: ScenarioSpec, stream: np.random.Generator) -> Tuple[List[Batch], Batch]:
    centers = stream.standard_normal((spec.num_classes, spec.num_features)) * spec.class_separation
    shards = [_blob_samples(centers, spec.samples_per_agent, stream) for _ in range(spec.num_agents)]
    return shards, _blob_samples(centers, spec.eval_samples, stream)

#--------------------------------------------
# Next-token generator
#--------------------------------------------
def make_grammar(vocab_size: int, branching: int, stream: np.random.Generator) -> np.ndarray:
    """Row-stochastic transition matrix; each token prefers `branching` successors."""
    branching = min(branching, vocab_size)
    transition = np.full((vocab_size, vocab_size), GRAMMAR_SMOOTHING / vocab_size)
    for token in range(vocab_size):
        successors = stream.choice(vocab_size, size=branching, replace=False)
        transition[token, successors] += (1.0 - GRAMMAR_SMOOTHING) * stream.dirichlet(np.ones(branching))
    return transition / transition.sum(axis=1, keepdims=True)

def sample_corpus(transition: np.ndarray, length: int, stream: np.random.Generator) -> np.ndarray:
    """Token sequence from the Markov grammar, uniform first token."""
    vocab_size = len(transition)
    cumulative = np.cumsum(transition, axis=1)
    draws = stream.random(length)
    tokens = np.empty(length, dtype=np.int64)
    tokens[0] = int(draws[0] * vocab_size)
    for i in range(1, length):
        tokens[i] = min(np.searchsorted(cumulative[tokens[i - 1]], draws[i], side='right'), vocab_size - 1)
    return tokens

def context_windows(tokens: np.ndarray, context_window: int, limit: Optional[int] = None) -> Batch:
    """(context, next token) samples from a token sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) <= context_window:
        raise ScenarioError(f"Need more than {context_window} tokens to build a context window, got {len(tokens)}")
    inputs = sliding_window_view(tokens[:-1], context_window)
    targets = tokens[context_window:]
    if limit is not None:
        inputs, targets = inputs[:limit], targets[:limit]
    return Batch(np.array(inputs), np.array(targets))

def _generate_next_token(spec: ScenarioSpec,
                         stream: np.random.Generator,
                         grammar_stream: np.random.Generator) -> Tuple[List[Batch], Batch]:
    transition = make_grammar(spec.vocab_size, spec.branching, grammar_stream)

    def windows(n: int) -> Batch:
        return context_windows(sample_corpus(transition, n + spec.context_window, stream), spec.context_window, n)

    shards = [windows(spec.samples_per_agent) for _ in range(spec.num_agents)]
    return shards, windows(spec.eval_samples)

def generate_dataset(spec: ScenarioSpec,
                     stream: np.random.Generator,
                     grammar_stream: Optional[np.random.Generator] = None) -> ScenarioData:
    """Clean per-agent shards plus the held-out eval set.

    The grammar is drawn from grammar_stream when given, so several
    generations can share one language.
    """
    if spec.task == 'classification':
        shards, eval_set = _generate_classification(spec, stream)
    else:
        shards, eval_set = _generate_next_token(spec, stream, grammar_stream or stream)
    logger.debug(f"Generated {len(shards)} shards of {spec.samples_per_agent} samples "
                 f"and {len(eval_set)} eval samples ({spec.task})")
    return ScenarioData(spec, tuple(shards), eval_set)

#--------------------------------------------
# Corruptions
#--------------------------------------------
def _pick_rows(n: int, magnitude: float, stream: np.random.Generator) -> np.ndarray:
    count = int(np.rint(n * magnitude))
    return np.sort(stream.choice(n, size=count, replace=False))

def _feature_noise(shard: Batch, magnitude: float, stream: np.random.Generator) -> Batch:
    inputs = np.array(shard.inputs, dtype=np.float64)
    mean, std = inputs.mean(axis=0), inputs.std(axis=0)
    rows = _pick_rows(len(shard), magnitude, stream)
    inputs[rows] = mean + std * stream.standard_normal((len(rows), inputs.shape[1]))
    return Batch(inputs, shard.targets.copy())

def _mislabel(shard: Batch, magnitude: float, num_classes: int, stream: np.random.Generator) -> Batch:
    targets = np.array(shard.targets, dtype=np.int64)
    rows = _pick_rows(len(shard), magnitude, stream)
    targets[rows] = (targets[rows] + stream.integers(1, num_classes, size=len(rows))) % num_classes
    return Batch(shard.inputs.copy(), targets)

def _reduce(shard: Batch, magnitude: float, stream: np.random.Generator) -> Batch:
    keep = int(np.rint(len(shard) * (1.0 - magnitude)))
    if keep < 1:
        raise ScenarioError(f"Reducing a {len(shard)}-sample shard by {magnitude} leaves no data")
    return shard.subset(np.sort(stream.choice(len(shard), size=keep, replace=False)))

def _shuffle_tokens(shard: Batch, magnitude: float, vocab_size: int, stream: np.random.Generator) -> Batch:
    inputs = np.array(shard.inputs, dtype=np.int64)
    targets = np.array(shard.targets, dtype=np.int64)
    rows = _pick_rows(len(shard), magnitude, stream)
    inputs[rows] = stream.integers(0, vocab_size, size=(len(rows), inputs.shape[1]))
    targets[rows] = stream.integers(0, vocab_size, size=len(rows))
    return Batch(inputs, targets)

def _apply_one(shard: Batch, corruption: CorruptionSpec, spec: ScenarioSpec,
               stream: np.random.Generator) -> Batch:
    if corruption.treatment == 'feature-noise':
        return _feature_noise(shard, corruption.magnitude, stream)
    if corruption.treatment == 'mislabel':
        return _mislabel(shard, corruption.magnitude, spec.num_outputs, stream)
    if corruption.treatment == 'reduce':
        return _reduce(shard, corruption.magnitude, stream)
    return _shuffle_tokens(shard, corruption.magnitude, spec.vocab_size, stream)

def apply_corruptions(shards: List[Batch], spec: ScenarioSpec, stream: np.random.Generator) -> List[Batch]:
    """Apply every corruption in order; untargeted shards are returned as-is."""
    if len(shards) != spec.num_agents:
        raise ScenarioError(f"{len(shards)} shards for a {spec.num_agents}-agent scenario")
    shards = list(shards)
    for corruption in spec.corruptions:
        for agent in sorted(corruption.agent_ids):
            before = len(shards[agent])
            shards[agent] = _apply_one(shards[agent], corruption, spec, stream)
            logger.debug(f"Agent {agent}: {corruption.treatment} ({corruption.magnitude}), "
                         f"{before} -> {len(shards[agent])} samples")
    return shards

#--------------------------------------------
# External datasets
#--------------------------------------------
def _split_equal(data: Batch, num_agents: int, stream: Optional[np.random.Generator]) -> List[Batch]:
    per_agent = len(data) // num_agents
    if per_agent < 1:
        raise ScenarioError(f"{len(data)} samples cannot fill {num_agents} agent shards")
    order = stream.permutation(len(data)) if stream is not None else np.arange(len(data))
    return [data.subset(order[k * per_agent:(k + 1) * per_agent]) for k in range(num_agents)]

def _read_feature_csv(path: Path, spec: ScenarioSpec) -> Batch:
    frame = pd.read_csv(path)
    feature_columns = [f"x{i}" for i in range(spec.num_features)]
    missing = [c for c in feature_columns + ['label'] if c not in frame.columns]
    if missing:
        raise DataError(f"{path} is missing columns: {missing}")
    labels = frame['label'].to_numpy(dtype=np.int64)
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise DataError(f"{path}: labels must lie in [0, {spec.num_classes})")
    return Batch(frame[feature_columns].to_numpy(dtype=np.float64), labels)

def _read_tokens(path: Path) -> List[str]:
    with open(path, 'r', encoding='utf-8') as f:
        return f.read().split()

def build_vocabulary(tokens: List[str], vocab_size: int) -> Dict[str, int]:
    """<unk> gets id 0; the vocab_size - 1 most frequent tokens follow (ties by token)."""
    counts = pd.Series(tokens, dtype=object).value_counts().rename_axis('token').reset_index(name='count')
    counts = counts[counts['token'] != UNKNOWN_TOKEN]
    counts = counts.sort_values(['count', 'token'], ascending=[False, True]).head(vocab_size - 1)
    vocabulary = {UNKNOWN_TOKEN: 0}
    vocabulary.update({token: i + 1 for i, token in enumerate(counts['token'])})
    return vocabulary

def load_external_dataset(train_path: Union[str, Path],
                          eval_path: Union[str, Path],
                          spec: ScenarioSpec,
                          stream: Optional[np.random.Generator] = None) -> ScenarioData:
    """Load user data in place of the synthetic generators.

    classification: CSV with columns x0..x{num_features-1} and label
    next-token: whitespace-separated token files; vocabulary from the
                training file, unknown tokens map to <unk> (id 0)
    Training data is split into num_agents equal shards (remainder dropped).
    """
    train_path, eval_path = Path(train_path), Path(eval_path)
    for path in (train_path, eval_path):
        if not path.exists():
            raise ScenarioError(f"Dataset file not found: {path}")

    if spec.task == 'classification':
        train, eval_set = _read_feature_csv(train_path, spec), _read_feature_csv(eval_path, spec)
    else:
        train_tokens = _read_tokens(train_path)
        vocabulary = build_vocabulary(train_tokens, spec.vocab_size)

        def encode(tokens: List[str]) -> np.ndarray:
            return np.array([vocabulary.get(t, 0) for t in tokens], dtype=np.int64)

        train = context_windows(encode(train_tokens), spec.context_window)
        eval_set = context_windows(encode(_read_tokens(eval_path)), spec.context_window)
        logger.info(f"Vocabulary: {len(vocabulary)} ids from {len(train_tokens)} training tokens")

    shards = _split_equal(train, spec.num_agents, stream)
    logger.info(f"Loaded {len(train)} training samples into {spec.num_agents} shards of {len(shards[0])}")
    return ScenarioData(spec, tuple(shards), eval_set)

#--------------------------------------------
# Full scenario
#--------------------------------------------
def build_scenario(spec: ScenarioSpec, master_seed: int) -> ScenarioData:
    """Generate (or load) the clean data, then corrupt the listed agents."""
    if spec.train_file is not None:
        clean = load_external_dataset(spec.train_file, spec.eval_file, spec, derive_stream(master_seed, DATA))
    else:
        clean = generate_dataset(spec, derive_stream(master_seed, DATA), derive_stream(master_seed, GRAMMAR))
    if not spec.corruptions:
        return clean
    shards = apply_corruptions(list(clean.shards), spec, derive_stream(master_seed, CORRUPT))
    return ScenarioData(spec, tuple(shards), clean.eval_set)
