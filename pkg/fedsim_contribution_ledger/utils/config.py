# fedsim_contribution_ledger/utils/config.py
"""
Configuration and error definitions for the federated contribution simulator.

Core Components:
  1. Exceptions:
    - FedSimError: Base simulator exception
    - StructuralError, DomainError, NumericError, DataError,
      ScenarioError, BudgetError, ConfigError, RunAbortedError

  2. Model / training configuration:
    - ModelSpec: Classifier or next-token MLP layout
    - TrainerConfig: Local epochs, batch size, learning rate (E, B, eta)

  3. Server configuration:
    - SelectionPolicy: Fraction C of K agents per round
    - AggregationConfig: Step size, DP weight/sigma, norm order
    - ImpactConfig / ContributionConfig: FedCM ledger knobs

  4. Scenario configuration:
    - CorruptionSpec: One treatment applied to a set of agents
    - ScenarioSpec: Task, partition and corruptions

  5. System configuration:
    - LoggingConfig: Log settings
    - ExperimentConfig: Complete run configuration

  6. Helpers:
    - load_config: YAML file -> dict
    - apply_overrides: dotted-path overrides (--set a.b=value)
    - resolve_output_dir: config value, FEDSIM_OUTPUT_DIR, or ./output
"""
import math
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

#--------------------------------------------
# Base exceptions
#--------------------------------------------
class FedSimError(Exception):
    """Base exception for simulator errors."""
    pass

class StructuralError(FedSimError):
    """Raised when parameter sets or traces do not line up."""
    pass

class DomainError(FedSimError, ValueError):
    """Raised when an argument lies outside its mathematical domain."""
    pass

class NumericError(FedSimError):
    """Raised when a computation produces NaN or Inf."""
    pass

class DataError(FedSimError):
    """Raised for out-of-range class or token ids."""
    pass

class ScenarioError(FedSimError):
    """Raised for invalid partitions or corruption outcomes."""
    pass

class BudgetError(FedSimError):
    """Raised when exact Shapley enumeration exceeds its agent cap."""
    pass

class ConfigError(FedSimError):
    """Raised for invalid or inconsistent configuration."""
    pass

class RunAbortedError(FedSimError):
    """Raised when a run stops; identifies the round and phase."""
    def __init__(self, round_idx: int, phase: str, cause: Exception):
        self.round_idx = round_idx
        self.phase = phase
        self.cause = cause
        super().__init__(f"Run aborted in round {round_idx}, phase '{phase}': {cause}")

#--------------------------------------------
# Model and training configuration
#--------------------------------------------
class ModelSpec(BaseModel):
    """Layout of a desk-scale model.

    For the next-token kind, input_dim is the embedding width per context
    token and output_dim is the vocabulary size.
    """
    kind: Literal['classifier', 'next-token'] = 'classifier'
    input_dim: int = Field(default=20, ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [32])
    output_dim: int = Field(default=10, ge=2)
    context_window: int = Field(default=1, ge=1)

    @field_validator('hidden_dims')
    def hidden_dims_positive(cls, v: List[int]) -> List[int]:
        if any(h < 1 for h in v):
            raise ValueError(f"hidden_dims must all be >= 1, got {v}")
        return v

class TrainerConfig(BaseModel):
    """ClientUpdate settings: epochs E, batch size B, learning rate eta."""
    local_epochs: int = Field(default=1, ge=1)
    batch_size: int = Field(default=128, ge=1)
    # 0 is accepted for zero-signal sanity runs
    learning_rate: float = Field(default=0.02, ge=0.0)

#--------------------------------------------
# Server configuration
#--------------------------------------------
class SelectionPolicy(BaseModel):
    """Random selection of m = max(ceil(C*K), 1) agents per round."""
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    num_agents: int = Field(default=10, ge=1)

    @property
    def num_selected(self) -> int:
        # rounding guards products like 0.3 * 10 = 3.0000000000000004
        return max(math.ceil(round(self.fraction * self.num_agents, 9)), 1)

class AggregationConfig(BaseModel):
    """Attention aggregation settings (epsilon, beta, sigma, p)."""
    stepsize: float = Field(default=1.2, gt=0.0)
    dp_weight: float = Field(default=0.001, ge=0.0)
    dp_sigma: float = Field(default=1.0, ge=0.0)
    norm_order: float = Field(default=2.0, ge=1.0)
    negate_scores: bool = False
    weighted_fedavg: bool = False

class ImpactConfig(BaseModel):
    share_dp_noise: bool = False

class ContributionConfig(BaseModel):
    every_n_rounds: int = Field(default=1, ge=1)

#--------------------------------------------
# Scenario configuration
#--------------------------------------------
Treatment = Literal['feature-noise', 'mislabel', 'reduce', 'shuffle-tokens']

class CorruptionSpec(BaseModel):
    """One treatment applied to a set of agents."""
    agent_ids: List[int]
    treatment: Treatment
    magnitude: float = 1.0

    @model_validator(mode='after')
    def check_magnitude(self) -> 'CorruptionSpec':
        if self.treatment == 'reduce':
            if not 0.0 < self.magnitude < 1.0:
                raise ValueError(f"reduce magnitude must lie in (0, 1), got {self.magnitude}")
        elif not 0.0 < self.magnitude <= 1.0:
            raise ValueError(f"{self.treatment} magnitude must lie in (0, 1], got {self.magnitude}")
        if not self.agent_ids:
            raise ValueError("Corruption must target at least one agent")
        return self

class ScenarioSpec(BaseModel):
    """Declarative data partition plus per-agent corruptions."""
    name: str = 'custom'
    task: Literal['classification', 'next-token'] = 'classification'
    num_agents: int = Field(default=10, ge=1)
    samples_per_agent: int = Field(default=500, ge=1)
    eval_samples: int = Field(default=1000, ge=1)
    corruptions: List[CorruptionSpec] = Field(default_factory=list)

    # classification generator
    num_features: int = Field(default=20, ge=1)
    num_classes: int = Field(default=10, ge=2)
    class_separation: float = Field(default=1.5, gt=0.0)

    # next-token generator
    vocab_size: int = Field(default=30, ge=2)
    context_window: int = Field(default=3, ge=1)
    branching: int = Field(default=3, ge=1)

    # optional external data (see data.load_external_dataset)
    train_file: Optional[Path] = None
    eval_file: Optional[Path] = None

    @model_validator(mode='after')
    def check_corruptions(self) -> 'ScenarioSpec':
        for corruption in self.corruptions:
            bad = [a for a in corruption.agent_ids if not 0 <= a < self.num_agents]
            if bad:
                raise ValueError(f"Corruption agent ids out of range [0, {self.num_agents}): {bad}")
            if corruption.treatment == 'feature-noise' and self.task != 'classification':
                raise ValueError("feature-noise applies to classification scenarios only")
            if corruption.treatment == 'shuffle-tokens' and self.task != 'next-token':
                raise ValueError("shuffle-tokens applies to next-token scenarios only")
        if (self.train_file is None) != (self.eval_file is None):
            raise ValueError("train_file and eval_file must be given together")
        return self

    @property
    def num_outputs(self) -> int:
        return self.num_classes if self.task == 'classification' else self.vocab_size

#--------------------------------------------
# System configuration
#--------------------------------------------
class LoggingConfig(BaseModel):
    """Logging configuration."""
    format: str = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    console_level: str = Field(default='INFO', pattern="^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$")
    file_level: str = Field(default='DEBUG', pattern="^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$")

#--------------------------------------------
# Main configuration
#--------------------------------------------
_SHAPLEY_PATTERN = re.compile(r'^(off|exact|mc\((\d+)\))$')

class ExperimentConfig(BaseModel):
    """Complete run configuration."""
    model_config = ConfigDict(protected_namespaces=())

    scenario: Union[str, ScenarioSpec] = 'normal'
    model: Optional[ModelSpec] = None
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    aggregation: AggregationConfig = Field(default_factory=AggregationConfig)
    selection: SelectionPolicy = Field(default_factory=SelectionPolicy)
    impact: ImpactConfig = Field(default_factory=ImpactConfig)
    contribution: ContributionConfig = Field(default_factory=ContributionConfig)
    gamma: float = Field(default=0.7, gt=0.0, lt=1.0)
    rounds: int = Field(default=10, ge=1)
    master_seed: int = Field(default=0, ge=0)
    aggregator: Literal['attention', 'fedavg'] = 'attention'
    shapley: str = 'off'
    shapley_seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    output_dir: Optional[Path] = None
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @field_validator('shapley', mode='before')
    def validate_shapley(cls, v: Any) -> str:
        # YAML reads a bare off as False
        if v is False:
            return 'off'
        if not isinstance(v, str):
            raise ValueError(f"shapley must be a string, got {v!r}")
        v = v.strip().replace(' ', '')
        match = _SHAPLEY_PATTERN.match(v)
        if not match or (match.group(2) is not None and int(match.group(2)) < 1):
            raise ValueError(f"shapley must be 'off', 'exact' or 'mc(M)' with M >= 1, got '{v}'")
        return v

    @property
    def shapley_mode(self) -> Tuple[str, Optional[int]]:
        """Parsed shapley setting as (mode, iterations)."""
        return parse_shapley_mode(self.shapley)

def parse_shapley_mode(value: str) -> Tuple[str, Optional[int]]:
    """Parse 'off' | 'exact' | 'mc(M)' into (mode, M)."""
    match = _SHAPLEY_PATTERN.match(value.strip().replace(' ', ''))
    if not match:
        raise ConfigError(f"Invalid Shapley mode '{value}'; expected off, exact or mc(M)")
    if match.group(2) is not None:
        return 'mc', int(match.group(2))
    return match.group(1), None

def check_model_matches_scenario(model: ModelSpec, scenario: ScenarioSpec) -> None:
    """Validate that the model layout fits the scenario's data."""
    expected_kind = 'classifier' if scenario.task == 'classification' else 'next-token'
    if model.kind != expected_kind:
        raise ConfigError(f"Model kind '{model.kind}' does not fit task '{scenario.task}'")
    if model.output_dim != scenario.num_outputs:
        raise ConfigError(f"Model output_dim {model.output_dim} != scenario outputs {scenario.num_outputs}")
    if model.kind == 'classifier' and model.input_dim != scenario.num_features:
        raise ConfigError(f"Model input_dim {model.input_dim} != scenario num_features {scenario.num_features}")
    if model.kind == 'next-token' and model.context_window != scenario.context_window:
        raise ConfigError(f"Model context_window {model.context_window} != "
                          f"scenario context_window {scenario.context_window}")

def default_model_spec(scenario: ScenarioSpec) -> ModelSpec:
    """Model used when the config does not spell one out."""
    if scenario.task == 'classification':
        return ModelSpec(kind='classifier', input_dim=scenario.num_features,
                         hidden_dims=[32], output_dim=scenario.num_classes)
    return ModelSpec(kind='next-token', input_dim=8, hidden_dims=[32],
                     output_dim=scenario.vocab_size, context_window=scenario.context_window)

#--------------------------------------------
# Loading helpers
#--------------------------------------------
def load_config(config_path: Union[str, Path]) -> Dict[str, Any]:
    """Load configuration from YAML file."""
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, 'r') as f:
            config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e
    return config or {}

def apply_overrides(config: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply 'dotted.key=value' overrides; values are parsed as YAML scalars."""
    for override in overrides:
        if '=' not in override:
            raise ConfigError(f"Override must look like key=value: '{override}'")
        key, raw_value = override.split('=', 1)
        parts = [p for p in key.strip().split('.') if p]
        if not parts:
            raise ConfigError(f"Empty override key in '{override}'")
        node = config
        for part in parts[:-1]:
            child = node.get(part)
            if child is None or isinstance(child, str):
                # a preset name is replaced by an inline spec when a sub-key is set
                child = {} if child is None else {'preset': child}
                node[part] = child
            if not isinstance(child, dict):
                raise ConfigError(f"Cannot set '{key}': '{part}' is not a section")
            node = child
        node[parts[-1]] = yaml.safe_load(raw_value)
    return config

def resolve_output_dir(config: ExperimentConfig) -> Path:
    """Output directory: explicit config, then FEDSIM_OUTPUT_DIR, then ./output."""
    if config.output_dir is not None:
        return Path(config.output_dir)
    env_dir = os.environ.get('FEDSIM_OUTPUT_DIR')
    if env_dir:
        return Path(env_dir)
    return Path('output')
