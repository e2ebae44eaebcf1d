# trainer.py
"""
ClientUpdate: E epochs of mini-batch SGD on one agent's shard.

- Starts from the distributed global parameters (never mutated)
- Shard reshuffled every epoch from the agent's derived stream
- Last partial batch kept, so heavily reduced shards still train
"""
from typing import List, Tuple

import numpy as np

from fedsim_contribution_ledger.models import Batch, loss_and_grad
from fedsim_contribution_ledger.params import ParamSet, axpy_combine
from fedsim_contribution_ledger.utils.config import ModelSpec, ScenarioError, TrainerConfig
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

def iterate_batches(shard: Batch, batch_size: int, stream: np.random.Generator) -> List[Batch]:
    """One shuffled epoch of mini-batches."""
    order = stream.permutation(len(shard))
    return [shard.subset(order[start:start + batch_size])
            for start in range(0, len(shard), batch_size)]

def client_update(spec: ModelSpec,
                  global_params: ParamSet,
                  shard: Batch,
                  cfg: TrainerConfig,
                  stream: np.random.Generator) -> ParamSet:
    """Return w_{t+1}^k after cfg.local_epochs epochs of SGD."""
    params, _ = client_update_with_losses(spec, global_params, shard, cfg, stream)
    return params

def client_update_with_losses(spec: ModelSpec,
                              global_params: ParamSet,
                              shard: Batch,
                              cfg: TrainerConfig,
                              stream: np.random.Generator) -> Tuple[ParamSet, List[float]]:
    """client_update that also reports the mean batch loss of every epoch."""
    if shard is None or len(shard) == 0:
        raise ScenarioError("Agent shard is empty; every agent must own data")

    params = global_params
    epoch_losses = []
    for epoch in range(cfg.local_epochs):
        batch_losses = []
        for batch in iterate_batches(shard, cfg.batch_size, stream):
            loss, grad = loss_and_grad(spec, params, batch)
            params = axpy_combine(params, [(-cfg.learning_rate, grad)])
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
        logger.debug(f"  epoch {epoch + 1}/{cfg.local_epochs}: mean batch loss {epoch_losses[-1]:.4f}")
    return params, epoch_losses
