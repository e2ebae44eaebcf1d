# models.py
"""
Desk-scale models with hand-derived gradients.

1. Model kinds:
- classifier: MLP over real feature vectors
- next-token: learned embedding of a fixed context window, flattened into an MLP

2. Layer layout (one ParamSet layer per weight matrix / bias):
- next-token only: 'embedding' (vocab x embed_dim)
- 'dense{i}.weight' (fan_in x fan_out), 'dense{i}.bias' (fan_out)
- tanh between dense layers, softmax output

3. Operations:
- init_params: weights ~ N(0, 1/fan_in), zero biases
- loss_and_grad: mean natural-log cross-entropy and its gradient
- predict_distribution: row-stochastic softmax outputs
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from fedsim_contribution_ledger.params import ParamSet
from fedsim_contribution_ledger.utils.config import DataError, ModelSpec, StructuralError
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

EMBEDDING = 'embedding'

@dataclass(frozen=True)
class Batch:
    """Inputs plus integer targets; also used for whole agent shards.

    inputs: (B x input_dim) reals for the classifier,
            (B x context_window) token ids for the next-token model.
    """
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise DataError(f"Batch has {len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, indices: np.ndarray) -> 'Batch':
        return Batch(self.inputs[indices], self.targets[indices])

    def repeat(self, times: int) -> 'Batch':
        return Batch(np.concatenate([self.inputs] * times), np.concatenate([self.targets] * times))

#--------------------------------------------
# Layout helpers
#--------------------------------------------
def _dense_dims(spec: ModelSpec) -> List[Tuple[int, int]]:
    first = spec.input_dim * spec.context_window if spec.kind == 'next-token' else spec.input_dim
    dims = [first] + list(spec.hidden_dims) + [spec.output_dim]
    return list(zip(dims[:-1], dims[1:]))

def layer_layout(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Canonical (layer_id, shape) list for a spec."""
    layout = []
    if spec.kind == 'next-token':
        layout.append((EMBEDDING, (spec.output_dim, spec.input_dim)))
    for i, (fan_in, fan_out) in enumerate(_dense_dims(spec)):
        layout.append((f"dense{i}.weight", (fan_in, fan_out)))
        layout.append((f"dense{i}.bias", (fan_out,)))
    return layout

def _check_params(spec: ModelSpec, params: ParamSet) -> None:
    layout = layer_layout(spec)
    if params.layer_ids != tuple(k for k, _ in layout) or params.shapes != tuple(s for _, s in layout):
        raise StructuralError(f"ParamSet {params!r} does not match the {spec.kind} layout {layout}")

def _check_ids(values: np.ndarray, upper: int, what: str) -> np.ndarray:
    ids = np.asarray(values)
    if not np.issubdtype(ids.dtype, np.integer):
        if not np.all(np.mod(ids, 1) == 0):
            raise DataError(f"{what} must be integer ids")
        ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= upper):
        raise DataError(f"{what} out of range [0, {upper}): min={ids.min()}, max={ids.max()}")
    return ids

#--------------------------------------------
# Core model functions
#--------------------------------------------
def init_params(spec: ModelSpec, stream: np.random.Generator) -> ParamSet:
    """Small random weights scaled by 1/sqrt(fan_in); zero biases."""
    layers = []
    for layer_id, shape in layer_layout(spec):
        if layer_id == EMBEDDING:
            values = stream.standard_normal(shape) / np.sqrt(spec.input_dim)
        elif layer_id.endswith('.bias'):
            values = np.zeros(shape)
        else:
            values = stream.standard_normal(shape) / np.sqrt(shape[0])
        layers.append((layer_id, values))
    return ParamSet(layers)

def _forward(spec: ModelSpec, params: ParamSet, inputs: np.ndarray) -> Tuple[np.ndarray, Dict]:
    """Logits plus the activations the backward pass needs."""
    cache: Dict = {}
    if spec.kind == 'next-token':
        ids = _check_ids(inputs, spec.output_dim, 'Context token ids')
        if ids.ndim != 2 or ids.shape[1] != spec.context_window:
            raise DataError(f"Expected token matrix (B x {spec.context_window}), got {ids.shape}")
        cache['ids'] = ids
        h = params[EMBEDDING][ids].reshape(len(ids), -1)
    else:
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != spec.input_dim:
            raise DataError(f"Expected input matrix (B x {spec.input_dim}), got {h.shape}")

    activations = [h]
    n_dense = len(_dense_dims(spec))
    for i in range(n_dense):
        z = h @ params[f"dense{i}.weight"] + params[f"dense{i}.bias"]
        h = np.tanh(z) if i < n_dense - 1 else z
        activations.append(h)
    cache['activations'] = activations
    return h, cache

def predict_distribution(spec: ModelSpec, params: ParamSet, inputs: np.ndarray) -> np.ndarray:
    """Row-stochastic predicted class / next-token probabilities."""
    _check_params(spec, params)
    logits, _ = _forward(spec, params, inputs)
    return softmax(logits, axis=1)

def loss_and_grad(spec: ModelSpec, params: ParamSet, batch: Batch) -> Tuple[float, ParamSet]:
    """Mean cross-entropy (natural log) over the batch and its gradient."""
    _check_params(spec, params)
    if len(batch) < 1:
        raise DataError("Batch must contain at least one sample")
    targets = _check_ids(batch.targets, spec.output_dim, 'Targets')
    logits, cache = _forward(spec, params, batch.inputs)
    n = len(targets)

    log_probs = log_softmax(logits, axis=1)
    loss = float(-np.mean(log_probs[np.arange(n), targets]))

    # d(loss)/d(logits)
    delta = np.exp(log_probs)
    delta[np.arange(n), targets] -= 1.0
    delta /= n

    grads: Dict[str, np.ndarray] = {}
    activations = cache['activations']
    n_dense = len(_dense_dims(spec))
    for i in reversed(range(n_dense)):
        h_prev = activations[i]
        grads[f"dense{i}.weight"] = h_prev.T @ delta
        grads[f"dense{i}.bias"] = delta.sum(axis=0)
        delta = delta @ params[f"dense{i}.weight"].T
        if i > 0:
            delta = delta * (1.0 - h_prev ** 2)

    if spec.kind == 'next-token':
        ids = cache['ids']
        embed_grad = np.zeros_like(params[EMBEDDING])
        np.add.at(embed_grad, ids, delta.reshape(n, spec.context_window, spec.input_dim))
        grads[EMBEDDING] = embed_grad

    return loss, ParamSet([(k, grads[k]) for k in params])
