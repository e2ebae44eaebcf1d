# params.py
"""
Layered parameter containers and the vector algebra the simulator runs on.

1. ParamSet:
- Ordered (layer_id, shape, values) layers, float64, read-only arrays
- Congruence checks by layer id AND shape
- Flat JSON form and npz checkpoint form (row-major values)

2. Operations:
- layer_norm_diff: per-layer p-norm of a - b
- stacked_norm_diff: the same for many clients at once, one row per client
- axpy_combine: base + sum(coefficient * delta)
- scale_layers: per-layer scalar multiplication
- gaussian_like: i.i.d. N(0, sigma^2) parameters from a seeded stream

All operations return fresh ParamSets and reject non-finite results.
"""
import hashlib
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple, Union

import numpy as np

from fedsim_contribution_ledger.utils.config import DomainError, NumericError, StructuralError

class ParamSet:
    """Immutable ordered collection of named parameter layers."""

    def __init__(self, layers: Union[Mapping[str, np.ndarray], Sequence[Tuple[str, np.ndarray]]]):
        items = list(layers.items()) if isinstance(layers, Mapping) else list(layers)
        if not items:
            raise StructuralError("ParamSet needs at least one layer")

        self._layers: Dict[str, np.ndarray] = {}
        for layer_id, values in items:
            if layer_id in self._layers:
                raise StructuralError(f"Duplicate layer id '{layer_id}'")
            array = np.array(values, dtype=np.float64, copy=True)
            if array.size == 0:
                raise StructuralError(f"Layer '{layer_id}' has no elements")
            if not np.all(np.isfinite(array)):
                raise NumericError(f"Layer '{layer_id}' contains non-finite values")
            array.setflags(write=False)
            self._layers[layer_id] = array

    #--------------------------------------------
    # Structure
    #--------------------------------------------
    @property
    def layer_ids(self) -> Tuple[str, ...]:
        return tuple(self._layers)

    @property
    def shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(v.shape for v in self._layers.values())

    @property
    def layer_sizes(self) -> np.ndarray:
        return np.array([v.size for v in self._layers.values()], dtype=np.float64)

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self._layers.values()))

    def __getitem__(self, layer_id: str) -> np.ndarray:
        return self._layers[layer_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def items(self):
        return self._layers.items()

    def is_congruent(self, other: 'ParamSet') -> bool:
        return self.layer_ids == other.layer_ids and self.shapes == other.shapes

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet) or not self.is_congruent(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    __hash__ = None

    def __repr__(self) -> str:
        layout = ', '.join(f"{k}{tuple(v.shape)}" for k, v in self.items())
        return f"ParamSet({layout})"

    def digest(self) -> str:
        """sha256 over ids, shapes and raw bytes; used for non-interference checks."""
        h = hashlib.sha256()
        for layer_id, values in self.items():
            h.update(layer_id.encode('utf-8'))
            h.update(str(values.shape).encode('utf-8'))
            h.update(np.ascontiguousarray(values).tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        """All values concatenated in layer order."""
        return np.concatenate([v.ravel() for v in self._layers.values()])

    #--------------------------------------------
    # Serialization
    #--------------------------------------------
    def to_dict(self) -> Dict[str, List]:
        """Flat JSON form: [{layer_id, shape, values (row-major)}, ...]."""
        return {'layers': [
            {'layer_id': k, 'shape': list(v.shape), 'values': v.ravel().tolist()}
            for k, v in self.items()
        ]}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'ParamSet':
        try:
            return cls([
                (layer['layer_id'], np.asarray(layer['values'], dtype=np.float64).reshape(layer['shape']))
                for layer in data['layers']
            ])
        except (KeyError, ValueError, TypeError) as e:
            raise StructuralError(f"Malformed ParamSet record: {e}") from e

    def to_arrays(self, prefix: str = '') -> Dict[str, np.ndarray]:
        """Named arrays for np.savez; layer order is kept in a separate key."""
        arrays = {f"{prefix}{k}": v for k, v in self.items()}
        arrays[f"{prefix}__order__"] = np.array(self.layer_ids)
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = '') -> 'ParamSet':
        order = [str(k) for k in arrays[f"{prefix}__order__"]]
        return cls([(k, arrays[f"{prefix}{k}"]) for k in order])

#--------------------------------------------
# Validation helpers
#--------------------------------------------
def check_congruent(a: ParamSet, b: ParamSet, context: str = '') -> None:
    """Raise StructuralError unless a and b share layer ids, order and shapes."""
    if a.is_congruent(b):
        return
    where = f" ({context})" if context else ''
    raise StructuralError(f"ParamSets are not congruent{where}: {a!r} vs {b!r}")

def _finite_or_raise(layers: Dict[str, np.ndarray], operation: str) -> ParamSet:
    for layer_id, values in layers.items():
        if not np.all(np.isfinite(values)):
            raise NumericError(f"{operation} produced non-finite values in layer '{layer_id}'")
    return ParamSet(layers)

#--------------------------------------------
# Operations
#--------------------------------------------
def layer_norm_diff(a: ParamSet, b: ParamSet, p: float = 2.0) -> np.ndarray:
    """Per-layer p-norm of the elementwise difference a - b."""
    if p < 1:
        raise DomainError(f"Norm order p must be >= 1, got {p}")
    check_congruent(a, b, 'layer_norm_diff')
    return np.array([
        np.linalg.norm((a[k] - b[k]).ravel(), ord=p) for k in a
    ], dtype=np.float64)

def stacked_norm_diff(reference: ParamSet, others: Sequence[ParamSet], p: float = 2.0) -> np.ndarray:
    """(len(others), num_layers) matrix; row i is layer_norm_diff(reference, others[i], p)."""
    if p < 1:
        raise DomainError(f"Norm order p must be >= 1, got {p}")
    if not others:
        raise StructuralError("stacked_norm_diff needs at least one ParamSet")
    for i, other in enumerate(others):
        check_congruent(reference, other, f"stacked_norm_diff row {i}")
    columns = [
        np.linalg.norm(np.stack([reference[k] - other[k] for other in others]).reshape(len(others), -1),
                       ord=p, axis=1)
        for k in reference
    ]
    return np.column_stack(columns).astype(np.float64)

def axpy_combine(base: ParamSet, terms: Sequence[Tuple[float, ParamSet]]) -> ParamSet:
    """Return base + sum_i coefficient_i * delta_i, elementwise."""
    for _, delta in terms:
        check_congruent(base, delta, 'axpy_combine')
    result = {}
    for k in base:
        values = base[k].copy()
        for coefficient, delta in terms:
            values += coefficient * delta[k]
        result[k] = values
    return _finite_or_raise(result, 'axpy_combine')

def scale_layers(params: ParamSet, coefficients: Sequence[float]) -> ParamSet:
    """Multiply layer l by coefficients[l]."""
    if len(coefficients) != len(params):
        raise StructuralError(f"Expected {len(params)} layer coefficients, got {len(coefficients)}")
    result = {k: params[k] * float(c) for k, c in zip(params, coefficients)}
    return _finite_or_raise(result, 'scale_layers')

def zeros_like(template: ParamSet) -> ParamSet:
    return ParamSet([(k, np.zeros_like(v)) for k, v in template.items()])

def gaussian_like(template: ParamSet, sigma: float, stream: np.random.Generator) -> ParamSet:
    """ParamSet congruent with template, each element drawn i.i.d. from N(0, sigma^2)."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    return ParamSet([
        (k, sigma * stream.standard_normal(v.shape)) for k, v in template.items()
    ])
