# trace.py
"""
Recorded per-round server snapshots and client updates.

The trace is what post-hoc Shapley replay needs: every round's server
parameters before and after aggregation, each selected agent's returned
parameters, the attention used and any DP noise. Rounds are checkpointed
to trace/round_NNNN.npz in the ParamSet array form.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from fedsim_contribution_ledger.aggregation import AttentionMatrix
from fedsim_contribution_ledger.params import ParamSet
from fedsim_contribution_ledger.utils.config import StructuralError

@dataclass
class RoundTrace:
    round_idx: int
    selected: Tuple[int, ...]
    server_before: ParamSet
    server_after: ParamSet
    clients: Dict[int, ParamSet]
    attention: Optional[AttentionMatrix] = None
    dp_noise: Optional[Dict[int, ParamSet]] = None

    def save(self, path: Path) -> None:
        arrays = {}
        arrays.update(self.server_before.to_arrays('before:'))
        arrays.update(self.server_after.to_arrays('after:'))
        for k, params in self.clients.items():
            arrays.update(params.to_arrays(f"client{k}:"))
        for k, params in (self.dp_noise or {}).items():
            arrays.update(params.to_arrays(f"noise{k}:"))
        meta = {
            'round_idx': self.round_idx,
            'selected': list(self.selected),
            'attention': self.attention.to_dict() if self.attention is not None else None,
            'has_noise': self.dp_noise is not None,
        }
        arrays['__meta__'] = np.array(json.dumps(meta))
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: Path) -> 'RoundTrace':
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(str(arrays['__meta__']))
        selected = tuple(meta['selected'])
        return cls(
            round_idx=meta['round_idx'],
            selected=selected,
            server_before=ParamSet.from_arrays(arrays, 'before:'),
            server_after=ParamSet.from_arrays(arrays, 'after:'),
            clients={k: ParamSet.from_arrays(arrays, f"client{k}:") for k in selected},
            attention=AttentionMatrix.from_dict(meta['attention']) if meta['attention'] else None,
            dp_noise=({k: ParamSet.from_arrays(arrays, f"noise{k}:") for k in selected}
                      if meta['has_noise'] else None),
        )

@dataclass
class RunTrace:
    """Initial parameters plus every recorded round, in order."""
    initial_params: ParamSet
    rounds: List[RoundTrace] = field(default_factory=list)

    def append(self, round_trace: RoundTrace) -> None:
        if self.rounds and round_trace.round_idx <= self.rounds[-1].round_idx:
            raise StructuralError("Trace rounds must be appended in increasing order")
        self.rounds.append(round_trace)

    def truncated(self, last_round: int) -> 'RunTrace':
        return RunTrace(self.initial_params, [r for r in self.rounds if r.round_idx <= last_round])

    def save_initial(self, trace_dir: Path) -> None:
        trace_dir.mkdir(parents=True, exist_ok=True)
        np.savez(trace_dir / 'initial.npz', **self.initial_params.to_arrays())

    @classmethod
    def load(cls, trace_dir: Path) -> 'RunTrace':
        initial = trace_dir / 'initial.npz'
        if not initial.exists():
            raise StructuralError(f"No trace found in {trace_dir}")
        with np.load(initial) as data:
            initial_params = ParamSet.from_arrays({k: data[k] for k in data.files})
        trace = cls(initial_params)
        for path in sorted(trace_dir.glob('round_*.npz')):
            trace.append(RoundTrace.load(path))
        return trace

def round_trace_path(trace_dir: Path, round_idx: int) -> Path:
    return trace_dir / f"round_{round_idx:04d}.npz"
