# runner.py
"""
Experiment orchestration for federated contribution measurement. Core functionality:

1. Configuration:
- make_experiment_config: preset resolution, agent-count wiring, model defaults

2. Round loop (run_experiment):
- select -> parallel client updates -> attention -> aggregate -> ledger
  -> contributions -> evaluate -> persist
- every stochastic site seeded from (master_seed, site, round, agent)
- per-phase wall-clock timings; failures raise RunAbortedError(round, phase)
- rounds.jsonl and trace/round_NNNN.npz written as each round completes

3. Post-hoc analysis:
- run_shapley: exact or Monte Carlo Shapley on the recorded trace
- compare_with_shapley: correlation and bottom-n agreement with FedCM
- export: contributions.csv, attention.csv, summary.json

Class: RunRecord - everything a run produced, reloadable from its directory
"""
import copy
import hashlib
import json
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
import psutil
import yaml
from joblib import Parallel, delayed
from pydantic import ValidationError

from fedsim_contribution_ledger.aggregation import (
    AttentionMatrix, attention_aggregate, compute_attention, draw_dp_noise,
    fedavg_aggregate, select_agents
)
from fedsim_contribution_ledger.contribution.ledger import (
    ContributionVector, ImpactLedger, contributions, normalize_scores,
    round_impact, round_impact_noise, shared_impact_noise
)
from fedsim_contribution_ledger.contribution.shapley import (
    make_federated_characteristic, shapley_exact, shapley_mc
)
from fedsim_contribution_ledger.data import ScenarioData, build_scenario, preset_spec
from fedsim_contribution_ledger.metrics import EvalReport, evaluate
from fedsim_contribution_ledger.models import init_params
from fedsim_contribution_ledger.trace import RoundTrace, RunTrace, round_trace_path
from fedsim_contribution_ledger.trainer import client_update_with_losses
from fedsim_contribution_ledger.utils.config import (
    ConfigError, ExperimentConfig, RunAbortedError, ScenarioSpec,
    StructuralError, check_model_matches_scenario, default_model_spec,
    parse_shapley_mode, resolve_output_dir
)
from fedsim_contribution_ledger.utils.seeding import (
    DP, IMPACT_DP, INIT, SELECT, SHAPLEY, TRAIN, agent_streams, derive_stream
)
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

MEMORY_WARNING_PERCENT = 75
EXPORT_FILES = ('contributions.csv', 'attention.csv', 'summary.json')

#--------------------------------------------
# Configuration
#--------------------------------------------
def make_experiment_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validated ExperimentConfig from a raw (YAML) dict.

    scenario may be a preset name, {'preset': name, <field overrides>} or a
    full inline spec. selection.num_agents follows the scenario's K.
    """
    raw = copy.deepcopy(raw or {})
    try:
        scenario = raw.get('scenario', 'normal')
        if isinstance(scenario, str):
            spec = preset_spec(scenario)
        elif isinstance(scenario, dict) and 'preset' in scenario:
            overrides = dict(scenario)
            spec = preset_spec(overrides.pop('preset'), **overrides)
        elif isinstance(scenario, ScenarioSpec):
            spec = scenario
        else:
            spec = ScenarioSpec(**scenario)
        raw['scenario'] = spec

        selection = dict(raw.get('selection') or {})
        if selection.get('num_agents', spec.num_agents) != spec.num_agents:
            raise ConfigError(f"selection.num_agents={selection['num_agents']} but scenario "
                              f"'{spec.name}' has {spec.num_agents} agents")
        selection['num_agents'] = spec.num_agents
        raw['selection'] = selection

        config = ExperimentConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e

    if config.model is None:
        config = config.model_copy(update={'model': default_model_spec(spec)})
    check_model_matches_scenario(config.model, spec)
    return config

def config_digest(config: ExperimentConfig) -> str:
    """sha256 of the settings that influence results (not workers, paths or logging)."""
    payload = config.model_dump(mode='json', exclude={'workers', 'output_dir', 'logging'})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()

def make_run_id(config: ExperimentConfig) -> str:
    return f"{config.scenario.name}_s{config.master_seed}_{config_digest(config)[:8]}"

#--------------------------------------------
# Records
#--------------------------------------------
@dataclass
class RoundRecord:
    """Everything one round produced, in its rounds.jsonl form."""
    round_idx: int
    selected: Tuple[int, ...]
    attention: AttentionMatrix
    impact: np.ndarray
    contribution: np.ndarray
    measured: bool
    eval_report: EvalReport
    timings: Dict[str, float] = field(default_factory=dict)
    train_loss: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'round': self.round_idx,
            'selected': list(self.selected),
            'measured': self.measured,
            'impact': self.impact.tolist(),
            'contribution': self.contribution.tolist(),
            'attention': self.attention.to_dict(),
            'eval': self.eval_report.to_dict(),
            'timings': self.timings,
            'train_loss': {str(k): v for k, v in self.train_loss.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RoundRecord':
        return cls(
            round_idx=data['round'],
            selected=tuple(data['selected']),
            attention=AttentionMatrix.from_dict(data['attention']),
            impact=np.asarray(data['impact'], dtype=np.float64),
            contribution=np.asarray(data['contribution'], dtype=np.float64),
            measured=data['measured'],
            eval_report=EvalReport(**data['eval']),
            timings=data.get('timings', {}),
            train_loss={int(k): v for k, v in data.get('train_loss', {}).items()},
        )

@dataclass
class ShapleyResult:
    mode: str
    raw: np.ndarray
    normalized: np.ndarray
    evaluations: int
    seconds: float
    seed: int

    @property
    def label(self) -> str:
        return self.mode.replace('(', '').replace(')', '')

    def to_dict(self) -> Dict[str, Any]:
        return {'mode': self.mode, 'raw': self.raw.tolist(), 'normalized': self.normalized.tolist(),
                'evaluations': self.evaluations, 'seconds': self.seconds, 'seed': self.seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ShapleyResult':
        return cls(data['mode'], np.asarray(data['raw']), np.asarray(data['normalized']),
                   data['evaluations'], data['seconds'], data['seed'])

@dataclass
class RunRecord:
    run_id: str
    config: ExperimentConfig
    run_dir: Path
    trace: RunTrace
    rounds: List[RoundRecord] = field(default_factory=list)
    shapley: Dict[str, ShapleyResult] = field(default_factory=dict)

    @property
    def num_agents(self) -> int:
        return self.config.scenario.num_agents

    @property
    def final_round(self) -> RoundRecord:
        if not self.rounds:
            raise StructuralError(f"Run {self.run_id} has no completed rounds")
        return self.rounds[-1]

    @property
    def final_contribution(self) -> ContributionVector:
        last = self.final_round
        return ContributionVector(last.round_idx, last.contribution)

    def phase_totals(self) -> Dict[str, float]:
        totals: Dict[str, float] = {}
        for record in self.rounds:
            for phase, seconds in record.timings.items():
                totals[phase] = totals.get(phase, 0.0) + seconds
        return totals

    def contribution_history(self) -> pd.DataFrame:
        """Rounds x agents frame of con_t."""
        return pd.DataFrame([r.contribution for r in self.rounds],
                            index=pd.Index([r.round_idx for r in self.rounds], name='round'),
                            columns=pd.Index(range(self.num_agents), name='agent_id'))

    @classmethod
    def load(cls, run_dir: Path) -> 'RunRecord':
        """Rebuild a record, its trace and any Shapley results from disk."""
        run_dir = Path(run_dir)
        config_path = run_dir / 'config.yaml'
        rounds_path = run_dir / 'rounds.jsonl'
        if not config_path.exists() or not rounds_path.exists():
            raise StructuralError(f"{run_dir} is not a run directory (config.yaml / rounds.jsonl missing)")
        with open(config_path, 'r') as f:
            raw = yaml.safe_load(f) or {}
        # config.yaml omits output_dir; the record lives where it was found
        config = make_experiment_config({**raw, 'output_dir': str(run_dir.parent)})
        with open(rounds_path, 'r') as f:
            rounds = [RoundRecord.from_dict(json.loads(line)) for line in f if line.strip()]
        record = cls(run_dir.name, config, run_dir, RunTrace.load(run_dir / 'trace'), rounds)
        for path in sorted(run_dir.glob('shapley_*.json')):
            with open(path, 'r') as f:
                result = ShapleyResult.from_dict(json.load(f))
            record.shapley[result.mode] = result
        return record

def _prepare_run_dir(run_dir: Path, config: ExperimentConfig) -> None:
    trace_dir = run_dir / 'trace'
    trace_dir.mkdir(parents=True, exist_ok=True)
    stale = list(trace_dir.glob('*.npz')) + list(run_dir.glob('shapley_*.json'))
    stale += [run_dir / name for name in EXPORT_FILES if (run_dir / name).exists()]
    for path in stale:
        path.unlink()
    shutil.rmtree(run_dir / 'plots', ignore_errors=True)
    with open(run_dir / 'config.yaml', 'w') as f:
        yaml.safe_dump(config.model_dump(mode='json', exclude={'output_dir'}), f, sort_keys=False)
    (run_dir / 'rounds.jsonl').write_text('')

def _append_round(run_dir: Path, record: RoundRecord) -> None:
    with open(run_dir / 'rounds.jsonl', 'a') as f:
        f.write(json.dumps(record.to_dict()) + '\n')
        f.flush()

#--------------------------------------------
# Round loop
#--------------------------------------------
@contextmanager
def _phase(timings: Dict[str, float], round_idx: int, name: str) -> Iterator[None]:
    start = perf_counter()
    try:
        yield
    except RunAbortedError:
        raise
    except Exception as e:
        logger.error(f"Round {round_idx} failed in phase '{name}': {e}", exc_info=True)
        raise RunAbortedError(round_idx, name, e) from e
    finally:
        timings[name] = timings.get(name, 0.0) + perf_counter() - start

def _check_memory_usage() -> None:
    memory_percent = psutil.Process().memory_percent()
    if memory_percent > MEMORY_WARNING_PERCENT:
        logger.warning(f"High memory usage ({memory_percent:.1f}%)")

def run_experiment(config: ExperimentConfig,
                   data: Optional[ScenarioData] = None) -> RunRecord:
    """Execute config.rounds rounds and persist the record incrementally.

    A partially written run directory is left in place when a round aborts.
    """
    spec, model_spec = config.scenario, config.model
    if not isinstance(spec, ScenarioSpec) or model_spec is None:
        raise ConfigError("run_experiment needs a config built by make_experiment_config")
    seed = config.master_seed
    agg_cfg = config.aggregation

    run_id = make_run_id(config)
    run_dir = resolve_output_dir(config) / run_id
    _prepare_run_dir(run_dir, config)
    logger.info(f"Run {run_id}: {spec.num_agents} agents, {config.rounds} rounds, "
                f"aggregator={config.aggregator}, writing to {run_dir}")

    data = data or build_scenario(spec, seed)
    shard_sizes = data.shard_sizes
    server = init_params(model_spec, derive_stream(seed, INIT))
    trace = RunTrace(server)
    trace.save_initial(run_dir / 'trace')
    ledger = ImpactLedger(spec.num_agents)
    record = RunRecord(run_id, config, run_dir, trace)

    for t in range(1, config.rounds + 1):
        timings: Dict[str, float] = {}
        _check_memory_usage()

        with _phase(timings, t, 'select'):
            selected = select_agents(config.selection, t, derive_stream(seed, SELECT, t))

        with _phase(timings, t, 'train'):
            train_streams = agent_streams(seed, TRAIN, t, selected)
            results = Parallel(n_jobs=config.workers, prefer='threads')(
                delayed(client_update_with_losses)(model_spec, server, data.shards[k], config.trainer,
                                                   train_streams[k])
                for k in selected
            )
            clients = {k: params for k, (params, _) in zip(selected, results)}
            train_loss = {k: losses[-1] for k, (_, losses) in zip(selected, results)}
            losses_text = ", ".join(f"{k}: {v:.4f}" for k, v in train_loss.items())
            logger.debug(f"Round {t} final epoch losses: {losses_text}")

        with _phase(timings, t, 'aggregate'):
            attn = compute_attention(server, clients, agg_cfg.norm_order, agg_cfg.negate_scores)
            dp_noise = None
            if config.aggregator == 'attention':
                if agg_cfg.dp_weight > 0:
                    dp_noise = draw_dp_noise(server, agg_cfg.dp_sigma, agent_streams(seed, DP, t, selected))
                new_server = attention_aggregate(server, clients, attn, agg_cfg, noise=dp_noise)
            else:
                weights = shard_sizes if agg_cfg.weighted_fedavg else None
                new_server = fedavg_aggregate(clients, weights)

        with _phase(timings, t, 'ledger'):
            measured = t % config.contribution.every_n_rounds == 0
            if measured:
                impact_noise = None
                if agg_cfg.dp_weight > 0:
                    if config.impact.share_dp_noise and dp_noise is not None:
                        impact_noise = shared_impact_noise(dp_noise)
                    else:
                        impact_noise = round_impact_noise(spec.num_agents, len(server), agg_cfg.dp_sigma,
                                                          derive_stream(seed, IMPACT_DP, t), selected)
                round_impact(server, new_server, clients, attn, agg_cfg, config.gamma,
                             ledger, selected, t, noise=impact_noise)
            else:
                ledger.carry_over(t, selected)
            con = contributions(ledger, t)

        with _phase(timings, t, 'evaluate'):
            report = evaluate(model_spec, new_server, data.eval_set, t)

        with _phase(timings, t, 'persist'):
            round_trace = RoundTrace(t, selected, server, new_server, clients, attn, dp_noise)
            round_trace.save(round_trace_path(run_dir / 'trace', t))
            trace.append(round_trace)
            round_record = RoundRecord(t, selected, attn, ledger.current.copy(), con.values,
                                       measured, report, dict(timings), train_loss)
            _append_round(run_dir, round_record)
            record.rounds.append(round_record)
        # persist time is only known once the phase has closed
        round_record.timings = dict(timings)

        logger.info(f"Round {t}/{config.rounds}: {len(selected)} agents, {report.metric}={report.value:.4f}, "
                    f"train {timings['train']:.3f}s, ledger {timings['ledger'] * 1000:.2f}ms")
        server = new_server

    totals = record.phase_totals()
    if totals.get('train', 0) > 0:
        logger.info(f"Contribution bookkeeping took {totals['ledger'] / totals['train']:.2%} of local training time")

    mode, _ = config.shapley_mode
    if mode != 'off':
        run_shapley(record, config.shapley, config.shapley_seed, data=data)
    return record

#--------------------------------------------
# Shapley baseline
#--------------------------------------------
def run_shapley(record: RunRecord,
                mode: str,
                seed: int = 0,
                data: Optional[ScenarioData] = None,
                n_jobs: Optional[int] = None) -> ShapleyResult:
    """Shapley values of every agent from subset replays of the recorded run."""
    config = record.config
    kind, iterations = parse_shapley_mode(mode)
    if kind == 'off':
        raise ConfigError("run_shapley needs mode 'exact' or 'mc(M)'")
    data = data or build_scenario(config.scenario, config.master_seed)
    weights = data.shard_sizes if config.aggregation.weighted_fedavg else None
    chi = make_federated_characteristic(record.trace, data.eval_set, config.model, config.aggregation,
                                        config.aggregator, weights)
    agents = list(range(record.num_agents))

    start = perf_counter()
    if kind == 'exact':
        values = shapley_exact(chi, agents, n_jobs=n_jobs or config.workers)
    else:
        values = shapley_mc(chi, agents, iterations, derive_stream(seed, SHAPLEY))
    seconds = perf_counter() - start

    raw = np.array([values[k] for k in agents])
    canonical = 'exact' if kind == 'exact' else f"mc({iterations})"
    result = ShapleyResult(canonical, raw, normalize_scores(raw), chi.evaluations, seconds, seed)
    record.shapley[canonical] = result
    with open(record.run_dir / f"shapley_{result.label}.json", 'w') as f:
        json.dump(result.to_dict(), f, indent=2)

    bookkeeping = record.phase_totals().get('ledger', 0.0)
    logger.info(f"Shapley {canonical}: {chi.evaluations} subset replays in {seconds:.2f}s "
                f"(FedCM bookkeeping: {bookkeeping:.4f}s)")
    return result

def _correlation(a: np.ndarray, b: np.ndarray, method: str) -> Optional[float]:
    value = pd.Series(a).corr(pd.Series(b), method=method)
    return None if pd.isna(value) else float(value)

def compare_with_shapley(record: RunRecord, bottom_n: Optional[int] = None) -> Dict[str, Dict[str, Any]]:
    """Per Shapley mode: Pearson/Spearman vs. the final con vector and bottom-n agents."""
    if not record.shapley:
        return {}
    con = record.final_contribution
    if bottom_n is None:
        corrupted = {a for c in record.config.scenario.corruptions for a in c.agent_ids}
        bottom_n = len(corrupted) or 2
    comparison = {}
    for mode, result in record.shapley.items():
        shapley_bottom = [int(a) for a in np.argsort(result.normalized, kind='stable')[:bottom_n]]
        fedcm_bottom = con.ranking()[:bottom_n]
        comparison[mode] = {
            'pearson': _correlation(con.values, result.normalized, 'pearson'),
            'spearman': _correlation(con.values, result.normalized, 'spearman'),
            'bottom_n': bottom_n,
            'fedcm_bottom': fedcm_bottom,
            'shapley_bottom': shapley_bottom,
            'bottom_overlap': len(set(fedcm_bottom) & set(shapley_bottom)),
        }
    return comparison

#--------------------------------------------
# Export
#--------------------------------------------
def contributions_frame(record: RunRecord) -> pd.DataFrame:
    """One row per (round, agent): round, agent_id, selected, imp, con."""
    rows = []
    for r in record.rounds:
        selected = set(r.selected)
        for k in range(record.num_agents):
            rows.append({'round': r.round_idx, 'agent_id': k, 'selected': int(k in selected),
                         'imp': float(r.impact[k]), 'con': float(r.contribution[k])})
    return pd.DataFrame(rows, columns=['round', 'agent_id', 'selected', 'imp', 'con'])

def attention_frame(record: RunRecord) -> pd.DataFrame:
    """One row per (round, selected agent, layer): round, agent_id, layer_id, alpha."""
    frames = [r.attention.to_frame().assign(round=r.round_idx) for r in record.rounds]
    frame = pd.concat(frames, ignore_index=True)
    return frame[['round', 'agent_id', 'layer_id', 'alpha']]

def summary(record: RunRecord) -> Dict[str, Any]:
    last = record.final_round
    totals = record.phase_totals()
    train_total = totals.get('train', 0.0)
    return {
        'run_id': record.run_id,
        'config': record.config.model_dump(mode='json', exclude={'output_dir'}),
        'rounds_completed': len(record.rounds),
        'final': {
            'round': last.round_idx,
            'impact': last.impact.tolist(),
            'contribution': last.contribution.tolist(),
            'ranking': record.final_contribution.ranking(),
            'eval': last.eval_report.to_dict(),
        },
        'eval_history': [r.eval_report.to_dict() for r in record.rounds],
        'shapley': {mode: result.to_dict() for mode, result in record.shapley.items()},
        'comparison': compare_with_shapley(record),
        'timings': {
            'phase_totals': totals,
            'bookkeeping_to_training': totals.get('ledger', 0.0) / train_total if train_total > 0 else None,
            'shapley_seconds': {mode: result.seconds for mode, result in record.shapley.items()},
        },
    }

def export(record: RunRecord, fmt: str = 'both', out_dir: Optional[Path] = None) -> List[Path]:
    """Write the CSV tables and/or the JSON summary; returns the written paths."""
    if fmt not in ('csv', 'json', 'both'):
        raise ConfigError(f"Unknown export format '{fmt}'")
    out_dir = Path(out_dir) if out_dir is not None else record.run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    if fmt in ('csv', 'both'):
        contributions_frame(record).to_csv(out_dir / 'contributions.csv', index=False)
        attention_frame(record).to_csv(out_dir / 'attention.csv', index=False)
        written += [out_dir / 'contributions.csv', out_dir / 'attention.csv']
    if fmt in ('json', 'both'):
        with open(out_dir / 'summary.json', 'w') as f:
            json.dump(summary(record), f, indent=2)
        written.append(out_dir / 'summary.json')
    logger.info(f"Exported {', '.join(p.name for p in written)} to {out_dir}")
    return written
