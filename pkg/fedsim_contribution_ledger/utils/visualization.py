# fedsim_contribution_ledger/utils/visualization.py
"""
Plotting utilities for run records.

Provides standardized plotting functionality with:
  - Common figure/axis setup and consistent styling
  - Final FedCM contributions next to normalized Shapley values
  - Per-agent contribution history over rounds
"""
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Tuple, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

if TYPE_CHECKING:
    from fedsim_contribution_ledger.runner import RunRecord
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

class PlottingUtils:
    """Centralized plotting utilities with common setup and styling."""

    def __init__(self, plots_dir: Union[str, Path]):
        self.output_dir = Path(plots_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def setup_axis(self, ax: plt.Axes,
                   title: Optional[str] = None,
                   xlabel: Optional[str] = None,
                   ylabel: Optional[str] = None,
                   legend: bool = True,
                   grid: bool = True) -> plt.Axes:
        """Common axis setup with consistent styling."""
        if title:
            ax.set_title(title, pad=20)
        if xlabel:
            ax.set_xlabel(xlabel)
        if ylabel:
            ax.set_ylabel(ylabel)
        if legend:
            ax.legend()
        if grid:
            ax.grid(True, alpha=0.3)
        return ax

    def create_figure(self,
                      figsize: Tuple[int, int] = (10, 6),
                      title: Optional[str] = None) -> Tuple[plt.Figure, plt.Axes]:
        fig, ax = plt.subplots(figsize=figsize)
        if title:
            fig.suptitle(title)
        return fig, ax

    def save_figure(self,
                    fig: plt.Figure,
                    filename: str,
                    dpi: int = 150,
                    bbox_inches: str = 'tight') -> Path:
        """Save figure with standard settings and close it."""
        filepath = self.output_dir / filename
        fig.savefig(filepath, dpi=dpi, bbox_inches=bbox_inches)
        plt.close(fig)
        logger.info(f"Saved plot to {filepath}")
        return filepath

    #--------------------------------------------
    # Run record plots
    #--------------------------------------------
    def plot_contributions(self, record: 'RunRecord', filename: str = 'contributions.png') -> Path:
        """Grouped bars per agent: final FedCM contribution and each Shapley vector."""
        con = record.final_contribution
        series = {f"FedCM (round {con.round_idx})": con.values}
        for mode, result in record.shapley.items():
            series[f"Shapley {mode}"] = result.normalized

        agents = np.arange(record.num_agents)
        width = 0.8 / len(series)
        fig, ax = self.create_figure(figsize=(max(8, record.num_agents * 0.6), 5))
        for i, (label, values) in enumerate(series.items()):
            ax.bar(agents + (i - (len(series) - 1) / 2) * width, values, width, label=label)
        ax.axhline(1.0 / record.num_agents, color='gray', linestyle='--', linewidth=1)
        ax.set_xticks(agents)
        self.setup_axis(ax, title=f"Agent contributions: {record.run_id}",
                        xlabel='Agent', ylabel='Normalized contribution')
        return self.save_figure(fig, filename)

    def plot_contribution_history(self, record: 'RunRecord',
                                  filename: str = 'contribution_history.png') -> Path:
        """One line per agent of con_t over rounds; corrupted agents dashed."""
        history = record.contribution_history()
        corrupted = {a for c in record.config.scenario.corruptions for a in c.agent_ids}

        fig, ax = self.create_figure(figsize=(10, 6))
        for agent in history.columns:
            ax.plot(history.index, history[agent], marker='o', markersize=3,
                    linestyle='--' if agent in corrupted else '-', label=f"agent {agent}")
        self.setup_axis(ax, title=f"Contribution history: {record.run_id}",
                        xlabel='Round', ylabel='Contribution', legend=False)
        ax.legend(fontsize='small', ncol=2, loc='center left', bbox_to_anchor=(1.0, 0.5))
        return self.save_figure(fig, filename)
