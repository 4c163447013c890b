# tools/chart_generator.py
import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
# ESSENTIAL: Use a non-GUI backend to prevent threading errors
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import plotly.graph_objects as go
import seaborn as sns

from tools.metrics import FrocPoint

logger = logging.getLogger(__name__)

# Set style for better looking charts
sns.set_style("whitegrid")
# Fixed ids and no timestamp keep SVG output identical across runs
plt.rcParams['svg.hashsalt'] = 'fiberdetect'
SVG_METADATA = {'Date': None}

DENSE_COLOR = 'darkred'
MODERATE_COLOR = 'darkorange'
ALL_COLOR = 'royalblue'


def _save_svg(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"Chart created: {path}")
    return path


def _series(points: Sequence[FrocPoint], attr: str):
    xs, ys = [], []
    for p in points:
        value = getattr(p, attr)
        if value is not None:
            xs.append(p.fp_per_section)
            ys.append(value)
    return xs, ys


def plot_froc(points: Sequence[FrocPoint], path: Path, elbow_point: Optional[FrocPoint] = None,
              operating_point: Optional[FrocPoint] = None, title: str = 'FROC: fiber bundle detection') -> Path:
    """TPR per severity against false positives per section, with the elbow and operating point marked."""
    ordered = sorted(points, key=lambda p: p.threshold)
    fig, ax = plt.subplots(figsize=(8, 6))
    for attr, label, color in (('tpr_dense', 'Dense', DENSE_COLOR),
                               ('tpr_moderate', 'Moderate', MODERATE_COLOR),
                               ('tpr_all', 'All bundles', ALL_COLOR)):
        xs, ys = _series(ordered, attr)
        if xs:
            ax.plot(xs, ys, marker='o', markersize=3, label=label, color=color, alpha=0.8)

    if elbow_point is not None:
        ax.scatter([elbow_point.fp_per_section], [elbow_point.tpr], s=90, marker='*', color='black',
                   zorder=5, label=f'Elbow (t={elbow_point.threshold:.2f})')
    if operating_point is not None:
        ax.scatter([operating_point.fp_per_section], [operating_point.tpr], s=60, marker='D',
                   facecolors='none', edgecolors='black', zorder=5,
                   label=f'Operating point (t={operating_point.threshold:.2f})')

    ax.set_xlabel('False positives per section')
    ax.set_ylabel('True positive rate')
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title, fontsize=14, fontweight='bold')
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save_svg(fig, path)


def plot_froc_interactive(points: Sequence[FrocPoint], path: Path,
                          elbow_point: Optional[FrocPoint] = None) -> Path:
    """Plotly version of the FROC curve with thresholds in the hover text."""
    ordered = sorted(points, key=lambda p: p.threshold)
    fig = go.Figure()
    for attr, label, color in (('tpr_dense', 'Dense', 'red'),
                               ('tpr_moderate', 'Moderate', 'orange'),
                               ('tpr_all', 'All bundles', 'blue')):
        kept = [p for p in ordered if getattr(p, attr) is not None]
        if not kept:
            continue
        fig.add_trace(go.Scatter(
            x=[p.fp_per_section for p in kept],
            y=[getattr(p, attr) for p in kept],
            mode='lines+markers',
            name=label,
            marker_color=color,
            text=[f"threshold {p.threshold:.2f}" for p in kept],
        ))
    if elbow_point is not None:
        fig.add_trace(go.Scatter(x=[elbow_point.fp_per_section], y=[elbow_point.tpr], mode='markers',
                                 name=f'Elbow (t={elbow_point.threshold:.2f})',
                                 marker=dict(symbol='star', size=14, color='black')))
    fig.update_layout(
        title="Fiber Bundle Detection FROC",
        xaxis_title="False positives per section",
        yaxis_title="True positive rate",
        height=600,
        showlegend=True,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs='cdn')
    logger.info(f"Interactive chart created: {path}")
    return path


def plot_boxplots(per_section: pd.DataFrame, path: Path) -> Path:
    """Per-section TPR and delta fib_dens distributions by severity."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 5))
    palette = {'dense': DENSE_COLOR, 'moderate': MODERATE_COLOR}

    for ax, prefix, title, ylabel in ((ax1, 'tpr', 'TPR per section', 'True positive rate'),
                                      (ax2, 'delta_fib_dens', 'δ fib_dens per section', 'δ fib_dens (%)')):
        columns = {f'{prefix}_dense': 'dense', f'{prefix}_moderate': 'moderate'}
        present = [c for c in columns if c in per_section.columns]
        long = per_section[present].rename(columns=columns).melt(var_name='severity', value_name='value').dropna()
        if long.empty:
            ax.text(0.5, 0.5, 'no values', ha='center', va='center', transform=ax.transAxes)
        else:
            sns.boxplot(data=long, x='severity', y='value', hue='severity', palette=palette,
                        order=['dense', 'moderate'], ax=ax, legend=False)
        ax.set_title(title, fontsize=14, fontweight='bold')
        ax.set_xlabel('Severity')
        ax.set_ylabel(ylabel)
    ax2.axhline(0.0, color='gray', linewidth=1, alpha=0.6)
    return _save_svg(fig, path)


def plot_ablation(table: pd.DataFrame, path: Path) -> Path:
    """Grouped bars of the TPR and FP columns of an ablation or cross-validation table."""
    columns = [c for c in ('tpr_dense', 'tpr_moderate', 'fp_avg') if c in table.columns]
    fig, axes = plt.subplots(1, len(columns), figsize=(5 * len(columns), 5), squeeze=False)
    for ax, column in zip(axes[0], columns):
        values = table[column].astype(float)
        bars = ax.bar(table.index.astype(str), values.fillna(0.0), color=ALL_COLOR, alpha=0.7)
        for bar, value in zip(bars, values):
            label = 'n/a' if pd.isna(value) else f'{value:.2f}'
            ax.text(bar.get_x() + bar.get_width() / 2., bar.get_height(), label,
                    ha='center', va='bottom', fontsize=9)
        ax.set_title(column, fontsize=14, fontweight='bold')
        ax.tick_params(axis='x', rotation=30)
    return _save_svg(fig, path)
