"""
Utility functions for reports and plots
"""
import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from config import Config  # noqa: E402
from errors import ValidationError  # noqa: E402
from experiment_analyzer import METRIC_COLUMNS, ExperimentAnalyzer  # noqa: E402

# fixed SVG ids and no timestamp keep plot files byte-stable
plt.rcParams['svg.hashsalt'] = 'latent-concept-lab'
SVG_METADATA = {'Date': None}
METRIC_LABELS = {'l2q_error': 'L2(Q) error of q_hat', 'param_error': 'aligned parameter error'}


def _to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def save_results_to_json(results: Dict, filename: str = None, outdir: Union[str, Path] = None) -> str:
    """
    Save results to a JSON file

    Args:
        results: Results dictionary
        filename: Output filename (optional)
        outdir: Output directory, Config.OUTPUT_DIR by default

    Returns:
        Path to saved file
    """
    if filename is None:
        filename = f"results_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
    outdir = Path(outdir) if outdir is not None else Config.OUTPUT_DIR
    outdir.mkdir(parents=True, exist_ok=True)
    filepath = outdir / filename

    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(results, f, indent=2, ensure_ascii=False, default=_to_jsonable)

    return str(filepath)


def _analysis_of(report) -> Dict:
    return report.analysis if hasattr(report, 'analysis') else report


def emit_plots(report, outdir: Union[str, Path]) -> List[str]:
    """
    Write one log-log error-vs-n plot per metric and a bar chart of final-n errors

    Args:
        report: ExperimentReport or analysis dictionary
        outdir: Directory for the SVG files

    Returns:
        Paths of the written files
    """
    analysis = _analysis_of(report)
    aggregate = analysis.get('aggregate') if analysis else None
    if aggregate is None or aggregate.empty:
        raise ValidationError("cannot plot an empty report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    strategies = list(dict.fromkeys(aggregate['strategy']))
    paths = []

    for metric in METRIC_COLUMNS:
        if not np.isfinite(aggregate[f'{metric}_median'].to_numpy(dtype=float)).any():
            continue
        fig, ax = plt.subplots(figsize=(8, 6))
        for strategy in strategies:
            sub = aggregate[aggregate['strategy'] == strategy]
            med = sub[f'{metric}_median'].to_numpy(dtype=float)
            if not np.isfinite(med).any():
                continue
            lower = med - sub[f'{metric}_q25'].to_numpy(dtype=float)
            upper = sub[f'{metric}_q75'].to_numpy(dtype=float) - med
            label = strategy
            fit = ExperimentAnalyzer.fit_slope(aggregate, strategy, metric)
            if fit is not None:
                label = f"{strategy} (slope {fit.slope:.2f})"
            ax.errorbar(sub['n_p'], med, yerr=[lower, upper], marker='o', capsize=4, label=label)
        ax.set_xscale('log')
        ax.set_yscale('log')
        ax.set_xlabel('samples per domain (n)', fontsize=12)
        ax.set_ylabel(METRIC_LABELS[metric], fontsize=12)
        ax.set_title(f'{METRIC_LABELS[metric]} vs n (median, IQR)', fontsize=14, fontweight='bold')
        ax.grid(which='both', alpha=0.3)
        ax.legend()
        path = outdir / f"{metric}_vs_n.svg"
        fig.savefig(path, format='svg', metadata=SVG_METADATA)
        plt.close(fig)
        paths.append(str(path))

    final = aggregate.loc[aggregate.groupby('strategy', sort=False)['n_p'].idxmax()]
    fig, ax = plt.subplots(figsize=(8, 6))
    values = final['l2q_error_median'].to_numpy(dtype=float)
    ax.bar(final['strategy'], np.nan_to_num(values), color='steelblue', alpha=0.7)
    for i, value in enumerate(values):
        if np.isfinite(value):
            ax.text(i, value, f'{value:.3g}', ha='center', va='bottom', fontweight='bold')
    ax.set_ylabel('median L2(Q) error', fontsize=12)
    ax.set_title('Error at the largest n per strategy', fontsize=14, fontweight='bold')
    ax.grid(axis='y', alpha=0.3)
    path = outdir / "final_n_l2q_error.svg"
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    paths.append(str(path))
    return paths


def generate_report(analysis: Dict, output_path: Optional[Union[str, Path]] = None) -> str:
    """
    Generate a text report of a sweep analysis

    Args:
        analysis: ExperimentAnalyzer.analyze output
        output_path: Output path for report file

    Returns:
        Path to saved report
    """
    if output_path is None:
        output_path = Config.OUTPUT_DIR / f"sweep_report_{datetime.now().strftime('%Y%m%d_%H%M%S')}.txt"

    with open(output_path, 'w', encoding='utf-8') as f:
        f.write("=" * 80 + "\n")
        f.write("          LATENT CONCEPT TRANSFER LAB - SWEEP REPORT\n")
        f.write("=" * 80 + "\n\n")

        f.write(f"Report Generated: {analysis.get('timestamp', 'N/A')}\n")
        f.write(f"Rows: {analysis.get('total_rows', 0)} ({analysis.get('failed_rows', 0)} failed)\n\n")

        f.write("-" * 80 + "\n")
        f.write("CONVERGENCE RATES (log-log slope of median L2(Q) error)\n")
        f.write("-" * 80 + "\n\n")
        for strategy, fit in analysis.get('slopes', {}).items():
            if fit is None:
                f.write(f"{strategy}: n/a\n")
            else:
                f.write(f"{strategy}: {fit.slope:+.3f} +/- {fit.stderr:.3f} over {fit.n_points} sizes\n")
        f.write("\n")

        f.write("-" * 80 + "\n")
        f.write("RANKING AT LARGEST n\n")
        f.write("-" * 80 + "\n\n")
        for rank, entry in enumerate(analysis.get('ranking', []), 1):
            f.write(f"Rank {rank}: {entry['strategy']} (n={entry['n_p']}, "
                    f"median error {entry['l2q_error_median']:.4g})\n")
        f.write("\n")

        rates = analysis.get('assignment_rate', {})
        if rates:
            f.write("-" * 80 + "\n")
            f.write("ASSIGNMENT CORRECTNESS\n")
            f.write("-" * 80 + "\n\n")
            for n, rate in rates.items():
                f.write(f"n={n}: {100 * rate:.1f}%\n")
            f.write("\n")

        f.write("-" * 80 + "\n")
        f.write("VERDICTS\n")
        f.write("-" * 80 + "\n\n")
        for i, verdict in enumerate(analysis.get('verdicts', []), 1):
            f.write(f"{i}. {verdict}\n")

        f.write("\n" + "=" * 80 + "\n")

    return str(output_path)


def format_duration(seconds: float) -> str:
    """Format duration in seconds to human-readable string"""
    seconds = int(round(seconds))
    if seconds < 60:
        return f"{seconds}s"
    elif seconds < 3600:
        return f"{seconds // 60}m {seconds % 60}s"
    else:
        return f"{seconds // 3600}h {(seconds % 3600) // 60}m"
