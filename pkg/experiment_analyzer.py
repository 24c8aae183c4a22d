"""
Experiment Analyzer Module
Aggregates strategy reports, fits convergence rates and ranks strategies
"""
from datetime import datetime
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd
from loguru import logger
from scipy.stats import linregress

from errors import ValidationError

METRIC_COLUMNS = ("l2q_error", "param_error")
CONSISTENT_SLOPE = -0.15
PLATEAU_SLOPE = -0.05


class SlopeFit(NamedTuple):
    slope: float
    stderr: float
    intercept: float
    n_points: int


class ExperimentAnalyzer:
    """Summarises per-replicate strategy reports into rates and verdicts"""

    def __init__(self):
        self.history = []

    def analyze(self, rows: pd.DataFrame) -> Dict:
        """
        Aggregate raw rows and derive rates, ranking and verdicts

        Args:
            rows: strategy-report rows as read from the sweep CSV

        Returns:
            Analysis dictionary (aggregate frame, slopes, ranking, verdicts)
        """
        if rows is None or rows.empty:
            raise ValidationError("no strategy reports to analyse")

        logger.info(f"Analysing {len(rows)} strategy reports")
        aggregate = self.aggregate(rows)
        slopes = {s: self.fit_slope(aggregate, s) for s in aggregate['strategy'].unique()}
        ranking = self._rank_final(aggregate)

        analysis = {
            'timestamp': datetime.now().isoformat(),
            'total_rows': int(len(rows)),
            'failed_rows': int((rows['status'] != 'ok').sum()),
            'aggregate': aggregate,
            'slopes': slopes,
            'ranking': ranking,
            'assignment_rate': self._assignment_rate(rows),
            'verdicts': self._verdicts(slopes, ranking),
        }
        self.history.append(analysis)
        logger.success("Experiment analysis completed")
        return analysis

    @staticmethod
    def aggregate(rows: pd.DataFrame) -> pd.DataFrame:
        """Median, quartiles and IQR of each metric per (strategy, n_p) over successful rows"""
        order = list(dict.fromkeys(rows['strategy']))
        ok = rows[rows['status'] == 'ok']
        records = []
        for (strategy, n), group in rows.groupby(['strategy', 'n_p'], sort=False):
            good = ok[(ok['strategy'] == strategy) & (ok['n_p'] == n)]
            record = {'strategy': strategy, 'n_p': int(n), 'replicates': int(len(group)),
                      'failed': int(len(group) - len(good))}
            for col in METRIC_COLUMNS:
                values = good[col].dropna().to_numpy(dtype=float)
                if values.size:
                    q25, med, q75 = np.percentile(values, [25, 50, 75])
                else:
                    q25 = med = q75 = np.nan
                record[f'{col}_median'] = med
                record[f'{col}_q25'] = q25
                record[f'{col}_q75'] = q75
                record[f'{col}_iqr'] = q75 - q25
            records.append(record)
        frame = pd.DataFrame(records)
        frame['_order'] = frame['strategy'].map({s: i for i, s in enumerate(order)})
        return frame.sort_values(['_order', 'n_p']).drop(columns='_order').reset_index(drop=True)

    @staticmethod
    def fit_slope(aggregate: pd.DataFrame, strategy: str, metric: str = 'l2q_error') -> Optional[SlopeFit]:
        """Least-squares slope of log median error against log n; None below two points"""
        sub = aggregate[aggregate['strategy'] == strategy]
        med = sub[f'{metric}_median'].to_numpy(dtype=float)
        n = sub['n_p'].to_numpy(dtype=float)
        keep = np.isfinite(med) & (med > 0)
        if keep.sum() < 2:
            return None
        fit = linregress(np.log(n[keep]), np.log(med[keep]))
        stderr = float(fit.stderr) if keep.sum() > 2 else 0.0
        return SlopeFit(slope=float(fit.slope), stderr=stderr, intercept=float(fit.intercept),
                        n_points=int(keep.sum()))

    @staticmethod
    def _rank_final(aggregate: pd.DataFrame) -> List[Dict]:
        final = aggregate.loc[aggregate.groupby('strategy', sort=False)['n_p'].idxmax()]
        final = final.sort_values('l2q_error_median', na_position='last')
        return [{'strategy': r.strategy, 'n_p': int(r.n_p), 'l2q_error_median': float(r.l2q_error_median)}
                for r in final.itertuples()]

    @staticmethod
    def _assignment_rate(rows: pd.DataFrame) -> Dict[int, float]:
        if 'assignment_correct' not in rows:
            return {}
        flagged = rows[(rows['status'] == 'ok') & rows['assignment_correct'].notna()]
        return {int(n): float(g['assignment_correct'].astype(float).mean())
                for n, g in flagged.groupby('n_p')}

    @staticmethod
    def _verdicts(slopes: Dict[str, Optional[SlopeFit]], ranking: List[Dict]) -> List[str]:
        verdicts = []
        for strategy, fit in slopes.items():
            if fit is None:
                verdicts.append(f"{strategy}: single sample size, no rate fitted")
            elif fit.slope <= CONSISTENT_SLOPE:
                verdicts.append(f"{strategy}: error shrinks with n (slope {fit.slope:.3f}), consistent")
            elif fit.slope >= PLATEAU_SLOPE:
                verdicts.append(f"{strategy}: error plateaus (slope {fit.slope:.3f}), biased limit")
            else:
                verdicts.append(f"{strategy}: slow decrease (slope {fit.slope:.3f})")
        if ranking and np.isfinite(ranking[0]['l2q_error_median']):
            best = ranking[0]
            verdicts.append(f"lowest error at n={best['n_p']}: {best['strategy']} "
                            f"({best['l2q_error_median']:.4g})")
        return verdicts

    @staticmethod
    def summary(analysis: Dict) -> Dict:
        """JSON-friendly view of an analysis"""
        return {
            'timestamp': analysis['timestamp'],
            'total_rows': analysis['total_rows'],
            'failed_rows': analysis['failed_rows'],
            'slopes': {s: (f._asdict() if f is not None else None) for s, f in analysis['slopes'].items()},
            'ranking': analysis['ranking'],
            'assignment_rate': analysis['assignment_rate'],
            'verdicts': analysis['verdicts'],
            'aggregate': analysis['aggregate'].replace({np.nan: None}).to_dict(orient='records'),
        }
