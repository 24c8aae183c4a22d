"""
Experiment Harness
Seeded sweeps of weak-to-strong strategies over sample sizes and replicates,
streamed to a versioned CSV and summarised by ExperimentAnalyzer
"""
import csv
import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml
from loguru import logger
from tqdm import tqdm

from concept_identification import latent_concept_identification
from concept_mixture import LatentConceptSystem, sample_source, sample_target
from config import Config
from em_estimation import STRONG, WEAK, EMConfig, fit_source_mle, fit_target_mle
from errors import ValidationError, W2SError
from experiment_analyzer import ExperimentAnalyzer
from label_refinement import QuadratureConfig, RefinementMode, refine_labels
from metrics import ParamFamily, best_permutation, metric_l2q, metric_param_error
from system_io import load_system
from utils import emit_plots, generate_report, save_results_to_json
from weak_training import WeakTrainConfig, weak_train

STRATEGIES = ("identification", "weak_train", "refinement", "source_only", "weak_only")
METRICS = ("l2q", "param_error")
SCHEMA_LINE = f"# w2s-strategy-report schema {Config.CSV_SCHEMA_VERSION}"
CSV_FIELDS = ("schema_version", "strategy", "n_p", "n_q", "replicate", "seed", "status", "reason",
              "l2q_error", "l2q_stderr", "param_error", "assignment_correct", "wall_time")


@dataclass
class ExperimentConfig:
    system_path: str
    strategies: List[str]
    n_grid: List[int]
    replicates: int = 1
    base_seed: int = 0
    output_dir: str = str(Config.OUTPUT_DIR / "sweep")
    metrics: List[str] = field(default_factory=lambda: list(METRICS))
    lam: float = 1.0
    em: Dict = field(default_factory=dict)
    l2q_mc_points: int = Config.L2Q_MC_POINTS
    warm_start: bool = False
    jobs: int = Config.JOBS
    plots: bool = True

    def __post_init__(self):
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if not self.strategies or unknown:
            raise ValidationError(f"strategies must be a nonempty subset of {STRATEGIES}; unknown: {unknown}")
        bad_metrics = [m for m in self.metrics if m not in METRICS]
        if bad_metrics:
            raise ValidationError(f"unknown metrics {bad_metrics}; choose from {METRICS}")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])) or min(self.n_grid) < 1:
            raise ValidationError(f"n_grid must be nonempty, positive and strictly ascending, got {self.n_grid}")
        if self.replicates < 1 or self.jobs < 1:
            raise ValidationError("replicates and jobs must be >= 1")
        EMConfig(**self.em)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"sweep config not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML ({exc})") from exc
        if 'system' in raw:
            raw['system_path'] = raw.pop('system')
        system_path = Path(raw.get('system_path', ''))
        if not system_path.is_absolute() and not system_path.is_file():
            candidate = path.parent / system_path
            if candidate.is_file():
                raw['system_path'] = str(candidate)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc


@dataclass
class StrategyReport:
    strategy: str
    n_p: int
    n_q: int
    replicate: int
    seed: int
    status: str = "ok"
    reason: str = ""
    l2q_error: float = math.nan
    l2q_stderr: float = math.nan
    param_error: float = math.nan
    assignment_correct: Optional[int] = None
    wall_time: float = 0.0
    schema_version: int = Config.CSV_SCHEMA_VERSION

    def as_row(self) -> Dict:
        row = asdict(self)
        row['assignment_correct'] = "" if self.assignment_correct is None else self.assignment_correct
        return {k: row[k] for k in CSV_FIELDS}


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: List[StrategyReport]
    analysis: Dict
    csv_path: str
    plot_paths: List[str] = field(default_factory=list)

    @property
    def aggregate(self) -> pd.DataFrame:
        return self.analysis['aggregate']

    @property
    def slopes(self) -> Dict:
        return self.analysis['slopes']


def derive_seed(base_seed: int, strategy: str, n: int, replicate: int) -> int:
    """Stable 64-bit seed from (base, strategy, n, replicate)"""
    digest = hashlib.blake2b(f"{base_seed}|{strategy}|{n}|{replicate}".encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def _assignment_correct(result, system: LatentConceptSystem) -> int:
    perm_p, _ = best_permutation(result.fit_p.beta_hat[WEAK], system.weak_p.beta)
    perm_q, _ = best_permutation(result.fit_q.beta_hat[WEAK], system.weak_q.beta)
    return int(all(result.assignment.mapping[perm_q[k]] == perm_p[k] for k in range(system.K)))


class _StrategyRunner:
    """Runs one (strategy, n, replicate) cell against a fixed system"""

    def __init__(self, system: LatentConceptSystem, cfg: ExperimentConfig):
        self.system = system
        self.cfg = cfg
        self.handlers: Dict[str, Callable] = {
            "identification": self._identification,
            "weak_train": self._weak_train,
            "refinement": self._refinement,
            "source_only": self._source_only,
            "weak_only": self._weak_only,
        }

    def _em(self, seed: int) -> EMConfig:
        return EMConfig(**{**self.cfg.em, 'seed': seed, 'gating_kind': self.system.gating.kind,
                           'gating_variance': self.system.gating.variance})

    def _identification(self, source, target, seed) -> Tuple[Callable, float, Optional[int]]:
        result = latent_concept_identification(source, target, self.system.K, self._em(seed),
                                               warm_start=self.cfg.warm_start)
        return (result.regression, metric_param_error(result.fit_p, self.system, ParamFamily.SOURCE_JOINT),
                _assignment_correct(result, self.system))

    def _weak_train(self, source, target, seed):
        fit = weak_train(source, target, WeakTrainConfig(lam=self.cfg.lam, em=self._em(seed)))
        return fit.predict, math.nan, None

    def _refinement(self, source, target, seed):
        refined = refine_labels(self.system, target.x, RefinementMode.single_label(), seed,
                                QuadratureConfig(method="gauss_hermite"))
        x = refined.x
        coef = np.linalg.solve(x.T @ x + self._em(seed).ridge * np.eye(x.shape[1]), x.T @ refined.y_hat)
        return (lambda z: np.atleast_2d(z) @ coef), math.nan, None

    def _source_only(self, source, target, seed):
        fit = fit_source_mle(source, self.system.K, self._em(seed))
        return ((lambda z: fit.params.regression(z, STRONG)),
                metric_param_error(fit, self.system, ParamFamily.SOURCE_JOINT), None)

    def _weak_only(self, source, target, seed):
        fit = fit_target_mle(target, self.system.K, self._em(seed))
        return ((lambda z: fit.params.regression(z, WEAK)),
                metric_param_error(fit, self.system, ParamFamily.WEAK_Q), None)

    def __call__(self, task: Tuple[str, int, int]) -> StrategyReport:
        strategy, n, replicate = task
        seed = derive_seed(self.cfg.base_seed, strategy, n, replicate)
        report = StrategyReport(strategy=strategy, n_p=n, n_q=n, replicate=replicate, seed=seed)
        src_seed, tgt_seed, fit_seed, metric_seed = (
            int(s) for s in np.random.SeedSequence(seed).generate_state(4, dtype=np.uint64))
        start = time.perf_counter()
        try:
            source = sample_source(self.system, n, src_seed)
            target = sample_target(self.system, n, tgt_seed)
            fn, param_error, correct = self.handlers[strategy](source, target, fit_seed % 2**63)
            if "l2q" in self.cfg.metrics:
                err = metric_l2q(fn, self.system, self.cfg.l2q_mc_points, metric_seed)
                report.l2q_error, report.l2q_stderr = err.value, err.stderr
            if "param_error" in self.cfg.metrics:
                report.param_error = param_error
            report.assignment_correct = correct
        except (W2SError, np.linalg.LinAlgError) as exc:
            report.status = "failed"
            report.reason = f"{type(exc).__name__}: {str(exc).splitlines()[0]}"
            logger.warning(f"{strategy} n={n} rep={replicate} failed: {report.reason}")
        report.wall_time = time.perf_counter() - start
        return report


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Run every (strategy, n, replicate) cell and write the CSV in that fixed order

    Strategy errors become failed rows; I/O errors abort the run.
    """
    system = load_system(cfg.system_path)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "strategy_reports.csv"
    tasks = [(s, n, r) for s in cfg.strategies for n in cfg.n_grid for r in range(cfg.replicates)]
    runner = _StrategyRunner(system, cfg)
    logger.info(f"Running sweep: {len(cfg.strategies)} strategies x {len(cfg.n_grid)} sizes x "
                f"{cfg.replicates} replicates = {len(tasks)} cells (jobs={cfg.jobs})")

    rows: List[StrategyReport] = []
    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        f.write(SCHEMA_LINE + "\n")
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            for report in tqdm(pool.map(runner, tasks), total=len(tasks), desc="sweep", unit="cell"):
                writer.writerow(report.as_row())
                f.flush()
                rows.append(report)

    analyzer = ExperimentAnalyzer()
    analysis = analyzer.analyze(load_rows(csv_path))
    analysis['aggregate'].to_csv(outdir / "aggregate.csv", index=False, float_format='%.17g', lineterminator="\n")
    save_results_to_json(analyzer.summary(analysis), filename="summary.json", outdir=outdir)
    generate_report(analysis, outdir / "report.txt")
    plot_paths = emit_plots(analysis, outdir) if cfg.plots else []
    failed = sum(r.status != "ok" for r in rows)
    logger.success(f"Sweep finished: {len(rows)} rows ({failed} failed) -> {csv_path}")
    return ExperimentReport(config=cfg, rows=rows, analysis=analysis, csv_path=str(csv_path), plot_paths=plot_paths)


def load_rows(csv_path) -> pd.DataFrame:
    """Read a strategy-report CSV back, checking its schema line"""
    with open(csv_path, 'r', encoding='utf-8') as f:
        first = f.readline().strip()
    if first != SCHEMA_LINE:
        raise ValidationError(f"{csv_path}: expected schema line {SCHEMA_LINE!r}, got {first!r}")
    return pd.read_csv(csv_path, skiprows=1)


def run_strategy(cfg: ExperimentConfig, strategy: str, n: int, replicate: int = 0,
                 system: Optional[LatentConceptSystem] = None) -> StrategyReport:
    """One sweep cell on its own, seeded exactly as run_experiment would seed it"""
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    system = system or load_system(cfg.system_path)
    return _StrategyRunner(system, cfg)((strategy, n, replicate))
