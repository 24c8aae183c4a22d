"""
Command-line entry point for the latent concept transfer lab
"""
import argparse
import sys
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from config import Config
from errors import ValidationError, W2SError, exit_code_for
from hmm_lab import anchor_word_check, cycle_witness, independence_certificate
from label_refinement import QuadratureConfig, RefinementMode, refinement_posterior, wli_bound
from concept_mixture import GatingKind, SourceDataset, sample_source, sample_target
from em_estimation import EMConfig, fit_source_mle, fit_target_mle
from experiment_harness import STRATEGIES, ExperimentConfig, run_experiment, run_strategy
from system_io import load_dataset, load_hmm_mixtures, load_system, save_dataset
from utils import format_duration, save_results_to_json
from weak_training import WeakTrainConfig, weak_train_limit_risk

LOG_FORMAT = ("<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
              "<cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>")


def configure_logging(level: str = Config.LOG_LEVEL):
    """Colourised console sink plus a rotating debug file under Config.LOGS_DIR"""
    logger.remove()
    logger.add(sys.stderr, format=LOG_FORMAT, level=level.upper())
    logger.add(
        Config.LOGS_DIR / "w2s_lab_{time}.log",
        rotation=Config.LOG_ROTATION,
        retention=Config.LOG_RETENTION,
        level="DEBUG",
    )


def _outdir(args) -> Path:
    out = Path(args.out) if args.out else Config.OUTPUT_DIR
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    system = load_system(args.config)
    source = sample_source(system, args.n, args.seed)
    target = sample_target(system, args.n_target or args.n, args.seed + 1)
    out = _outdir(args)
    src_path = save_dataset(source, out / "source.csv")
    tgt_path = save_dataset(target, out / "target.csv")
    logger.success(f"Wrote {source.n} source records to {src_path} and {target.n} target records to {tgt_path}")
    return 0


def cmd_fit(args) -> int:
    data = load_dataset(args.data, seed=args.seed)
    kind, variance = GatingKind(args.gating), args.gating_variance
    if args.config:
        system = load_system(args.config)
        kind, variance = system.gating.kind, system.gating.variance
    cfg = EMConfig(seed=args.seed, restarts=args.restarts, n_jobs=args.jobs, init=args.init,
                   gating_kind=kind, gating_variance=variance)
    if isinstance(data, SourceDataset):
        fit = fit_source_mle(data, args.K, cfg)
    else:
        fit = fit_target_mle(data, args.K, cfg)
    path = save_results_to_json(fit.to_dict(), filename=f"fit_{Path(args.data).stem}.json", outdir=_outdir(args))
    print(pd.Series(fit.to_dict()).to_string())
    logger.success(f"Fit report written to {path}")
    return 0


def cmd_w2s(args) -> int:
    system = load_system(args.config)
    cfg = ExperimentConfig(system_path=args.config, strategies=[args.strategy], n_grid=[args.n],
                           base_seed=args.seed, lam=args.lam, em={'restarts': args.restarts},
                           output_dir=str(_outdir(args)), warm_start=args.warm_start)
    start = time.perf_counter()
    report = run_strategy(cfg, args.strategy, args.n, system=system)
    result = {'report': report.as_row()}
    if args.strategy == "weak_train":
        result['limit_risk'] = weak_train_limit_risk(system, WeakTrainConfig(lam=args.lam).source_share).to_dict()
    path = save_results_to_json(result, filename=f"w2s_{args.strategy}_n{args.n}.json", outdir=_outdir(args))
    print(pd.Series(report.as_row()).to_string())
    if 'limit_risk' in result:
        print(pd.Series(result['limit_risk']).to_string())
    logger.info(f"Finished in {format_duration(time.perf_counter() - start)}; report at {path}")
    return 0 if report.status == "ok" else 2


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg.base_seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if args.jobs:
        cfg.jobs = args.jobs
    start = time.perf_counter()
    report = run_experiment(cfg)
    for verdict in report.analysis['verdicts']:
        print(verdict)
    logger.info(f"Sweep took {format_duration(time.perf_counter() - start)}")
    return 0


def cmd_hmm_check(args) -> int:
    mixtures = load_hmm_mixtures(args.config)
    out = _outdir(args)
    lines = []
    for name, mix in mixtures.items():
        for label, em in (("x", mix.emission_x), ("y", mix.emission_y)):
            verdict = anchor_word_check(em)
            lines.append(f"{name}: anchors({label}) {'pass' if verdict.passed else 'FAIL'} "
                         f"witnesses={verdict.witnesses} missing={verdict.missing_states}")
    components = [(f"{name}[{i}]", comp) for name, mix in mixtures.items() for i, comp in enumerate(mix.components)]
    for (name_a, a), (name_b, b) in combinations(components, 2):
        witness = cycle_witness(a, b, args.max_cycle_len)
        lines.append(f"cycle {name_a} vs {name_b}: "
                     + ("identical transitions" if witness is None else
                        f"{witness.path} ({witness.p_theta:.4g} > {witness.p_theta_prime:.4g})"))
    cert = independence_certificate(list(mixtures.values()), args.max_seq_len)
    text = "\n".join(lines) + "\n\n" + cert.report() + "\n"
    (out / "hmm_certificate.txt").write_text(text, encoding='utf-8')
    pd.DataFrame({'index': np.arange(cert.singular_values.size), 'singular_value': cert.singular_values}).to_csv(
        out / "hmm_singular_values.csv", index=False, float_format='%.17g', lineterminator="\n")
    print(text)
    return 0


def _grid(system, grid: str) -> np.ndarray:
    try:
        lo, hi, m = grid.split(':')
        t = np.linspace(float(lo), float(hi), int(m))
    except ValueError as exc:
        raise ValidationError(f"--grid must look like lo:hi:count, got {grid!r}") from exc
    pts = np.zeros((t.size, system.x_dim))
    pts[:, 0] = t
    return pts


def cmd_refine_inspect(args) -> int:
    system = load_system(args.config)
    mode = RefinementMode.single_label() if args.mode == "single" else RefinementMode.icl(args.M)
    quad = QuadratureConfig(seed=args.seed)
    rows = []
    for x in _grid(system, args.grid):
        post = refinement_posterior(system, x, mode, quad)
        row = {'x_0': x[0]}
        for k in range(system.K):
            row[f'p_{k}'] = post.prior_p[k]
            row[f'q_{k}'] = post.prior_q[k]
            row[f'q_hat_{k}'] = post.q_hat[k]
        if args.k_star is not None:
            for k in range(system.K):
                if k != args.k_star:
                    row[f'wli_bound_{k}'] = wli_bound(system, x, k, args.k_star, args.c, quad).bound
        rows.append(row)
    table = pd.DataFrame(rows)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    if args.out:
        table.to_csv(_outdir(args) / "refinement_inspect.csv", index=False, float_format='%.17g', lineterminator="\n")
    return 0


class LabArgumentParser(argparse.ArgumentParser):
    """Usage errors raise ValidationError so they exit through exit_code_for"""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog="w2s-lab", description="Latent concept transfer lab")
    parser.add_argument('--log-level', default=Config.LOG_LEVEL)
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, config_help="system TOML file", config_required=True):
        p.add_argument('--config', required=config_required, help=config_help)
        p.add_argument('--seed', type=int, default=0)
        p.add_argument('--out', default=None)

    p = sub.add_parser('simulate', help="sample source and target datasets")
    common(p)
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--n-target', type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('fit', help="EM fit of a dataset CSV")
    common(p, "optional system TOML supplying the gating family", config_required=False)
    p.add_argument('--data', required=True)
    p.add_argument('--K', type=int, required=True)
    p.add_argument('--restarts', type=int, default=Config.EM_RESTARTS)
    p.add_argument('--init', choices=("kmeanspp", "random"), default="kmeanspp")
    p.add_argument('--gating', choices=[k.value for k in GatingKind], default="constant")
    p.add_argument('--gating-variance', type=float, default=1.0)
    p.add_argument('--jobs', type=int, default=Config.JOBS, help="threads for EM restarts")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser('w2s', help="run one weak-to-strong strategy end to end")
    common(p)
    p.add_argument('--strategy', choices=STRATEGIES, required=True)
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--lam', type=float, default=1.0)
    p.add_argument('--restarts', type=int, default=Config.EM_RESTARTS)
    p.add_argument('--warm-start', action='store_true')
    p.set_defaults(func=cmd_w2s)

    p = sub.add_parser('sweep', help="run a YAML sweep config")
    common(p, "sweep YAML file")
    p.add_argument('--jobs', type=int, default=None, help="threads for sweep cells")
    p.set_defaults(seed=None, func=cmd_sweep)

    hmm = sub.add_parser('hmm', help="HMM mixture tools").add_subparsers(dest='hmm_command', required=True)
    p = hmm.add_parser('check', help="anchor, cycle and independence certificates")
    common(p, "HMM TOML file")
    p.add_argument('--max-seq-len', type=int, default=4)
    p.add_argument('--max-cycle-len', type=int, default=None)
    p.set_defaults(func=cmd_hmm_check)

    refine = sub.add_parser('refine', help="label refinement tools").add_subparsers(dest='refine_command', required=True)
    p = refine.add_parser('inspect', help="print q_hat(k|x) and WLI bounds over an x grid")
    common(p)
    p.add_argument('--grid', default="-3:3:13", help="lo:hi:count along the first covariate")
    p.add_argument('--mode', choices=("single", "icl"), default="single")
    p.add_argument('--M', type=int, default=1)
    p.add_argument('--k-star', type=int, default=None)
    p.add_argument('--c', type=float, default=0.125)
    p.set_defaults(func=cmd_refine_inspect)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        logger.error(str(exc))
        return exit_code_for(exc)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except W2SError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exit_code_for(exc)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.error(f"numerical failure: {exc}")
        return exit_code_for(exc)


if __name__ == '__main__':
    sys.exit(main())
