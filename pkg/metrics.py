"""
Error metrics against the generating system
"""
from enum import Enum
from itertools import permutations
from typing import Callable, NamedTuple, Tuple, Union

import numpy as np

from concept_mixture import (Domain, ExpertFamily, LatentConceptSystem, covariate_rule, regression_function,
                             target_regression)
from config import Config
from em_estimation import STRONG, WEAK, FittedMixture, MixtureParams
from errors import ValidationError

Regression = Callable[[np.ndarray], np.ndarray]


class ParamFamily(Enum):
    STRONG = "strong"
    WEAK_P = "weak_p"
    WEAK_Q = "weak_q"
    PRIOR_P = "prior_p"
    PRIOR_Q = "prior_q"
    SOURCE_JOINT = "source_joint"  # strong, weak and prior of each component under one relabelling


class L2QError(NamedTuple):
    value: float
    stderr: float


class BiasFloors(NamedTuple):
    weak_target: float  # ||m_Q' - q||: weak target labels taken at face value
    source: float  # ||m_P - q||: source model with source priors


def metric_l2q(fn: Regression, system: LatentConceptSystem, mc_points: int = Config.L2Q_MC_POINTS,
               seed: int = 0) -> L2QError:
    """
    Monte Carlo ||fn - q||_{2,Q} with a delta-method standard error

    Args:
        fn: vectorised regression function on (n, d) covariates
        system: supplies x_law and the q(x) oracle
        mc_points: number of covariate draws
        seed: seed for the draws
    """
    if mc_points < 100:
        raise ValidationError(f"mc_points must be >= 100, got {mc_points}")
    x = system.x_law.sample(np.random.default_rng(seed), mc_points)
    sq = (np.asarray(fn(x), dtype=float) - target_regression(system, x)) ** 2
    mean = float(sq.mean())
    value = float(np.sqrt(mean))
    se_mean = float(sq.std(ddof=1) / np.sqrt(mc_points))
    return L2QError(value=value, stderr=se_mean / (2.0 * value) if value > 0 else 0.0)


def metric_l2q_quadrature(fn: Regression, system: LatentConceptSystem) -> float:
    """||fn - q||_{2,Q} on the covariate quadrature rule"""
    nodes, weights = covariate_rule(system)
    diff = np.asarray(fn(nodes), dtype=float) - target_regression(system, nodes)
    return float(np.sqrt(weights @ diff ** 2))


def best_permutation(estimate: np.ndarray, truth: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    """Relabelling perm minimising max_k ||estimate[perm[k]] - truth[k]||"""
    estimate = np.atleast_2d(np.asarray(estimate, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if estimate.shape != truth.shape:
        raise ValidationError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    K = truth.shape[0]
    if K > Config.MAX_PERMUTATION_K:
        raise ValidationError(f"exact permutation search supports K <= {Config.MAX_PERMUTATION_K}, got {K}")
    dist = np.linalg.norm(estimate[:, None, :] - truth[None, :, :], axis=2)
    best_perm, best_err = None, np.inf
    for perm in permutations(range(K)):
        err = dist[list(perm), np.arange(K)].max()
        if err < best_err:
            best_perm, best_err = perm, err
    return best_perm, float(best_err)


def _family_arrays(params: MixtureParams, system: LatentConceptSystem,
                   family: ParamFamily) -> Tuple[np.ndarray, np.ndarray]:
    betas = params.betas
    if family is ParamFamily.STRONG:
        return betas[STRONG], system.strong.beta
    if family is ParamFamily.WEAK_P:
        return betas[WEAK], system.weak_p.beta
    if family is ParamFamily.WEAK_Q:
        return betas[WEAK], system.weak_q.beta
    if family is ParamFamily.PRIOR_P:
        return params.pi[:, None], system.pi_p[:, None]
    if family is ParamFamily.PRIOR_Q:
        return params.pi[:, None], system.pi_q[:, None]
    est = np.hstack([betas[STRONG], betas[WEAK], params.pi[:, None]])
    truth = np.hstack([system.strong.beta, system.weak_p.beta, system.pi_p[:, None]])
    return est, truth


def metric_param_error(fit: Union[FittedMixture, MixtureParams], system: LatentConceptSystem,
                       family: Union[ParamFamily, str] = ParamFamily.STRONG) -> float:
    """Permutation-aligned max per-component parameter distance"""
    params = fit.params if isinstance(fit, FittedMixture) else fit
    if params.K != system.K:
        raise ValidationError(f"fit has K={params.K}, system has K={system.K}")
    try:
        estimate, truth = _family_arrays(params, system, ParamFamily(family))
    except KeyError as exc:
        raise ValidationError(f"fit carries no {exc} expert family") from exc
    return best_permutation(estimate, truth)[1]


def bias_floors(system: LatentConceptSystem) -> BiasFloors:
    """L2(Q) errors of the two naive plug-ins, by quadrature"""
    nodes, weights = covariate_rule(system)
    q = target_regression(system, nodes)
    weak = regression_function(system, nodes, Domain.TARGET, ExpertFamily.WEAK)
    source = regression_function(system, nodes, Domain.SOURCE, ExpertFamily.STRONG)
    return BiasFloors(weak_target=float(np.sqrt(weights @ (weak - q) ** 2)),
                      source=float(np.sqrt(weights @ (source - q) ** 2)))
