"""
Latent Concept Identification
Fit both domains, match target components to source components through their
weak experts, and move the target priors onto the source strong experts
"""
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.optimize import linear_sum_assignment

from concept_mixture import (ExpertParams, GatingKind, LatentConceptSystem, SourceDataset, TargetDataset,
                             min_pairwise_distance)
from config import Config
from em_estimation import STRONG, WEAK, EMConfig, FittedMixture, MixtureParams, fit_source_mle, fit_target_mle
from errors import AssignmentError, ValidationError

ALIGNMENT = "relabel_target"


@dataclass(frozen=True)
class Assignment:
    """
    Map from target-fit component j to source-fit component mapping[j]

    Components listed in reassigned carry too little target mass to be matched
    by distance and were moved off their argmin onto an unused source component.
    """
    mapping: np.ndarray
    distances: np.ndarray
    is_permutation: bool
    reassigned: Tuple[int, ...] = ()

    def __getitem__(self, j: int) -> int:
        return int(self.mapping[j])


class SeparationMargin(NamedTuple):
    c: float  # largest within-concept squared gap
    delta: float  # cross-concept squared gap minus c
    satisfied: bool


class IdentifiabilityReport(NamedTuple):
    identifiable: bool
    issues: List[str]


def assign_components(weak_p_hat: ExpertParams, weak_q_hat: ExpertParams) -> Assignment:
    """
    Nearest-neighbour matching of weak expert coefficients

    distances[j, k] is the squared Euclidean gap between target component j and
    source component k; each row picks its argmin, lowest index on ties.
    """
    bp = np.asarray(weak_p_hat.beta)
    bq = np.asarray(weak_q_hat.beta)
    if bp.shape != bq.shape:
        raise ValidationError(f"weak experts disagree in shape: {bp.shape} vs {bq.shape}")
    distances = ((bq[:, None, :] - bp[None, :, :]) ** 2).sum(axis=2)
    mapping = np.argmin(distances, axis=1)
    is_perm = len(set(mapping.tolist())) == mapping.size
    return Assignment(mapping=mapping, distances=distances, is_permutation=is_perm)


def resolve_vanished_components(assignment: Assignment, pi_hat: np.ndarray,
                                min_weight: float = Config.ASSIGN_MIN_WEIGHT) -> Assignment:
    """
    Complete a colliding assignment when the collisions come from near-empty components

    Target components with pi_hat >= min_weight keep their nearest neighbour and
    must still match one-to-one. The rest are spread over the unused source
    components by minimum total distance. Returns the input unchanged when it is
    already a permutation or when the heavy components collide among themselves.
    """
    if assignment.is_permutation:
        return assignment
    pi_hat = np.asarray(pi_hat, dtype=float)
    if pi_hat.shape != assignment.mapping.shape:
        raise ValidationError(f"pi_hat has shape {pi_hat.shape}, mapping has {assignment.mapping.shape}")
    heavy = pi_hat >= min_weight
    taken = assignment.mapping[heavy]
    if np.unique(taken).size < taken.size:
        return assignment

    light = np.flatnonzero(~heavy)
    free = np.setdiff1d(np.arange(assignment.mapping.size), taken)
    rows, cols = linear_sum_assignment(assignment.distances[np.ix_(light, free)])
    mapping = assignment.mapping.copy()
    mapping[light[rows]] = free[cols]
    moved = tuple(int(j) for j in light if mapping[j] != assignment.mapping[j])
    logger.warning(f"Reassigned near-empty target components {moved} (pi_hat < {min_weight:g}): "
                   f"{assignment.mapping.tolist()} -> {mapping.tolist()}")
    return Assignment(mapping=mapping, distances=assignment.distances, is_permutation=True, reassigned=moved)


def separation_margin(weak_p: ExpertParams, weak_q: ExpertParams) -> SeparationMargin:
    """Within-concept vs cross-concept squared gaps of aligned weak experts"""
    bp = np.asarray(weak_p.beta)
    bq = np.asarray(weak_q.beta)
    if bp.shape != bq.shape:
        raise ValidationError(f"weak experts disagree in shape: {bp.shape} vs {bq.shape}")
    dist = ((bq[:, None, :] - bp[None, :, :]) ** 2).sum(axis=2)
    within = float(np.diag(dist).max())
    K = dist.shape[0]
    if K == 1:
        return SeparationMargin(c=within, delta=np.inf, satisfied=True)
    cross = float(dist[~np.eye(K, dtype=bool)].min())
    delta = cross - within
    return SeparationMargin(c=within, delta=delta, satisfied=delta > 0)


def check_identifiability(system: LatentConceptSystem) -> IdentifiabilityReport:
    """Distinct gating locations and distinct, independent experts"""
    issues = []
    if system.gating.kind is GatingKind.GAUSSIAN and system.K > 1 and min_pairwise_distance(system.gating.eta) <= 0:
        issues.append("gating locations are not distinct")
    for name in ("strong", "weak_p", "weak_q"):
        beta = getattr(system, name).beta
        if system.K > 1 and min_pairwise_distance(beta) <= 0:
            issues.append(f"{name} experts are not pairwise distinct")
        elif np.linalg.matrix_rank(beta) < min(beta.shape):
            issues.append(f"{name} experts are linearly dependent")
    margin = separation_margin(system.weak_p, system.weak_q)
    if not margin.satisfied:
        issues.append(f"weak experts are not separated across domains (c={margin.c:.4g}, delta={margin.delta:.4g})")
    return IdentifiabilityReport(identifiable=not issues, issues=issues)


@dataclass(frozen=True)
class IdentificationResult:
    fit_p: FittedMixture
    fit_q: FittedMixture
    assignment: Assignment
    target_params: MixtureParams  # source gating and strong experts with transported target priors
    alignment: str = ALIGNMENT

    def regression(self, x: np.ndarray) -> np.ndarray:
        """Plug-in target regression q_hat(x)"""
        return self.target_params.regression(x, STRONG)

    def to_dict(self) -> Dict:
        return {
            'alignment': self.alignment,
            'assignment': self.assignment.mapping.tolist(),
            'reassigned': list(self.assignment.reassigned),
            'distances': self.assignment.distances.tolist(),
            'pi_q_aligned': self.target_params.pi.tolist(),
            'source_fit': self.fit_p.to_dict(),
            'target_fit': self.fit_q.to_dict(),
        }


def latent_concept_identification(source: SourceDataset, target: TargetDataset, K: int,
                                  cfg: Optional[EMConfig] = None, warm_start: bool = False,
                                  min_weight: float = Config.ASSIGN_MIN_WEIGHT) -> IdentificationResult:
    """
    Fit source and target by EM, match components, reassemble the target model

    A cold-start target fit whose matching still collides after near-empty
    components are set aside is redone once from the source weak experts.

    Args:
        source: source triples
        target: target weak pairs
        K: number of concepts
        cfg: EM settings shared by both fits
        warm_start: start the target fit from the source weak experts
        min_weight: target components below this prior are matched last

    Returns:
        IdentificationResult whose regression() is the plug-in q_hat(x)
    """
    cfg = cfg or EMConfig()
    if source.n == 0 or target.n == 0:
        raise ValidationError("identification needs nonempty source and target data")
    fit_p = fit_source_mle(source, K, cfg)
    warm_init = MixtureParams(np.full(K, 1.0 / K), fit_p.params.gating,
                              {WEAK: fit_p.beta_hat[WEAK]}, fit_p.sigma_hat)

    def match(use_warm_start: bool):
        fit = fit_target_mle(target, K, replace(cfg, seed=cfg.seed + 1), gating_fixed=fit_p.params.gating,
                             init_params=warm_init if use_warm_start else None)
        raw = assign_components(fit_p.params.experts(WEAK), fit.params.experts(WEAK))
        return fit, resolve_vanished_components(raw, fit.pi_hat, min_weight)

    fit_q, assignment = match(warm_start)
    if not assignment.is_permutation and not warm_start:
        logger.warning(f"Cold-start target fit matched {assignment.mapping.tolist()}; "
                       f"retrying from the source weak experts")
        fit_q, assignment = match(True)
    if not assignment.is_permutation:
        raise AssignmentError("weak components do not match one-to-one", assignment.distances,
                              assignment.mapping)

    pi_aligned = np.empty(K)
    pi_aligned[assignment.mapping] = fit_q.pi_hat
    target_params = MixtureParams(pi_aligned, fit_p.params.gating,
                                  {STRONG: fit_p.beta_hat[STRONG]}, fit_p.sigma_hat)
    logger.success(f"Identified target concepts: assignment={assignment.mapping.tolist()}, "
                   f"pi_q={np.round(pi_aligned, 4).tolist()}")
    return IdentificationResult(fit_p=fit_p, fit_q=fit_q, assignment=assignment, target_params=target_params)
