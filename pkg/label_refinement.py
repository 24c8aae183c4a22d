"""
Label Refinement
Concept reweighting q_hat(k|x) = sum_k' q(k'|x) P{k | x, k'} through the
conditional confusion matrix of the source posterior fed target weak labels
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad_vec
from scipy.special import logsumexp
from scipy.stats import norm

from concept_mixture import GatingKind, LatentConceptSystem, as_points, covariate_rule, gate_weights
from config import Config
from errors import QuadratureError, ValidationError

SINGLE_LABEL = "single_label"
ICL = "icl"
QUAD_METHODS = ("adaptive", "gauss_hermite")


@dataclass(frozen=True)
class RefinementMode:
    kind: str = SINGLE_LABEL
    M: int = 1

    def __post_init__(self):
        if self.kind not in (SINGLE_LABEL, ICL):
            raise ValidationError(f"unknown refinement mode {self.kind!r}")
        if self.kind == ICL and self.M < 1:
            raise ValidationError(f"in-context refinement needs M >= 1, got {self.M}")

    @classmethod
    def single_label(cls) -> "RefinementMode":
        return cls(SINGLE_LABEL, 1)

    @classmethod
    def icl(cls, M: int) -> "RefinementMode":
        return cls(ICL, M)

    def __str__(self) -> str:
        return SINGLE_LABEL if self.kind == SINGLE_LABEL else f"icl(M={self.M})"


@dataclass(frozen=True)
class QuadratureConfig:
    epsabs: float = Config.QUAD_EPSABS
    epsrel: float = Config.QUAD_EPSREL
    half_width: float = Config.QUAD_HALF_WIDTH
    method: str = "adaptive"
    order: int = Config.GH_ORDER
    mc_draws: int = Config.ICL_MC_DRAWS
    seed: int = 0

    def __post_init__(self):
        if self.method not in QUAD_METHODS:
            raise ValidationError(f"quadrature method must be one of {QUAD_METHODS}")
        if self.mc_draws < 2 or self.order < 1 or self.half_width <= 0:
            raise ValidationError("mc_draws >= 2, order >= 1 and half_width > 0 are required")


@dataclass(frozen=True)
class RefinementPosterior:
    """Updated concept weights at x and the confusion matrix behind them"""
    x: np.ndarray
    q_hat: np.ndarray
    confusion: np.ndarray  # [k', k] = P{k | x, k'}
    mode: RefinementMode
    prior_p: np.ndarray
    prior_q: np.ndarray
    error: float = 0.0  # quadrature error estimate or Monte Carlo standard error
    seed: Optional[int] = None
    stderr: Optional[np.ndarray] = field(default=None, repr=False)


class RefinedLabels(NamedTuple):
    x: np.ndarray
    y_hat: np.ndarray
    q_hat: np.ndarray


class WLIBound(NamedTuple):
    bound: float
    q_hat_k: float
    p_k: float
    delta_sq: float


def _check_noise(system: LatentConceptSystem):
    if system.weak_p.noise_sd <= 0:
        raise ValidationError("refinement needs a source weak expert with noise_sd > 0")


def _source_posterior(system: LatentConceptSystem, prior_p: np.ndarray, mu_p: np.ndarray,
                      y: np.ndarray) -> np.ndarray:
    """p(k | x, y') for a vector of weak labels y', shape (len(y), K)"""
    with np.errstate(divide='ignore'):
        logw = np.log(prior_p)[None, :] + norm.logpdf(y[:, None], loc=mu_p[None, :], scale=system.weak_p.noise_sd)
    return np.exp(logw - logsumexp(logw, axis=1, keepdims=True))


def _confusion_single(system: LatentConceptSystem, x: np.ndarray, prior_p: np.ndarray,
                      quad: QuadratureConfig) -> Tuple[np.ndarray, float]:
    mu_p = system.weak_p.means(x[None, :])[0]
    mu_q = system.weak_q.means(x[None, :])[0]
    sd_q = system.weak_q.noise_sd
    K = system.K
    confusion = np.empty((K, K))
    error = 0.0
    for kp in range(K):
        if sd_q == 0:
            confusion[kp] = _source_posterior(system, prior_p, mu_p, np.array([mu_q[kp]]))[0]
            continue
        if quad.method == "gauss_hermite":
            z, w = hermegauss(quad.order)
            post = _source_posterior(system, prior_p, mu_p, mu_q[kp] + sd_q * z)
            confusion[kp] = (w / np.sqrt(2.0 * np.pi)) @ post
            continue

        def integrand(y, kp=kp):
            dens = norm.pdf(y, loc=mu_q[kp], scale=sd_q)
            return _source_posterior(system, prior_p, mu_p, np.array([y]))[0] * dens

        lo = mu_q[kp] - quad.half_width * sd_q
        hi = mu_q[kp] + quad.half_width * sd_q
        value, err, info = quad_vec(integrand, lo, hi, epsabs=quad.epsabs, epsrel=quad.epsrel,
                                    full_output=True)
        if not info.success:
            raise QuadratureError(f"quadrature over y' did not converge for row {kp} at x={x.tolist()} "
                                  f"(status={info.status}, error={err:.3g})")
        confusion[kp] = value
        error = max(error, float(err))
    return confusion, error


def _demonstration_covariates(system: LatentConceptSystem, k: int, count: int,
                              rng: np.random.Generator) -> np.ndarray:
    """x ~ x_law accepted with probability q(k|x), i.e. covariates of target concept k"""
    if system.gating.kind is GatingKind.CONSTANT or system.pi_q[k] == 0:
        return system.x_law.sample(rng, count)
    batches, have = [], 0
    while have < count:
        cand = system.x_law.sample(rng, max(count, 1024))
        keep = cand[rng.random(cand.shape[0]) < gate_weights(cand, system.pi_q, system.gating)[:, k]]
        batches.append(keep)
        have += keep.shape[0]
    return np.concatenate(batches)[:count]


def _log_concept_covariate_ratio(system: LatentConceptSystem, xs: np.ndarray) -> np.ndarray:
    """log p(x|k) - log p(x) = log p(k|x) - log p(k) under the source model, shape (..., K)"""
    if system.gating.kind is GatingKind.CONSTANT:
        return np.zeros(xs.shape[:-1] + (system.K,))
    nodes, weights = covariate_rule(system)
    marginal = weights @ gate_weights(nodes, system.pi_p, system.gating)
    flat = xs.reshape(-1, system.x_dim)
    with np.errstate(divide='ignore'):
        ratio = np.log(gate_weights(flat, system.pi_p, system.gating)) - np.log(marginal)[None, :]
    return ratio.reshape(xs.shape[:-1] + (system.K,))


def _confusion_icl(system: LatentConceptSystem, prior_p: np.ndarray, M: int,
                   quad: QuadratureConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Monte Carlo over M demonstration pairs drawn from target concept k' for row k'

    Pairs are independent given the concept. Each pair contributes its weak-label
    likelihood and, under gaussian gating, how typical its covariate is of each
    concept; the query x enters through its gate weights only.
    """
    K = system.K
    sd_p, sd_q = system.weak_p.noise_sd, system.weak_q.noise_sd
    R = quad.mc_draws
    confusion = np.empty((K, K))
    stderr = np.empty((K, K))
    children = np.random.SeedSequence(quad.seed).spawn(K)
    with np.errstate(divide='ignore'):
        log_prior = np.log(prior_p)
    for kp in range(K):
        rng = np.random.default_rng(children[kp])
        xs = _demonstration_covariates(system, kp, R * M, rng).reshape(R, M, system.x_dim)
        means_q = xs @ system.weak_q.beta[kp]
        ys = means_q + sd_q * rng.standard_normal((R, M))
        means_p = xs @ system.weak_p.beta.T  # (R, M, K)
        loglik = (norm.logpdf(ys[:, :, None], loc=means_p, scale=sd_p)
                  + _log_concept_covariate_ratio(system, xs)).sum(axis=1)
        logw = log_prior[None, :] + loglik
        post = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        confusion[kp] = post.mean(axis=0)
        stderr[kp] = post.std(axis=0, ddof=1) / np.sqrt(R)
    return confusion, stderr


def refinement_posterior(system: LatentConceptSystem, x, mode: Optional[RefinementMode] = None,
                         quad: Optional[QuadratureConfig] = None) -> RefinementPosterior:
    """
    Refined concept weights at a single covariate vector

    Args:
        system: generating (or fitted) system supplying both domains
        x: covariate vector
        mode: single weak label or M in-context demonstrations
        quad: quadrature / Monte Carlo settings

    Returns:
        RefinementPosterior with q_hat = q(.|x) @ confusion
    """
    mode = mode or RefinementMode.single_label()
    quad = quad or QuadratureConfig()
    _check_noise(system)
    pts, _ = as_points(x, system.x_dim)
    point = pts[0]
    prior_p = gate_weights(point, system.pi_p, system.gating)
    prior_q = gate_weights(point, system.pi_q, system.gating)

    stderr = None
    seed = None
    if mode.kind == SINGLE_LABEL:
        confusion, error = _confusion_single(system, point, prior_p, quad)
        rows = confusion.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > Config.ROW_SUM_TOL):
            raise QuadratureError(f"confusion rows sum to {rows.tolist()} at x={point.tolist()}")
    else:
        confusion, stderr = _confusion_icl(system, prior_p, mode.M, quad)
        error = float(stderr.max())
        seed = quad.seed
    q_hat = prior_q @ confusion
    logger.debug(f"Refinement at x={np.round(point, 4).tolist()} ({mode}): q_hat={np.round(q_hat, 6).tolist()}")
    return RefinementPosterior(x=point, q_hat=q_hat, confusion=confusion, mode=mode, prior_p=prior_p,
                               prior_q=prior_q, error=error, seed=seed, stderr=stderr)


def refinement_posterior_batch(system: LatentConceptSystem, xs: np.ndarray,
                               order: int = Config.GH_ORDER) -> Tuple[np.ndarray, np.ndarray]:
    """Single-label q_hat and confusion for many x at once by Gauss-Hermite, shapes (n, K), (n, K, K)"""
    _check_noise(system)
    pts, _ = as_points(xs, system.x_dim)
    prior_p = np.atleast_2d(gate_weights(pts, system.pi_p, system.gating))
    prior_q = np.atleast_2d(gate_weights(pts, system.pi_q, system.gating))
    mu_p = system.weak_p.means(pts)
    mu_q = system.weak_q.means(pts)
    if system.weak_q.noise_sd == 0:
        z, w = np.zeros(1), np.ones(1)
    else:
        z, w = hermegauss(order)
        w = w / np.sqrt(2.0 * np.pi)
    y = mu_q[:, :, None] + system.weak_q.noise_sd * z[None, None, :]  # (n, K', m)
    with np.errstate(divide='ignore'):
        logw = (np.log(prior_p)[:, None, None, :]
                + norm.logpdf(y[..., None], loc=mu_p[:, None, None, :], scale=system.weak_p.noise_sd))
    post = np.exp(logw - logsumexp(logw, axis=3, keepdims=True))  # (n, K', m, K)
    confusion = np.einsum('m,nimk->nik', w, post)
    q_hat = np.einsum('ni,nik->nk', prior_q, confusion)
    return q_hat, confusion


def confusion_riemann(system: LatentConceptSystem, x, points: int = 10**6,
                      half_width: float = 10.0) -> np.ndarray:
    """Brute-force midpoint-rule confusion matrix over a dense y' grid"""
    _check_noise(system)
    pts, _ = as_points(x, system.x_dim)
    point = pts[0]
    prior_p = gate_weights(point, system.pi_p, system.gating)
    mu_p = system.weak_p.means(pts)[0]
    mu_q = system.weak_q.means(pts)[0]
    sd_q = system.weak_q.noise_sd
    confusion = np.empty((system.K, system.K))
    for kp in range(system.K):
        h = 2.0 * half_width * sd_q / points
        y = mu_q[kp] - half_width * sd_q + h * (np.arange(points) + 0.5)
        dens = norm.pdf(y, loc=mu_q[kp], scale=sd_q)
        confusion[kp] = h * (dens @ _source_posterior(system, prior_p, mu_p, y))
    return confusion


def refine_labels(system: LatentConceptSystem, xs, mode: Optional[RefinementMode] = None, seed: int = 0,
                  quad: Optional[QuadratureConfig] = None) -> RefinedLabels:
    """
    Draw refined labels y_hat | x ~ sum_k q_hat(k|x) N(beta_k^T x, sigma^2)

    Posteriors are computed once per distinct x.
    """
    mode = mode or RefinementMode.single_label()
    quad = quad or QuadratureConfig()
    pts, _ = as_points(xs, system.x_dim)
    if pts.shape[0] == 0:
        raise ValidationError("refine_labels needs at least one x")
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    draw_seq, post_seq = np.random.SeedSequence(seed).spawn(2)

    if mode.kind == SINGLE_LABEL and quad.method == "gauss_hermite":
        q_uniq, _ = refinement_posterior_batch(system, uniq, quad.order)
    else:
        post_seeds = post_seq.generate_state(uniq.shape[0])
        q_uniq = np.vstack([
            refinement_posterior(system, u, mode, QuadratureConfig(
                quad.epsabs, quad.epsrel, quad.half_width, quad.method, quad.order, quad.mc_draws,
                int(s))).q_hat
            for u, s in zip(uniq, post_seeds)
        ])
    q_hat = q_uniq[inverse]

    rng = np.random.default_rng(draw_seq)
    u = rng.random(pts.shape[0])
    k = np.minimum((u[:, None] >= np.cumsum(q_hat, axis=1)).sum(axis=1), system.K - 1)
    eps = rng.standard_normal(pts.shape[0])
    y_hat = system.strong.means(pts)[np.arange(pts.shape[0]), k] + system.strong.noise_sd * eps
    logger.info(f"Refined {pts.shape[0]} labels over {uniq.shape[0]} distinct x ({mode})")
    return RefinedLabels(x=pts, y_hat=y_hat, q_hat=q_hat)


def wli_bound(system: LatentConceptSystem, x, k: int, k_star: int, c: float,
              quad: Optional[QuadratureConfig] = None) -> WLIBound:
    """
    p(k|x) exp(-c Delta_k(x)^2) next to the exact q_hat(k|x) when the target concept is k_star

    Delta_k(x) is the gap between the source weak mean of concept k and the
    target weak mean of k_star.
    """
    K = system.K
    if not (0 <= k < K and 0 <= k_star < K):
        raise ValidationError(f"concept indices must lie in [0, {K})")
    if k == k_star:
        raise ValidationError("wli_bound needs k != k_star")
    if not c > 0:
        raise ValidationError(f"c must be > 0, got {c}")
    pts, _ = as_points(x, system.x_dim)
    point = pts[0]
    p_k = float(gate_weights(point, system.pi_p, system.gating)[k])
    delta = float(point @ system.weak_p.beta[k] - point @ system.weak_q.beta[k_star])
    post = refinement_posterior(system, point, RefinementMode.single_label(), quad)
    q_hat_k = float(post.confusion[k_star, k])
    return WLIBound(bound=p_k * float(np.exp(-c * delta ** 2)), q_hat_k=q_hat_k, p_k=p_k, delta_sq=delta ** 2)


def calibrate_wli_constant(system: LatentConceptSystem, xs, k: int, k_star: int,
                           quad: Optional[QuadratureConfig] = None) -> Tuple[float, bool]:
    """
    Largest c with p(k|x) exp(-c Delta^2) >= q_hat(k|x) at every grid point

    Returns:
        (c, holds); holds is False when no positive constant works
    """
    pts, _ = as_points(xs, system.x_dim)
    c_max = np.inf
    holds = True
    for point in pts:
        res = wli_bound(system, point, k, k_star, 1.0, quad)
        if res.q_hat_k <= 0:
            continue
        if res.delta_sq == 0 or res.q_hat_k > res.p_k:
            if res.q_hat_k > res.p_k * (1.0 + 1e-8):
                holds = False
            continue
        c_max = min(c_max, np.log(res.p_k / res.q_hat_k) / res.delta_sq)
    if not holds or not c_max > 0:
        logger.warning(f"No positive WLI constant for k={k}, k*={k_star} on {pts.shape[0]} grid points")
        return 0.0, False
    return float(c_max), True
