"""
Concept Mixture Core
Softmax-gated mixtures of linear-Gaussian experts over a source and a target domain:
model types, exact gate weights and regression functions, and seeded samplers
"""
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp
from scipy.stats import norm

from config import Config
from errors import ValidationError

SIMPLEX_TOL = 1e-12


class GatingKind(Enum):
    """Gating density families"""
    CONSTANT = "constant"
    GAUSSIAN = "gaussian"


class Domain(Enum):
    SOURCE = "p"
    TARGET = "q"


class ExpertFamily(Enum):
    STRONG = "strong"
    WEAK = "weak"


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == ndim - 1 and ndim == 2:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def check_simplex(pi, name: str = "pi", tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a probability vector and return it as a read-only array"""
    arr = _frozen_array(pi, 1, name)
    if arr.size == 0 or np.any(arr < 0) or abs(arr.sum() - 1.0) > tol:
        raise ValidationError(f"{name} must be a probability vector, got {arr.tolist()}")
    return arr


@dataclass(frozen=True)
class GatingParams:
    """Gating locations eta (K x d) and the density kind shared by both domains"""
    eta: np.ndarray
    kind: GatingKind = GatingKind.CONSTANT
    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'eta', _frozen_array(self.eta, 2, "eta"))
        object.__setattr__(self, 'kind', GatingKind(self.kind))
        if self.eta.shape[0] < 1:
            raise ValidationError("gating needs at least one component")
        if self.kind is GatingKind.GAUSSIAN:
            if not self.variance > 0:
                raise ValidationError(f"gaussian gating variance must be > 0, got {self.variance}")
            if self.K > 1 and min_pairwise_distance(self.eta) <= 0:
                raise ValidationError("gaussian gating locations must be pairwise distinct")

    @property
    def K(self) -> int:
        return self.eta.shape[0]

    @property
    def x_dim(self) -> int:
        return self.eta.shape[1]

    @classmethod
    def constant(cls, K: int, x_dim: int) -> "GatingParams":
        return cls(eta=np.zeros((K, x_dim)), kind=GatingKind.CONSTANT)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """log g(x | eta_k) up to a k-independent constant, shape (n, K)"""
        if self.kind is GatingKind.CONSTANT:
            return np.zeros((x.shape[0], self.K))
        sq = ((x[:, None, :] - self.eta[None, :, :]) ** 2).sum(axis=2)
        return -0.5 * sq / self.variance

    def permuted(self, perm: Sequence[int]) -> "GatingParams":
        return GatingParams(self.eta[list(perm)], self.kind, self.variance)


@dataclass(frozen=True)
class ExpertParams:
    """Linear-Gaussian experts: mean beta_k^T x, shared noise sd"""
    beta: np.ndarray
    noise_sd: float

    def __post_init__(self):
        object.__setattr__(self, 'beta', _frozen_array(self.beta, 2, "beta"))
        object.__setattr__(self, 'noise_sd', float(self.noise_sd))
        if self.noise_sd < 0 or not np.isfinite(self.noise_sd):
            raise ValidationError(f"noise_sd must be finite and >= 0, got {self.noise_sd}")
        if self.K > 1 and min_pairwise_distance(self.beta) <= 0:
            logger.warning("Expert coefficients are not pairwise distinct; components are not identifiable")

    @property
    def K(self) -> int:
        return self.beta.shape[0]

    @property
    def x_dim(self) -> int:
        return self.beta.shape[1]

    def means(self, x: np.ndarray) -> np.ndarray:
        """Expert means for every record and component, shape (n, K)"""
        return x @ self.beta.T

    def log_pdf(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.noise_sd <= 0:
            raise ValidationError("densities need noise_sd > 0")
        return norm.logpdf(y[:, None], loc=self.means(x), scale=self.noise_sd)

    def permuted(self, perm: Sequence[int]) -> "ExpertParams":
        return ExpertParams(self.beta[list(perm)], self.noise_sd)


@dataclass(frozen=True)
class CovariateLaw:
    """Independent normal covariates (standard normal by default)"""
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'mean', _frozen_array(self.mean, 1, "x_law.mean"))
        object.__setattr__(self, 'scale', _frozen_array(self.scale, 1, "x_law.scale"))
        if self.mean.shape != self.scale.shape or np.any(self.scale <= 0):
            raise ValidationError("x_law needs matching mean/scale with positive scale")

    @classmethod
    def standard(cls, x_dim: int) -> "CovariateLaw":
        return cls(np.zeros(x_dim), np.ones(x_dim))

    @property
    def x_dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.scale * rng.standard_normal((n, self.x_dim))


@dataclass(frozen=True)
class LatentConceptSystem:
    """Everything needed to generate the source and target domains"""
    gating: GatingParams
    pi_p: np.ndarray
    pi_q: np.ndarray
    strong: ExpertParams
    weak_p: ExpertParams
    weak_q: ExpertParams
    x_law: Optional[CovariateLaw] = None

    def __post_init__(self):
        object.__setattr__(self, 'pi_p', check_simplex(self.pi_p, "pi_p"))
        object.__setattr__(self, 'pi_q', check_simplex(self.pi_q, "pi_q"))
        if self.x_law is None:
            object.__setattr__(self, 'x_law', CovariateLaw.standard(self.strong.x_dim))
        K, d = self.gating.K, self.gating.x_dim
        for name, experts in (("strong", self.strong), ("weak_p", self.weak_p), ("weak_q", self.weak_q)):
            if experts.beta.shape != (K, d):
                raise ValidationError(f"{name} experts have shape {experts.beta.shape}, expected {(K, d)}")
        if self.pi_p.shape != (K,) or self.pi_q.shape != (K,):
            raise ValidationError(f"priors must have length K={K}")
        if self.x_law.x_dim != d:
            raise ValidationError(f"x_law dimension {self.x_law.x_dim} != x_dim {d}")

    @property
    def K(self) -> int:
        return self.gating.K

    @property
    def x_dim(self) -> int:
        return self.gating.x_dim

    def experts(self, domain: Domain, family: ExpertFamily) -> ExpertParams:
        if ExpertFamily(family) is ExpertFamily.STRONG:
            return self.strong
        return self.weak_p if Domain(domain) is Domain.SOURCE else self.weak_q

    def prior(self, domain: Domain) -> np.ndarray:
        return self.pi_p if Domain(domain) is Domain.SOURCE else self.pi_q

    def permuted(self, perm: Sequence[int]) -> "LatentConceptSystem":
        """Jointly relabel every component-indexed parameter"""
        perm = list(perm)
        if sorted(perm) != list(range(self.K)):
            raise ValidationError(f"{perm} is not a permutation of range({self.K})")
        return LatentConceptSystem(
            gating=self.gating.permuted(perm),
            pi_p=self.pi_p[perm],
            pi_q=self.pi_q[perm],
            strong=self.strong.permuted(perm),
            weak_p=self.weak_p.permuted(perm),
            weak_q=self.weak_q.permuted(perm),
            x_law=self.x_law,
        )


@dataclass(frozen=True)
class SourceDataset:
    """Columnar (x, y, y_weak) records drawn from P"""
    x: np.ndarray
    y: np.ndarray
    y_weak: np.ndarray
    seed: Optional[int] = None
    latent: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        _check_columns(self.x, self.y, self.y_weak)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True)
class TargetDataset:
    """Columnar (x, y_weak) records drawn from Q"""
    x: np.ndarray
    y_weak: np.ndarray
    seed: Optional[int] = None
    latent: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        _check_columns(self.x, self.y_weak)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def __len__(self) -> int:
        return self.n


class ConditionalBias(NamedTuple):
    eps_p: np.ndarray
    eps_q: np.ndarray


def _check_columns(x: np.ndarray, *columns: np.ndarray):
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"dataset covariates must be a nonempty (n, d) array, got {x.shape}")
    for col in columns:
        if col.shape != (x.shape[0],):
            raise ValidationError(f"label column has shape {col.shape}, expected ({x.shape[0]},)")


def min_pairwise_distance(rows: np.ndarray) -> float:
    diff = rows[:, None, :] - rows[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    return float(dist[np.triu_indices(rows.shape[0], k=1)].min())


def as_points(x, x_dim: int) -> Tuple[np.ndarray, bool]:
    """Coerce a single vector or an (n, d) batch to (n, d); flag whether input was single"""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 0 or (arr.ndim == 1 and arr.size == x_dim)
    if arr.ndim == 1 and x_dim == 1 and not single:
        # a flat grid of scalar covariates
        arr = arr.reshape(-1, 1)
    elif arr.ndim <= 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != x_dim:
        raise ValidationError(f"covariate dimension mismatch: expected {x_dim}, got shape {np.shape(x)}")
    return arr, single


def gate_weights(x, pi, gating: GatingParams) -> np.ndarray:
    """
    Concept posterior p(k|x) = pi_k g(x|eta_k) / sum_j pi_j g(x|eta_j)

    Args:
        x: single covariate vector (d,) or batch (n, d)
        pi: prior over the K concepts
        gating: gating parameters

    Returns:
        (K,) for a single vector, (n, K) for a batch
    """
    pts, single = as_points(x, gating.x_dim)
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (gating.K,):
        raise ValidationError(f"prior length {pi.shape} does not match K={gating.K}")
    if gating.kind is GatingKind.CONSTANT:
        w = np.broadcast_to(pi / pi.sum(), (pts.shape[0], gating.K)).copy()
    else:
        with np.errstate(divide='ignore'):
            logw = np.log(pi)[None, :] + gating.log_density(pts)
        w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    return w[0] if single else w


def regression_function(system: LatentConceptSystem, x, domain: Domain = Domain.TARGET,
                        family: ExpertFamily = ExpertFamily.STRONG):
    """E[label | x] under one domain's prior with one expert family"""
    pts, single = as_points(x, system.x_dim)
    w = gate_weights(pts, system.prior(domain), system.gating)
    values = (w * system.experts(domain, family).means(pts)).sum(axis=1)
    return float(values[0]) if single else values


def target_regression(system: LatentConceptSystem, x):
    """Ground-truth q(x) = E_Q[Y | x]"""
    return regression_function(system, x, Domain.TARGET, ExpertFamily.STRONG)


def _draw(system: LatentConceptSystem, n: int, seed: int, pi: np.ndarray,
          weak: ExpertParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if n < 1:
        raise ValidationError(f"sample size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = system.x_law.sample(rng, n)
    cdf = np.cumsum(gate_weights(x, pi, system.gating), axis=1)
    u = rng.random(n)
    k = np.minimum((u[:, None] >= cdf).sum(axis=1), system.K - 1)
    eps_y = rng.standard_normal(n)
    eps_w = rng.standard_normal(n)
    rows = np.arange(n)
    y = system.strong.means(x)[rows, k] + system.strong.noise_sd * eps_y
    y_weak = weak.means(x)[rows, k] + weak.noise_sd * eps_w
    return x, k, y, y_weak


def sample_source(system: LatentConceptSystem, n: int, seed: int,
                  keep_latent: bool = False) -> SourceDataset:
    """Ancestral draws x -> k -> (y, y_weak) from P; k is dropped unless keep_latent"""
    x, k, y, y_weak = _draw(system, n, seed, system.pi_p, system.weak_p)
    logger.debug(f"Sampled {n} source records (seed={seed})")
    return SourceDataset(x=x, y=y, y_weak=y_weak, seed=seed, latent=k if keep_latent else None)


def sample_target(system: LatentConceptSystem, n: int, seed: int,
                  keep_latent: bool = False) -> TargetDataset:
    """Draws (x, y_weak) from Q; the strong label is never emitted"""
    x, k, _, y_weak = _draw(system, n, seed, system.pi_q, system.weak_q)
    logger.debug(f"Sampled {n} target records (seed={seed})")
    return TargetDataset(x=x, y_weak=y_weak, seed=seed, latent=k if keep_latent else None)


def sample_target_gold(system: LatentConceptSystem, n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Hypothetical strong-target draws (x, y) from Q, for oracles only"""
    x, _, y, _ = _draw(system, n, seed, system.pi_q, system.weak_q)
    return x, y


def covariate_rule(system: LatentConceptSystem, order: Optional[int] = None,
                   seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integration rule for expectations over x_law

    Tensor Gauss-Hermite for x_dim <= 3, seeded Monte Carlo above that.

    Returns:
        (nodes (m, d), weights (m,)) with weights summing to 1
    """
    d = system.x_dim
    law = system.x_law
    if d > 3:
        rng = np.random.default_rng(seed)
        nodes = law.sample(rng, Config.COVARIATE_MC_POINTS)
        return nodes, np.full(nodes.shape[0], 1.0 / nodes.shape[0])
    order = order or Config.COVARIATE_QUAD_ORDER
    per_dim = order if d == 1 else min(order, int(round(2e5 ** (1.0 / d))))
    z, w = hermegauss(per_dim)
    w = w / np.sqrt(2.0 * np.pi)
    grid = np.array(list(product(z, repeat=d)))
    weights = np.prod(np.array(list(product(w, repeat=d))), axis=1)
    return law.mean + law.scale * grid, weights / weights.sum()


def population_mean(system: LatentConceptSystem, domain: Domain = Domain.SOURCE,
                    family: ExpertFamily = ExpertFamily.STRONG) -> float:
    nodes, weights = covariate_rule(system)
    return float(weights @ regression_function(system, nodes, domain, family))


def conditional_bias_vectors(system: LatentConceptSystem) -> ConditionalBias:
    """
    Per-concept functional biases under x_law

    b_P,k(x) = (p(k|x) - q(k|x)) beta_k^T x is the prior-shift part carried by concept k,
    b_Q,k(x) = q(k|x) (beta^wq_k - beta_k)^T x is the weak-target expert bias.
    eps_p[k] = ||b_P,k||, eps_q[k] = s_k ||b_Q,k|| where s_k is the sign of <b_P,k, b_Q,k>.
    """
    nodes, weights = covariate_rule(system)
    p_k = gate_weights(nodes, system.pi_p, system.gating)
    q_k = gate_weights(nodes, system.pi_q, system.gating)
    mu = system.strong.means(nodes)
    b_p = (p_k - q_k) * mu
    b_q = q_k * (system.weak_q.means(nodes) - mu)
    eps_p = np.sqrt(weights @ b_p ** 2)
    eps_q = np.sqrt(weights @ b_q ** 2)
    cross = weights @ (b_p * b_q)
    eps_q = np.where(cross < 0, -eps_q, eps_q)
    return ConditionalBias(eps_p=eps_p, eps_q=eps_q)


def marginal_label_cdf(system: LatentConceptSystem, t, domain: Domain = Domain.SOURCE,
                       family: ExpertFamily = ExpertFamily.STRONG) -> np.ndarray:
    """
    Exact CDF of the label marginal, P(label <= t)

    Under constant gating each concept's label is normal, so the CDF is a
    normal mixture; gaussian gating integrates over x with covariate_rule.
    """
    experts = system.experts(domain, family)
    if experts.noise_sd <= 0:
        raise ValidationError("label CDF needs noise_sd > 0")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    prior = system.prior(domain)
    if system.gating.kind is GatingKind.CONSTANT:
        law = system.x_law
        loc = experts.beta @ law.mean
        scale = np.sqrt(((experts.beta * law.scale) ** 2).sum(axis=1) + experts.noise_sd ** 2)
        return norm.cdf((t[:, None] - loc[None, :]) / scale[None, :]) @ prior
    nodes, weights = covariate_rule(system)
    w = gate_weights(nodes, prior, system.gating)
    mu = experts.means(nodes)
    cdf = norm.cdf((t[:, None, None] - mu[None, :, :]) / experts.noise_sd)
    return (cdf * w[None]).sum(axis=2) @ weights
