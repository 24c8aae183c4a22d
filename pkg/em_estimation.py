"""
EM Estimation Module
Maximum-likelihood fitting of gated linear-Gaussian expert mixtures on source
triples (x, y, y_weak) and on target pairs (x, y_weak), with multiple restarts
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax
from sklearn.cluster import KMeans

from concept_mixture import (Domain, ExpertParams, GatingKind, GatingParams, LatentConceptSystem,
                             SourceDataset, TargetDataset, check_simplex, gate_weights)
from config import Config
from errors import EMFailure, MonotonicityError, ValidationError

Dataset = Union[SourceDataset, TargetDataset]
STRONG = "strong"
WEAK = "weak"
INIT_METHODS = ("kmeanspp", "random")
GATING_STEPS = ("softmax", "weighted_means")
MAX_REINITS = 3


@dataclass
class EMConfig:
    """EM settings; defaults come from Config"""
    max_iters: int = Config.EM_MAX_ITERS
    tol: float = Config.EM_TOL
    restarts: int = Config.EM_RESTARTS
    init: str = "kmeanspp"
    ridge: float = Config.EM_RIDGE
    seed: int = 0
    n_jobs: int = 1
    gating_kind: GatingKind = GatingKind.CONSTANT
    gating_variance: float = 1.0
    gating_step: str = "softmax"
    min_sigma: float = Config.EM_MIN_SIGMA
    strict_monotone: bool = False

    def __post_init__(self):
        self.gating_kind = GatingKind(self.gating_kind)
        if not self.tol > 0:
            raise ValidationError(f"tol must be > 0, got {self.tol}")
        if self.restarts < 1 or self.max_iters < 1:
            raise ValidationError("restarts and max_iters must be >= 1")
        if self.init not in INIT_METHODS:
            raise ValidationError(f"init must be one of {INIT_METHODS}, got {self.init!r}")
        if self.gating_step not in GATING_STEPS:
            raise ValidationError(f"gating_step must be one of {GATING_STEPS}, got {self.gating_step!r}")
        if self.ridge < 0 or self.gating_variance <= 0:
            raise ValidationError("ridge must be >= 0 and gating_variance > 0")


@dataclass(frozen=True)
class MixtureParams:
    """Priors, gating and one coefficient matrix per expert family, with a shared sigma"""
    pi: np.ndarray
    gating: GatingParams
    betas: Dict[str, np.ndarray]
    sigma: float

    @property
    def K(self) -> int:
        return self.gating.K

    @classmethod
    def from_system(cls, system: LatentConceptSystem, domain: Domain = Domain.SOURCE) -> "MixtureParams":
        """The generating parameters seen by a fit of one domain"""
        if Domain(domain) is Domain.SOURCE:
            betas = {STRONG: np.array(system.strong.beta), WEAK: np.array(system.weak_p.beta)}
            return cls(np.array(system.pi_p), system.gating, betas, system.strong.noise_sd)
        return cls(np.array(system.pi_q), system.gating, {WEAK: np.array(system.weak_q.beta)},
                   system.weak_q.noise_sd)

    def experts(self, family: str) -> ExpertParams:
        return ExpertParams(self.betas[family], self.sigma)

    def permuted(self, perm: Sequence[int]) -> "MixtureParams":
        perm = list(perm)
        return MixtureParams(self.pi[perm], self.gating.permuted(perm),
                             {f: b[perm] for f, b in self.betas.items()}, self.sigma)

    def regression(self, x: np.ndarray, family: str = STRONG, pi: Optional[np.ndarray] = None) -> np.ndarray:
        """Plug-in mixture mean sum_k w_k(x) beta_k^T x"""
        x = np.atleast_2d(x)
        w = gate_weights(x, self.pi if pi is None else pi, self.gating)
        w = np.atleast_2d(w)
        return (w * (x @ self.betas[family].T)).sum(axis=1)


@dataclass(frozen=True)
class FittedMixture:
    params: MixtureParams
    loglik: float
    n_iters: int
    restarts_used: int
    converged: bool
    trace: Tuple[float, ...] = field(default=(), repr=False)

    @property
    def pi_hat(self) -> np.ndarray:
        return self.params.pi

    @property
    def eta_hat(self) -> np.ndarray:
        return self.params.gating.eta

    @property
    def beta_hat(self) -> Dict[str, np.ndarray]:
        return self.params.betas

    @property
    def sigma_hat(self) -> float:
        return self.params.sigma

    def to_dict(self) -> Dict:
        return {
            'K': self.params.K,
            'pi_hat': self.pi_hat.tolist(),
            'gating_kind': self.params.gating.kind.value,
            'eta_hat': self.eta_hat.tolist(),
            'beta_hat': {f: b.tolist() for f, b in self.beta_hat.items()},
            'sigma_hat': self.sigma_hat,
            'loglik': self.loglik,
            'n_iters': self.n_iters,
            'restarts_used': self.restarts_used,
            'converged': self.converged,
        }


class _RestartAborted(Exception):
    pass


def _labels(data: Dataset, families: Sequence[str]) -> Dict[str, np.ndarray]:
    columns = {WEAK: data.y_weak}
    if isinstance(data, SourceDataset):
        columns[STRONG] = data.y
    missing = [f for f in families if f not in columns]
    if missing:
        raise ValidationError(f"dataset has no labels for expert families {missing}")
    return {f: columns[f] for f in families}


def _check_data(data: Dataset, labels: Dict[str, np.ndarray]):
    if not np.all(np.isfinite(data.x)) or not all(np.all(np.isfinite(v)) for v in labels.values()):
        raise ValidationError("dataset contains non-finite values")


def _log_components(x: np.ndarray, labels: Dict[str, np.ndarray], params: MixtureParams) -> np.ndarray:
    """log w_k(x_i) + sum over families of log N(label_i; beta_k^T x_i, sigma^2), shape (n, K)"""
    if not params.sigma > 0:
        raise ValidationError("log-likelihood needs sigma > 0")
    with np.errstate(divide='ignore'):
        out = np.log(gate_weights(x, params.pi, params.gating))
    out = np.atleast_2d(out)
    var = params.sigma ** 2
    for family, y in labels.items():
        resid = y[:, None] - x @ params.betas[family].T
        out = out - 0.5 * resid ** 2 / var - 0.5 * np.log(2.0 * np.pi * var)
    return out


def loglikelihood(data: Dataset, params: MixtureParams) -> float:
    """Exact observed-data log-likelihood of the families present in params"""
    labels = _labels(data, list(params.betas))
    _check_data(data, labels)
    if data.x.shape[1] != params.gating.x_dim:
        raise ValidationError(f"data dimension {data.x.shape[1]} != parameter dimension {params.gating.x_dim}")
    return float(logsumexp(_log_components(data.x, labels, params), axis=1).sum())


def _weighted_ridge(x: np.ndarray, y: np.ndarray, weights: np.ndarray, ridge: float) -> np.ndarray:
    xw = x * weights[:, None]
    gram = x.T @ xw + ridge * np.eye(x.shape[1])
    return np.linalg.solve(gram, xw.T @ y)


def _softmax_gating_step(x: np.ndarray, r: np.ndarray, pi: np.ndarray, gating: GatingParams,
                         learn_eta: bool) -> Tuple[np.ndarray, GatingParams]:
    """Maximize sum_ik r_ik log w_k(x_i) over prior logits (and eta) from the current point"""
    K, d = gating.eta.shape
    v = gating.variance
    logits0 = np.log(np.maximum(pi, 1e-300))
    theta0 = np.concatenate([logits0, gating.eta.ravel()]) if learn_eta else logits0
    sq_x = None if learn_eta else ((x[:, None, :] - gating.eta[None]) ** 2).sum(axis=2)

    def objective(theta):
        logits = theta[:K]
        eta = theta[K:].reshape(K, d) if learn_eta else gating.eta
        sq = ((x[:, None, :] - eta[None]) ** 2).sum(axis=2) if learn_eta else sq_x
        logw = logits[None, :] - 0.5 * sq / v
        logw = logw - logsumexp(logw, axis=1, keepdims=True)
        resid = r - np.exp(logw)
        grad = [-resid.sum(axis=0)]
        if learn_eta:
            grad_eta = (resid.T @ x - resid.sum(axis=0)[:, None] * eta) / v
            grad.append(-grad_eta.ravel())
        return -(r * logw).sum(), np.concatenate(grad)

    result = minimize(objective, theta0, jac=True, method='L-BFGS-B')
    theta = result.x if result.fun <= objective(theta0)[0] else theta0
    new_pi = softmax(theta[:K])
    if not learn_eta:
        return new_pi, gating
    try:
        return new_pi, GatingParams(theta[K:].reshape(K, d), gating.kind, gating.variance)
    except ValidationError as exc:
        # the prior was optimised jointly with the rejected locations
        logger.debug(f"Gating step rejected ({exc}); keeping previous pi and eta")
        return np.array(pi, dtype=float), gating


class _EMRun:
    """One EM restart over fixed data"""

    def __init__(self, x: np.ndarray, labels: Dict[str, np.ndarray], K: int, cfg: EMConfig,
                 gating_fixed: Optional[GatingParams], allow_vanishing: bool):
        self.x = x
        self.labels = labels
        self.K = K
        self.cfg = cfg
        self.gating_fixed = gating_fixed
        self.allow_vanishing = allow_vanishing
        self.n = x.shape[0]

    def m_step(self, r: np.ndarray, prev: Optional[MixtureParams]) -> MixtureParams:
        cfg = self.cfg
        mass = r.sum(axis=0)
        small = mass < Config.EM_EMPTY_FRACTION * self.n
        if np.any(small) and not self.allow_vanishing:
            raise _RestartAborted(f"component(s) {np.flatnonzero(small).tolist()} emptied")

        gating = prev.gating if prev is not None else self._initial_gating(r, mass)
        pi = mass / self.n
        if gating.kind is GatingKind.GAUSSIAN:
            learn_eta = self.gating_fixed is None
            if cfg.gating_step == "softmax" and prev is not None:
                pi, gating = _softmax_gating_step(self.x, r, prev.pi, gating, learn_eta)
            elif learn_eta and prev is not None:
                gating = self._initial_gating(r, mass)

        betas = {}
        for family, y in self.labels.items():
            beta = np.empty((self.K, self.x.shape[1]))
            for k in range(self.K):
                if small[k] and prev is not None:
                    beta[k] = prev.betas[family][k]
                else:
                    beta[k] = _weighted_ridge(self.x, y, r[:, k], cfg.ridge)
            betas[family] = beta

        sse = sum((r * (y[:, None] - self.x @ betas[f].T) ** 2).sum() for f, y in self.labels.items())
        sigma = max(np.sqrt(sse / (self.n * len(self.labels))), cfg.min_sigma)
        return MixtureParams(pi, gating, betas, float(sigma))

    def _initial_gating(self, r: np.ndarray, mass: np.ndarray) -> GatingParams:
        if self.gating_fixed is not None:
            return self.gating_fixed
        d = self.x.shape[1]
        if self.cfg.gating_kind is GatingKind.CONSTANT:
            return GatingParams.constant(self.K, d)
        eta = (r.T @ self.x) / np.maximum(mass, 1e-300)[:, None]
        try:
            return GatingParams(eta, GatingKind.GAUSSIAN, self.cfg.gating_variance)
        except ValidationError as exc:
            raise _RestartAborted(str(exc)) from exc

    def initial_responsibilities(self, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.init == "random":
            return rng.dirichlet(np.ones(self.K), size=self.n)
        # concepts are lines through the origin: cluster joint-vector directions
        feats = np.column_stack([self.x] + list(self.labels.values()))
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
        sign = np.where(feats[:, 0] < 0, -1.0, 1.0)
        feats = feats * sign[:, None]
        km = KMeans(n_clusters=self.K, init='k-means++', n_init=1,
                    random_state=int(rng.integers(2**31 - 1)))
        hard = km.fit_predict(feats)
        return np.eye(self.K)[hard]

    def run(self, start: MixtureParams) -> FittedMixture:
        cfg = self.cfg
        params = start
        comps = _log_components(self.x, self.labels, params)
        ll = float(logsumexp(comps, axis=1).sum())
        trace = [ll]
        converged = False
        n_iters = 0
        for n_iters in range(1, cfg.max_iters + 1):
            r = np.exp(comps - logsumexp(comps, axis=1, keepdims=True))
            params = self.m_step(r, params)
            comps = _log_components(self.x, self.labels, params)
            ll_new = float(logsumexp(comps, axis=1).sum())
            if ll_new < ll - Config.EM_MONOTONE_SLACK * self.n:
                message = f"log-likelihood decreased from {ll:.10g} to {ll_new:.10g} at iteration {n_iters}"
                if cfg.strict_monotone:
                    raise MonotonicityError(message)
                logger.warning(message)
            trace.append(ll_new)
            done = abs(ll_new - ll) <= cfg.tol * max(1.0, abs(ll))
            ll = ll_new
            if done:
                converged = True
                break
        return FittedMixture(params, ll, n_iters, 1, converged, tuple(trace))


def _precheck(data: Dataset, K: int, labels: Dict[str, np.ndarray]):
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    _check_data(data, labels)
    minimum = 5 * K * data.x.shape[1]
    if data.n < minimum:
        raise ValidationError(f"need at least {minimum} records for K={K}, x_dim={data.x.shape[1]}; got {data.n}")


def _fit(data: Dataset, K: int, cfg: EMConfig, families: Sequence[str],
         gating_fixed: Optional[GatingParams] = None,
         init_params: Optional[MixtureParams] = None) -> FittedMixture:
    labels = _labels(data, families)
    _precheck(data, K, labels)
    if gating_fixed is not None and (gating_fixed.K != K or gating_fixed.x_dim != data.x.shape[1]):
        raise ValidationError(f"fixed gating has shape {gating_fixed.eta.shape}, expected {(K, data.x.shape[1])}")

    runner = _EMRun(data.x, labels, K, cfg, gating_fixed, allow_vanishing=init_params is not None)

    if init_params is not None:
        start = MixtureParams(check_simplex(init_params.pi, "init pi", tol=1e-8),
                              gating_fixed or init_params.gating,
                              {f: np.array(init_params.betas[f]) for f in families},
                              max(init_params.sigma, cfg.min_sigma))
        fit = runner.run(start)
        logger.info(f"Warm-started EM finished: loglik={fit.loglik:.6g}, iters={fit.n_iters}")
        return fit

    children = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)

    def one_restart(index: int) -> Optional[FittedMixture]:
        seq = children[index]
        for attempt in range(MAX_REINITS + 1):
            rng = np.random.default_rng(seq)
            try:
                start = runner.m_step(runner.initial_responsibilities(rng), None)
                return runner.run(start)
            except _RestartAborted as exc:
                logger.warning(f"EM restart {index} attempt {attempt} aborted: {exc}")
                seq = seq.spawn(1)[0]
        return None

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results: List[Optional[FittedMixture]] = list(pool.map(one_restart, range(cfg.restarts)))
    else:
        results = [one_restart(i) for i in range(cfg.restarts)]

    best: Optional[FittedMixture] = None
    for fit in results:
        if fit is not None and (best is None or fit.loglik > best.loglik):
            best = fit
    if best is None:
        raise EMFailure(f"all {cfg.restarts} EM restarts aborted (K={K}, n={data.n})")
    used = sum(fit is not None for fit in results)
    return replace(best, restarts_used=used)


def fit_source_mle(data: SourceDataset, K: int, cfg: Optional[EMConfig] = None) -> FittedMixture:
    """
    Joint EM over (x, y, y_weak): one latent concept per record drives both labels

    Args:
        data: source triples
        K: number of concepts
        cfg: EM settings

    Returns:
        Best fit over restarts (by log-likelihood, lowest index on ties)
    """
    cfg = cfg or EMConfig()
    logger.info(f"Fitting source mixture: n={data.n}, K={K}, restarts={cfg.restarts}")
    fit = _fit(data, K, cfg, (STRONG, WEAK))
    logger.success(f"Source fit loglik={fit.loglik:.6g}, iters={fit.n_iters}, converged={fit.converged}")
    return fit


def fit_target_mle(data: TargetDataset, K: int, cfg: Optional[EMConfig] = None,
                   gating_fixed: Optional[GatingParams] = None,
                   init_params: Optional[MixtureParams] = None) -> FittedMixture:
    """
    EM over (x, y_weak) estimating the target prior and weak experts

    With gating_fixed the gating locations are held at the supplied values.
    With init_params a single warm-started run replaces the restarts and
    components are allowed to lose all their mass.
    """
    cfg = cfg or EMConfig()
    if gating_fixed is not None:
        cfg = replace(cfg, gating_kind=gating_fixed.kind, gating_variance=gating_fixed.variance)
    logger.info(f"Fitting target mixture: n={data.n}, K={K}, "
                f"gating={'fixed' if gating_fixed is not None else 'free'}")
    fit = _fit(data, K, cfg, (WEAK,), gating_fixed=gating_fixed, init_params=init_params)
    logger.success(f"Target fit loglik={fit.loglik:.6g}, iters={fit.n_iters}, converged={fit.converged}")
    return fit
