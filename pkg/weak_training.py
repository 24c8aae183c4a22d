"""
Weak Training
Fits the mixture-mean function to target weak labels (weight 1) and source
labels (weight lambda), plus the population limit-risk oracle for that estimator

weak_train returns a WeakTrainFit rather than an EM FittedMixture: the loss only
sees sum_k pi_k beta_k, so there is no likelihood, gating or sigma to report.
Its pi and beta have the same shapes as FittedMixture.pi_hat and beta_hat.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from loguru import logger

from concept_mixture import (Domain, ExpertFamily, LatentConceptSystem, SourceDataset, TargetDataset,
                             conditional_bias_vectors, covariate_rule, regression_function, target_regression)
from em_estimation import EMConfig
from errors import ValidationError

BOUND_COEFFICIENTS = ("eta", "eta_squared")


@dataclass
class WeakTrainConfig:
    lam: float = 1.0
    K_fit: int = 1
    em: EMConfig = field(default_factory=lambda: EMConfig(restarts=5, max_iters=200))
    step_size: float = 0.5

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.K_fit < 1:
            raise ValidationError(f"K_fit must be >= 1, got {self.K_fit}")

    @property
    def source_share(self) -> float:
        """Weight share of source records in the pseudo-label limit, lambda / (1 + lambda)"""
        return self.lam / (1.0 + self.lam)


@dataclass(frozen=True)
class WeakTrainFit:
    pi: np.ndarray
    beta: np.ndarray
    loss: float

    @property
    def coef(self) -> np.ndarray:
        """Effective linear coefficient sum_k pi_k beta_k"""
        return self.pi @ self.beta

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.coef


@dataclass(frozen=True)
class LimitRiskReport:
    eta: float
    eps_p: np.ndarray
    eps_q: np.ndarray
    bound: float
    bound_eta_squared: float
    pseudo_label_risk: float
    population_risk: float
    limit_coef: np.ndarray
    holds_eta: bool
    holds_eta_squared: bool
    coefficient: str

    def to_dict(self) -> Dict:
        return {
            'eta': self.eta,
            'eps_p': self.eps_p.tolist(),
            'eps_q': self.eps_q.tolist(),
            'bound': self.bound,
            'bound_eta_squared': self.bound_eta_squared,
            'pseudo_label_risk': self.pseudo_label_risk,
            'population_risk': self.population_risk,
            'limit_coef': self.limit_coef.tolist(),
            'holds_eta': self.holds_eta,
            'holds_eta_squared': self.holds_eta_squared,
            'coefficient': self.coefficient,
        }


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex"""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _weighted_loss(x, y, w, pi, beta) -> float:
    resid = y - x @ (pi @ beta)
    return float((w * resid ** 2).sum() / w.sum())


def _fit_mixture_mean(x, y, w, K, cfg: WeakTrainConfig, rng: np.random.Generator) -> WeakTrainFit:
    """Alternate a ridge step on beta with a projected-gradient step on pi"""
    d = x.shape[1]
    ridge = cfg.em.ridge
    pi = rng.dirichlet(np.ones(K))
    beta = rng.standard_normal((K, d))
    loss = _weighted_loss(x, y, w, pi, beta)
    sw = np.sqrt(w / w.sum())
    for _ in range(cfg.em.max_iters):
        design = np.kron(pi[None, :], x) * sw[:, None]
        gram = design.T @ design + ridge * np.eye(K * d)
        beta = np.linalg.solve(gram, design.T @ (y * sw)).reshape(K, d)

        resid = y - x @ (pi @ beta)
        grad = -2.0 * ((w * resid) @ (x @ beta.T)) / w.sum()
        pi = project_to_simplex(pi - cfg.step_size * grad)

        new_loss = _weighted_loss(x, y, w, pi, beta)
        if abs(loss - new_loss) <= cfg.em.tol * max(1.0, loss):
            loss = new_loss
            break
        loss = new_loss
    return WeakTrainFit(pi=pi, beta=beta, loss=loss)


def weak_train(source: SourceDataset, target: TargetDataset, cfg: Optional[WeakTrainConfig] = None) -> WeakTrainFit:
    """
    Weighted least squares over the mixture mean sum_k pi_k beta_k^T x

    Target records carry the weak label with weight 1, source records carry the
    strong label with weight lambda. lambda = 0 drops the source entirely.
    """
    cfg = cfg or WeakTrainConfig()
    if source.n == 0 or target.n == 0:
        raise ValidationError("weak training needs nonempty source and target data")
    if cfg.lam > 0:
        x = np.vstack([target.x, source.x])
        y = np.concatenate([target.y_weak, source.y])
        w = np.concatenate([np.ones(target.n), np.full(source.n, cfg.lam)])
    else:
        x, y, w = target.x, target.y_weak, np.ones(target.n)

    if cfg.K_fit == 1:
        xw = x * w[:, None]
        coef = np.linalg.solve(x.T @ xw + cfg.em.ridge * np.eye(x.shape[1]), xw.T @ y)
        fit = WeakTrainFit(pi=np.ones(1), beta=coef[None, :], loss=_weighted_loss(x, y, w, np.ones(1), coef[None, :]))
    else:
        children = np.random.SeedSequence(cfg.em.seed).spawn(cfg.em.restarts)
        fit = None
        for child in children:
            candidate = _fit_mixture_mean(x, y, w, cfg.K_fit, cfg, np.random.default_rng(child))
            if fit is None or candidate.loss < fit.loss:
                fit = candidate
    logger.info(f"Weak training (lambda={cfg.lam}, K_fit={cfg.K_fit}) loss={fit.loss:.6g}, "
                f"coef={np.round(fit.coef, 4).tolist()}")
    return fit


def bias_bound(eps_p: np.ndarray, eps_q: np.ndarray, eta: float, coefficient: str = "eta") -> float:
    """Lower bound c(eta)||eps_p||^2 + (1-eta)^2||eps_q||^2 + eta(1-eta) eps_p.eps_q"""
    if coefficient not in BOUND_COEFFICIENTS:
        raise ValidationError(f"coefficient must be one of {BOUND_COEFFICIENTS}")
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    eps_p = np.asarray(eps_p, dtype=float)
    eps_q = np.asarray(eps_q, dtype=float)
    lead = eta if coefficient == "eta" else eta ** 2
    return float(lead * eps_p @ eps_p + (1.0 - eta) ** 2 * eps_q @ eps_q + eta * (1.0 - eta) * eps_p @ eps_q)


def weak_train_limit_risk(system: LatentConceptSystem, eta: float) -> LimitRiskReport:
    """
    Population behaviour of weak training with source share eta

    The estimator converges to the L2(x_law) projection of the pseudo-label
    regression eta*m_P + (1-eta)*m_Q' onto linear functions; its excess risk
    against q(x) is compared with both readings of the bias bound.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    eps = conditional_bias_vectors(system)
    nodes, weights = covariate_rule(system)
    q = target_regression(system, nodes)
    h = (eta * regression_function(system, nodes, Domain.SOURCE, ExpertFamily.STRONG)
         + (1.0 - eta) * regression_function(system, nodes, Domain.TARGET, ExpertFamily.WEAK))
    sw = np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(nodes * sw[:, None], h * sw, rcond=None)
    limit = nodes @ coef
    pseudo_risk = float(weights @ (h - q) ** 2)
    risk = float(weights @ (limit - q) ** 2)

    bound = bias_bound(eps.eps_p, eps.eps_q, eta, "eta")
    bound_sq = bias_bound(eps.eps_p, eps.eps_q, eta, "eta_squared")
    slack = 1e-9 * max(1.0, risk) + 1e-12
    holds = {"eta": bound <= risk + slack, "eta_squared": bound_sq <= risk + slack}
    candidates = [(abs(risk - value), name) for name, value in (("eta", bound), ("eta_squared", bound_sq))
                  if holds[name]]
    coefficient = min(candidates)[1] if candidates else "neither"
    if coefficient == "neither":
        logger.warning(f"Neither bound reading holds at eta={eta}: risk={risk:.6g}, "
                       f"bound={bound:.6g}, bound_eta_squared={bound_sq:.6g}")
    return LimitRiskReport(
        eta=eta, eps_p=eps.eps_p, eps_q=eps.eps_q, bound=bound, bound_eta_squared=bound_sq,
        pseudo_label_risk=pseudo_risk, population_risk=risk, limit_coef=coef,
        holds_eta=holds["eta"], holds_eta_squared=holds["eta_squared"], coefficient=coefficient,
    )
