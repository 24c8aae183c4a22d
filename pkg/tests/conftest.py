"""
Shared fixtures: the canonical two-concept benchmark and a small system factory
"""
import numpy as np
import pytest

from concept_mixture import CovariateLaw, ExpertParams, GatingKind, GatingParams, LatentConceptSystem
from config import Config
from hmm_lab import EmissionParams, HMMMixture, HMMParams


def build_system(strong, weak_p, weak_q, pi_p, pi_q, noise_sd=0.3, weak_noise_sd=None,
                 gating=None, x_law=None) -> LatentConceptSystem:
    strong = np.asarray(strong, dtype=float)
    if strong.ndim == 1:
        strong = strong[:, None]
    K, d = strong.shape
    weak_noise_sd = noise_sd if weak_noise_sd is None else weak_noise_sd
    return LatentConceptSystem(
        gating=gating or GatingParams.constant(K, d),
        pi_p=pi_p,
        pi_q=pi_q,
        strong=ExpertParams(strong, noise_sd),
        weak_p=ExpertParams(weak_p, weak_noise_sd),
        weak_q=ExpertParams(weak_q, weak_noise_sd),
        x_law=x_law,
    )


@pytest.fixture
def make_system():
    return build_system


@pytest.fixture
def canonical_system() -> LatentConceptSystem:
    """Constant gating, prior shift (0.6, 0.4) -> (0.1, 0.9), shifted target weak experts"""
    return build_system(
        strong=[[1.0], [-1.0]],
        weak_p=[[1.5], [-1.5]],
        weak_q=[[1.7], [-1.3]],
        pi_p=[0.6, 0.4],
        pi_q=[0.1, 0.9],
    )


@pytest.fixture
def gaussian_system() -> LatentConceptSystem:
    return build_system(
        strong=[[1.0, 0.5], [-1.0, 0.5]],
        weak_p=[[1.4, 0.6], [-1.4, 0.4]],
        weak_q=[[1.6, 0.6], [-1.2, 0.4]],
        pi_p=[0.5, 0.5],
        pi_q=[0.2, 0.8],
        noise_sd=0.25,
        gating=GatingParams(eta=[[-1.0, 0.0], [1.0, 0.0]], kind=GatingKind.GAUSSIAN, variance=1.0),
        x_law=CovariateLaw.standard(2),
    )


@pytest.fixture
def canonical_path():
    return Config.CONFIG_DIR / "canonical.toml"


@pytest.fixture
def anchor_emission() -> EmissionParams:
    return EmissionParams([[0.9, 0.0, 0.1], [0.0, 0.9, 0.1]])


@pytest.fixture
def hmm_pair(anchor_emission):
    """Sticky and alternating two-state chains sharing anchor-word emissions"""
    sticky = HMMParams([[0.95, 0.05], [0.05, 0.95]])
    alternating = HMMParams([[0.05, 0.95], [0.95, 0.05]])
    source = HMMMixture([sticky, alternating], [0.5, 0.5], anchor_emission, anchor_emission)
    target = HMMMixture([sticky, alternating], [0.0, 1.0], anchor_emission, anchor_emission)
    return source, target
