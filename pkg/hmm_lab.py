"""
HMM Lab
Mixtures of hidden Markov models over token sequences: forward likelihoods,
anchor-word and cycle checks, and numerical independence certificates
"""
from dataclasses import dataclass, field
from itertools import permutations, product
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.special import logsumexp

from config import Config
from errors import EnumerationLimitError, ValidationError

STOCHASTIC_TOL = 1e-12


def _stochastic(matrix, name: str) -> np.ndarray:
    arr = np.array(matrix, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError(f"{name} must be a nonempty matrix, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise ValidationError(f"{name} must be row-stochastic")
    arr.setflags(write=False)
    return arr


def _log(arr: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore'):
        return np.log(arr)


@dataclass(frozen=True)
class HMMParams:
    """Transition matrix theta and start law over hidden states"""
    transition: np.ndarray
    start: Optional[np.ndarray] = None

    def __post_init__(self):
        trans = _stochastic(self.transition, "transition")
        if trans.shape[0] != trans.shape[1]:
            raise ValidationError(f"transition must be square, got {trans.shape}")
        object.__setattr__(self, 'transition', trans)
        start = np.full(trans.shape[0], 1.0 / trans.shape[0]) if self.start is None else self.start
        start = _stochastic(np.atleast_2d(start), "start")[0]
        if start.shape != (trans.shape[0],):
            raise ValidationError("start law must cover every hidden state")
        object.__setattr__(self, 'start', start)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True)
class EmissionParams:
    emission: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'emission', _stochastic(self.emission, "emission"))

    @property
    def n_states(self) -> int:
        return self.emission.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.emission.shape[1]


@dataclass(frozen=True)
class HMMMixture:
    components: Tuple[HMMParams, ...]
    pi: np.ndarray
    emission_x: EmissionParams
    emission_y: EmissionParams

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValidationError("an HMM mixture needs at least one component")
        object.__setattr__(self, 'components', comps)
        pi = np.array(self.pi, dtype=float)
        if pi.shape != (len(comps),) or np.any(pi < 0) or abs(pi.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValidationError(f"mixture prior must be a simplex of length {len(comps)}")
        pi.setflags(write=False)
        object.__setattr__(self, 'pi', pi)
        H = comps[0].n_states
        if any(c.n_states != H for c in comps):
            raise ValidationError("all components must share one state space")
        if self.emission_x.n_states != H or self.emission_y.n_states != H:
            raise ValidationError("emission matrices must have one row per hidden state")

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def n_states(self) -> int:
        return self.components[0].n_states

    @property
    def n_tokens(self) -> int:
        return self.emission_x.n_tokens


class AnchorVerdict(NamedTuple):
    passed: bool
    witnesses: Dict[int, int]  # state -> first anchor token
    missing_states: List[int]


class CycleWitness(NamedTuple):
    states: Tuple[int, ...]  # closes back to states[0]
    p_theta: float
    p_theta_prime: float

    @property
    def path(self) -> Tuple[int, ...]:
        return self.states + (self.states[0],)


class HMMRefinement(NamedTuple):
    q_hat: np.ndarray
    stderr: np.ndarray
    M: int
    seed: int


@dataclass(frozen=True)
class IndependenceCertificate:
    rank: int
    n_mixtures: int
    singular_values: np.ndarray
    n_sequences: int
    max_seq_len: int
    anchor_x: List[AnchorVerdict] = field(default_factory=list)
    anchor_y: List[AnchorVerdict] = field(default_factory=list)
    support_restricted: bool = True

    @property
    def full_rank(self) -> bool:
        return self.rank == self.n_mixtures

    def report(self) -> str:
        lines = [
            "HMM mixture independence certificate",
            f"  mixtures:          {self.n_mixtures}",
            f"  sequences checked: {self.n_sequences} (x length 1..{self.max_seq_len}, every y)",
            f"  Gram rank:         {self.rank}",
            f"  verdict:           {'linearly independent' if self.full_rank else 'linearly DEPENDENT'}"
            + (" on the enumerated support" if self.support_restricted else ""),
            "  singular values:   " + ", ".join(f"{s:.6e}" for s in self.singular_values),
        ]
        for i, (ax, ay) in enumerate(zip(self.anchor_x, self.anchor_y)):
            lines.append(f"  mixture {i}: anchors(x) {'pass' if ax.passed else 'fail ' + str(ax.missing_states)}, "
                         f"anchors(y) {'pass' if ay.passed else 'fail ' + str(ay.missing_states)}")
        return "\n".join(lines)


def _tokens(tokens: Sequence[int], n_tokens: int, what: str) -> np.ndarray:
    arr = np.asarray(tokens, dtype=int)
    if arr.size == 0:
        raise ValidationError(f"{what} must be nonempty")
    if np.any(arr < 0) or np.any(arr >= n_tokens):
        raise ValidationError(f"{what} contains tokens outside the alphabet of size {n_tokens}")
    return arr


def _log_forward(hmm: HMMParams, emission_x: EmissionParams, emission_y: EmissionParams,
                 tokens: np.ndarray, final: Optional[np.ndarray]) -> np.ndarray:
    """
    Batched log-space forward pass, tokens (n, T), final (n,) or None

    The final token is emitted from the state one transition after the last
    x token; with final=None the x-sequence marginal is returned.
    """
    log_trans = _log(hmm.transition)
    log_ex = _log(emission_x.emission)
    alpha = _log(hmm.start)[None, :] + log_ex[:, tokens[:, 0]].T
    for t in range(1, tokens.shape[1]):
        alpha = logsumexp(alpha[:, :, None] + log_trans[None], axis=1) + log_ex[:, tokens[:, t]].T
    if final is None:
        return logsumexp(alpha, axis=1)
    alpha = logsumexp(alpha[:, :, None] + log_trans[None], axis=1) + _log(emission_y.emission)[:, final].T
    return logsumexp(alpha, axis=1)


def mixture_loglik(mix: HMMMixture, tokens: Sequence[int], final_token: int) -> float:
    """log sum_k pi_k p_k(x, y) by the forward algorithm"""
    x = _tokens(tokens, mix.n_tokens, "token sequence")[None, :]
    y = _tokens([final_token], mix.emission_y.n_tokens, "final token")
    per_component = np.array([_log_forward(c, mix.emission_x, mix.emission_y, x, y)[0] for c in mix.components])
    return float(logsumexp(per_component + _log(mix.pi)))


def path_enumeration_loglik(mix: HMMMixture, tokens: Sequence[int], final_token: int) -> float:
    """Brute-force sum over every hidden path; exponential in the sequence length"""
    x = _tokens(tokens, mix.n_tokens, "token sequence")
    y = int(_tokens([final_token], mix.emission_y.n_tokens, "final token")[0])
    ex, ey = mix.emission_x.emission, mix.emission_y.emission
    total = 0.0
    for weight, comp in zip(mix.pi, mix.components):
        theta = comp.transition
        for path in product(range(mix.n_states), repeat=x.size + 1):
            p = comp.start[path[0]] * ex[path[0], x[0]]
            for t in range(1, x.size):
                p *= theta[path[t - 1], path[t]] * ex[path[t], x[t]]
            p *= theta[path[-2], path[-1]] * ey[path[-1], y]
            total += weight * p
    return float(np.log(total)) if total > 0 else -np.inf


def anchor_word_check(em: EmissionParams) -> AnchorVerdict:
    """Find a token emitted by exactly one hidden state, for every state"""
    emission = em.emission
    positive = emission > 0
    exclusive = positive & (positive.sum(axis=0) == 1)[None, :]
    witnesses = {h: int(np.flatnonzero(exclusive[h])[0]) for h in range(em.n_states) if exclusive[h].any()}
    missing = [h for h in range(em.n_states) if h not in witnesses]
    return AnchorVerdict(passed=not missing, witnesses=witnesses, missing_states=missing)


def _cycle_prob(theta: np.ndarray, states: Tuple[int, ...]) -> float:
    p = 1.0
    for a, b in zip(states, states[1:] + states[:1]):
        p *= theta[a, b]
    return p


def cycle_witness(theta: HMMParams, theta_prime: HMMParams, max_len: Optional[int] = None) -> Optional[CycleWitness]:
    """
    First simple state cycle (shortest, then lexicographic) that is strictly
    more probable under theta than under theta_prime; None when the transitions match
    """
    if theta.n_states != theta_prime.n_states:
        raise ValidationError("transition matrices live on different state spaces")
    H = theta.n_states
    max_len = H if max_len is None else max_len
    if max_len < H:
        raise ValidationError(f"max_len must be >= |H| = {H}")
    if np.allclose(theta.transition, theta_prime.transition, rtol=0.0, atol=1e-12):
        return None
    for m in range(1, min(max_len, H) + 1):
        for states in permutations(range(H), m):
            p, p_prime = _cycle_prob(theta.transition, states), _cycle_prob(theta_prime.transition, states)
            if p > p_prime:
                return CycleWitness(states=tuple(states), p_theta=p, p_theta_prime=p_prime)
    logger.warning("Transitions differ but no separating cycle was found")
    return None


def _check_alphabets(mixes: Sequence[HMMMixture]):
    first = mixes[0]
    for mix in mixes[1:]:
        if mix.n_tokens != first.n_tokens or mix.emission_y.n_tokens != first.emission_y.n_tokens:
            raise ValidationError("mixtures do not share token alphabets")


def _joint_table(mix: HMMMixture, max_seq_len: int) -> np.ndarray:
    """p(x, y) for every x of length 1..max_seq_len and every y, flattened"""
    ex, ey = mix.emission_x.emission, mix.emission_y.emission
    blocks = []
    for weight, comp in zip(mix.pi, mix.components):
        theta = comp.transition
        alpha = comp.start[None, :] * ex.T  # (O, H): all prefixes of length 1
        parts = []
        for t in range(1, max_seq_len + 1):
            parts.append(((alpha @ theta) @ ey).ravel())
            if t < max_seq_len:
                alpha = ((alpha @ theta)[:, None, :] * ex.T[None, :, :]).reshape(-1, mix.n_states)
        blocks.append(weight * np.concatenate(parts))
    return np.sum(blocks, axis=0)


def independence_certificate(mixes: Sequence[HMMMixture], max_seq_len: int) -> IndependenceCertificate:
    """
    Gram-matrix rank of the mixtures' joint probability vectors over all
    (x, y) with len(x) <= max_seq_len

    Full rank certifies linear independence on the enumerated support only.
    """
    mixes = list(mixes)
    if not mixes:
        raise ValidationError("need at least one mixture")
    if max_seq_len < 1:
        raise ValidationError("max_seq_len must be >= 1")
    _check_alphabets(mixes)
    O, Oy = mixes[0].n_tokens, mixes[0].emission_y.n_tokens
    n_seq = sum(O ** t for t in range(1, max_seq_len + 1)) * Oy
    if n_seq > Config.ENUMERATION_LIMIT:
        raise EnumerationLimitError(f"{n_seq} (x, y) pairs exceed the enumeration limit {Config.ENUMERATION_LIMIT}")

    F = np.vstack([_joint_table(mix, max_seq_len) for mix in mixes])
    gram = F @ F.T
    sv = np.linalg.svd(gram, compute_uv=False)
    rank = int((sv > Config.RANK_RTOL * sv.max()).sum()) if sv.max() > 0 else 0
    cert = IndependenceCertificate(
        rank=rank,
        n_mixtures=len(mixes),
        singular_values=sv,
        n_sequences=n_seq,
        max_seq_len=max_seq_len,
        anchor_x=[anchor_word_check(m.emission_x) for m in mixes],
        anchor_y=[anchor_word_check(m.emission_y) for m in mixes],
    )
    logger.info(f"Independence certificate: rank {rank} of {len(mixes)} over {n_seq} sequences")
    return cert


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of a (n, m) probability table"""
    u = rng.random(probs.shape[0])
    return np.minimum((u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)


def sample_sequences(mix: HMMMixture, n: int, length: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw n (x, y) pairs: concept from pi, then the hidden chain and emissions"""
    k = _categorical(rng, np.broadcast_to(mix.pi, (n, mix.K)))
    starts = np.stack([c.start for c in mix.components])
    trans = np.stack([c.transition for c in mix.components])
    ex, ey = mix.emission_x.emission, mix.emission_y.emission
    h = _categorical(rng, starts[k])
    tokens = np.empty((n, length), dtype=int)
    for t in range(length):
        tokens[:, t] = _categorical(rng, ex[h])
        h = _categorical(rng, trans[k, h])
    final = _categorical(rng, ey[h])
    return tokens, final


def icl_refinement_posterior_hmm(source_mix: HMMMixture, target_mix: HMMMixture, M: int,
                                 x: Sequence[int], seed: int,
                                 n_draws: int = Config.ICL_MC_DRAWS) -> HMMRefinement:
    """
    Concept weights q_hat(k|x) proportional to pi_k p_k(x) E_k^M

    E_k is the Monte Carlo mean, over demonstration pairs drawn from the target
    mixture, of their joint probability under source component k. Standard
    errors come from batch means.
    """
    if M < 1:
        raise ValidationError(f"M must be >= 1, got {M}")
    if (source_mix.K != target_mix.K or source_mix.n_states != target_mix.n_states):
        raise ValidationError("source and target mixtures must share K and the state space")
    _check_alphabets([source_mix, target_mix])
    if n_draws < Config.ICL_BATCHES:
        raise ValidationError(f"n_draws must be >= {Config.ICL_BATCHES}")
    query = _tokens(x, source_mix.n_tokens, "query sequence")[None, :]

    rng = np.random.default_rng(seed)
    demo_x, demo_y = sample_sequences(target_mix, n_draws, query.shape[1], rng)
    log_px = np.array([_log_forward(c, source_mix.emission_x, source_mix.emission_y, query, None)[0]
                       for c in source_mix.components])
    demo_p = np.exp(np.stack([_log_forward(c, source_mix.emission_x, source_mix.emission_y, demo_x, demo_y)
                              for c in source_mix.components], axis=1))  # (n_draws, K)

    def weights(expectation: np.ndarray) -> np.ndarray:
        logw = _log(source_mix.pi) + log_px + M * _log(expectation)
        if np.all(np.isneginf(logw)):
            return np.array(source_mix.pi)
        return np.exp(logw - logsumexp(logw))

    q_hat = weights(demo_p.mean(axis=0))
    batches = np.array([weights(chunk.mean(axis=0)) for chunk in np.array_split(demo_p, Config.ICL_BATCHES)])
    stderr = batches.std(axis=0, ddof=1) / np.sqrt(Config.ICL_BATCHES)
    return HMMRefinement(q_hat=q_hat, stderr=stderr, M=M, seed=seed)
