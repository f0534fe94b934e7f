"""
BT-Policy - the belief-transition kernel
Squashed-Gaussian transitions a' = tanh(mu(s, a) + sigma(s, a) * eps), chain
simulation, transition densities and the nested Monte-Carlo estimate of the
steady-state log-density.
"""
import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

import diffcore as dc
from diffcore import MlpSpec, ParamStore, Tape
from errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))

# (M, d) matrix of action-beliefs, every entry strictly inside (-1, 1)
ActionBeliefBatch = np.ndarray

Transition = namedtuple("Transition", ["action", "pre_squash", "mu", "log_std"])


@dataclass
class BTPolicy:
    """pi^b(a'|a, s): an MLP from concat(s, a) to (mu, log_std), log_std clamped."""
    spec: MlpSpec
    params: ParamStore
    obs_dim: int
    action_dim: int
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    squash: bool = True
    atanh_clip: float = 1e-6
    log_density_floor: float = -700.0

    def __post_init__(self):
        if self.spec.input_width != self.obs_dim + self.action_dim:
            raise DimensionError(
                f"Policy input width {self.spec.input_width} != obs_dim + action_dim "
                f"({self.obs_dim} + {self.action_dim})"
            )
        if self.spec.output_width != 2 * self.action_dim:
            raise DimensionError(f"Policy output width must be 2 * action_dim, got {self.spec.output_width}")
        if not self.log_std_min < self.log_std_max:
            raise ContractError(f"Empty log_std range [{self.log_std_min}, {self.log_std_max}]")

    @classmethod
    def create(cls, obs_dim, action_dim, hidden_widths, rng, name="pi", **kwargs):
        spec = MlpSpec(obs_dim + action_dim, tuple(hidden_widths), 2 * action_dim)
        return cls(spec, dc.init_mlp(spec, ParamStore(name), rng), obs_dim, action_dim, **kwargs)


def state_rows(s, n_rows):
    """Broadcast one state vector to `n_rows` rows; pass a matching matrix through."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return np.broadcast_to(s, (n_rows, s.shape[0]))
    if s.shape[0] != n_rows:
        raise DimensionError(f"State batch has {s.shape[0]} rows, beliefs have {n_rows}")
    return s


def policy_heads(policy, s, a_node, trainable=True):
    """(mu, log_std) nodes for the conditioning beliefs in `a_node`."""
    rows = state_rows(s, a_node.shape[0])
    if rows.shape[1] != policy.obs_dim or a_node.shape[1] != policy.action_dim:
        raise DimensionError(
            f"Policy expects states of width {policy.obs_dim} and beliefs of width {policy.action_dim}, "
            f"got {rows.shape[1]} and {a_node.shape[1]}"
        )
    x = dc.concat([a_node.tape.constant(rows), a_node], axis=1)
    out = dc.mlp_forward(policy.spec, policy.params, x, trainable)
    if not np.all(np.isfinite(out.values)):
        raise NumericError(
            "Policy network produced non-finite outputs",
            {
                "nonfinite": int(np.sum(~np.isfinite(out.values))),
                "input_abs_max": float(np.max(np.abs(x.values))),
                "param_abs_max": float(max(np.max(np.abs(p)) for p in policy.params.params.values())),
            },
        )
    d = policy.action_dim
    mu = dc.take_cols(out, 0, d)
    log_std = dc.clip(dc.take_cols(out, d, 2 * d), policy.log_std_min, policy.log_std_max)
    return mu, log_std


def transition_node(policy, s, a_node, eps, trainable=True):
    """Reparameterized f^b(a, s, eps) recorded on a_node's tape."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != a_node.shape:
        raise DimensionError(f"Noise shape {eps.shape} does not match beliefs {a_node.shape}")
    mu, log_std = policy_heads(policy, s, a_node, trainable)
    pre = mu + dc.exp(log_std) * eps
    action = dc.tanh(pre) if policy.squash else pre
    return Transition(action, pre, mu, log_std)


def transition_sample(policy, s, a, eps):
    """One reasoning step for a batch of beliefs; `eps` is supplied by the caller."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return transition_node(policy, s, Tape().constant(a), eps).action.values


def log1m_tanh_sq(u):
    """log(1 - tanh(u)^2) computed from the pre-squash value without cancellation."""
    return 2.0 * (LOG_2 - u - dc.softplus(-2.0 * u))


def gaussian_log_density(policy, u, mu, log_std):
    """Row-wise log pi^b of pre-squash values `u` under (mu, log_std); shape (rows, 1)."""
    z = (u - mu) * dc.exp(-1.0 * log_std)
    logp = dc.sum_(-0.5 * dc.square(z) - log_std - 0.5 * LOG_2PI, axis=1, keepdims=True)
    if policy.squash:
        logp = logp - dc.sum_(log1m_tanh_sq(u), axis=1, keepdims=True)
    return logp


def _pre_squash(policy, a):
    a = np.asarray(a, dtype=np.float64)
    if not policy.squash:
        return a
    bound = 1.0 - policy.atanh_clip
    if np.any(np.abs(a) >= bound):
        logger.warning(f"Clipping belief {a} to +-{bound} before atanh")
        a = np.clip(a, -bound, bound)
    return np.arctanh(a)


def log_prob(policy, s, a, a_next):
    """log pi^b(a_next | a, s) for single beliefs, including the tanh correction."""
    tape = Tape()
    a_node = tape.constant(np.asarray(a, dtype=np.float64).reshape(1, -1))
    mu, log_std = policy_heads(policy, s, a_node)
    u = tape.constant(_pre_squash(policy, a_next).reshape(1, -1))
    return float(gaussian_log_density(policy, u, mu, log_std).values[0, 0])


def _floored_mixture(policy, log_components, axis, count):
    log_mix = dc.logsumexp(log_components, axis=axis) - float(np.log(count))
    if np.any(log_mix.values < policy.log_density_floor):
        logger.warning(f"Steady-state log-density underflow; flooring at {policy.log_density_floor}")
        log_mix = dc.clip(log_mix, low=policy.log_density_floor)
    return log_mix


def nested_log_density(policy, u, heads):
    """Nested Monte-Carlo log pi^s for row-aligned chains.

    `u` holds pre-squash targets (rows, d); `heads` is a list of (mu, log_std)
    pairs, one per conditioning belief a_k of the same rows. Result (rows, 1)
    is log(1/K sum_k pi^b(target | a_k, s)).
    """
    columns = [gaussian_log_density(policy, u, mu, log_std) for mu, log_std in heads]
    return _floored_mixture(policy, dc.concat(columns, axis=1), axis=1, count=len(heads))


@dataclass
class ChainHistory:
    """Beliefs a_1..a_N of M parallel chains started from a_0, plus the noise that produced them."""
    state: np.ndarray
    start: np.ndarray
    steps: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        if self.steps.ndim != 3 or self.steps.shape[0] < 1:
            raise ContractError(f"Chain history needs shape (N >= 1, M, d), got {self.steps.shape}")
        if self.steps.shape[1:] != self.start.shape or self.noise.shape != self.steps.shape:
            raise DimensionError(
                f"Inconsistent chain shapes: start {self.start.shape}, steps {self.steps.shape}, noise {self.noise.shape}"
            )

    @property
    def n_steps(self):
        return self.steps.shape[0]

    @property
    def n_chains(self):
        return self.steps.shape[1]

    @property
    def action_dim(self):
        return self.steps.shape[2]

    @property
    def final(self):
        return self.steps[-1]

    def beliefs(self):
        """a_0..a_N stacked, shape (N + 1, M, d)."""
        return np.concatenate([self.start[None], self.steps], axis=0)

    def prefix(self, n):
        if not 1 <= n <= self.n_steps:
            raise ContractError(f"Prefix length {n} outside 1..{self.n_steps}")
        return ChainHistory(self.state, self.start, self.steps[:n], self.noise[:n])


def extend_chain(policy, chain, n_more, rng):
    """Continue a chain for `n_more` further reasoning steps."""
    if n_more < 1:
        return chain
    a = chain.final
    steps, noise = [], []
    for _ in range(n_more):
        eps = rng.standard_normal(a.shape)
        a = transition_sample(policy, chain.state, a, eps)
        steps.append(a)
        noise.append(eps)
    return ChainHistory(
        chain.state,
        chain.start,
        np.concatenate([chain.steps, np.stack(steps)]),
        np.concatenate([chain.noise, np.stack(noise)]),
    )


def simulate_chain(policy, s, a0, n_steps, rng):
    """Run the reasoning chain for `n_steps` from the batch a0."""
    if n_steps < 1:
        raise ContractError(f"Need at least one reasoning step, got {n_steps}")
    a0 = np.atleast_2d(np.asarray(a0, dtype=np.float64))
    eps = rng.standard_normal(a0.shape)
    first = transition_sample(policy, s, a0, eps)
    chain = ChainHistory(np.asarray(s, dtype=np.float64), a0, first[None], eps[None])
    return extend_chain(policy, chain, n_steps - 1, rng)


def ss_log_prob_estimate(policy, s, a, chain):
    """Differentiable nested Monte-Carlo estimate of log pi^s(a | s).

    Components are every belief of `chain` (start batch included); a plain
    (K, d) array of conditioning beliefs is accepted too. Gradients reach
    the policy parameters through the returned (1, 1) node.
    """
    components = chain.beliefs().reshape(-1, policy.action_dim) if isinstance(chain, ChainHistory) else np.atleast_2d(chain)
    if components.shape[0] < 1:
        raise ContractError("Nested estimate needs at least one conditioning belief")
    tape = Tape()
    mu, log_std = policy_heads(policy, s, tape.constant(components))
    u = tape.constant(_pre_squash(policy, a).reshape(1, -1))
    log_components = gaussian_log_density(policy, u, mu, log_std)
    return _floored_mixture(policy, log_components, axis=0, count=components.shape[0])
