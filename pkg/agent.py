"""
SSPG Agent
Acting by running parallel reasoning chains until the PSRF says they mixed,
and learning with the truncated steady-state policy gradient, a soft Q
ensemble and an optional automatic temperature.
"""
import logging
import math
from collections import namedtuple
from dataclasses import asdict, dataclass, field, replace

import numpy as np

import diffcore as dc
import grdiag
from btpolicy import BTPolicy, extend_chain, nested_log_density, policy_heads, simulate_chain, transition_node
from critic import SoftQEnsemble, bellman_target, bellman_update, polyak_update, q_aggregate_node
from diffcore import ParamStore, Tape
from errors import CheckpointError, ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

BACKPROP_MODES = ("local", "truncated_full", "full")

ActStats = namedtuple("ActStats", ["n_steps", "converged", "r_p", "trace", "random"])
LossReport = namedtuple("LossReport", ["policy_loss", "critic_loss", "alpha", "n_hat", "horizon", "mean_log_pi"])
PolicyLoss = namedtuple("PolicyLoss", ["loss", "terms", "beliefs", "log_pi"])
Batch = namedtuple("Batch", ["s", "a", "r", "s_next", "done"])


# =============================================================================
# Buffers
# =============================================================================

class ShortTermActionMemory:
    """Ring buffer of recent action-beliefs used to seed new chains."""

    def __init__(self, capacity, action_dim):
        if capacity < 1:
            raise ContractError(f"Memory capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.action_dim = action_dim
        self._data = np.zeros((capacity, action_dim))
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    def push(self, beliefs):
        beliefs = np.atleast_2d(np.asarray(beliefs, dtype=np.float64))
        if beliefs.shape[1] != self.action_dim:
            raise DimensionError(f"Memory holds beliefs of width {self.action_dim}, got {beliefs.shape[1]}")
        for row in beliefs[-self.capacity:]:
            self._data[self._next] = row
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def sample(self, m, rng):
        """Exactly m beliefs; uniform cube samples pad an underfilled memory."""
        if self._size >= m:
            return self._data[rng.choice(self._size, size=m, replace=False)].copy()
        pad = rng.uniform(-1.0, 1.0, size=(m - self._size, self.action_dim))
        return np.concatenate([self._data[: self._size].copy(), pad])

    def contents(self):
        """Stored beliefs, oldest first."""
        if self._size < self.capacity:
            return self._data[: self._size].copy()
        return np.concatenate([self._data[self._next:], self._data[: self._next]])


class ReplayBuffer:
    """FIFO transition store with uniform sampling."""

    def __init__(self, capacity, obs_dim, action_dim):
        if capacity < 1:
            raise ContractError(f"Replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._s = np.zeros((capacity, obs_dim))
        self._a = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._s_next = np.zeros((capacity, obs_dim))
        self._done = np.zeros(capacity, dtype=bool)
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    def push(self, s, a, r, s_next, done):
        i = self._next
        self._s[i], self._a[i], self._r[i], self._s_next[i], self._done[i] = s, a, r, s_next, done
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size, rng):
        if self._size == 0:
            raise ContractError("Cannot sample from an empty replay buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s_next[idx], self._done[idx])


# =============================================================================
# Temperature
# =============================================================================

@dataclass(frozen=True)
class Temperature:
    log_alpha: float = 0.0
    mode: str = "fixed"
    target_entropy: float = -1.0
    lr: float = 1e-4

    def __post_init__(self):
        if self.mode not in ("fixed", "auto"):
            raise ContractError(f"Temperature mode must be 'fixed' or 'auto', got {self.mode!r}")
        if math.isnan(self.log_alpha) or self.log_alpha == math.inf:
            raise ContractError(f"Temperature must be finite, got log alpha {self.log_alpha}")
        if self.mode == "auto" and self.log_alpha == -math.inf:
            raise ContractError("Automatic temperature needs a positive initial alpha")

    @property
    def alpha(self):
        return math.exp(self.log_alpha)


def temperature_update(temp, mean_log_pi):
    """Gradient step on log alpha with gradient (-mean_log_pi - H*)."""
    if temp.mode == "fixed":
        return temp
    return replace(temp, log_alpha=temp.log_alpha - temp.lr * (-mean_log_pi - temp.target_entropy))


# =============================================================================
# Configuration
# =============================================================================

@dataclass
class AgentConfig:
    n_beliefs: int = 64
    memory_size: int = 0
    rho: float = 0.99
    threshold: float = 1.1
    n_max: int = 64
    gamma: float = 0.99
    tau: float = 0.995
    beta: float = -1.0
    n_critics: int = 1
    hidden_widths: tuple = (32, 32)
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    policy_lr: float = 3e-4
    critic_lr: float = 3e-4
    adam_beta1: float = 0.9
    random_steps: int = 50
    min_data: int = 50
    utd: int = 1
    policy_utd: int = 1
    alpha: float = 1.0
    alpha_mode: str = "fixed"
    alpha_lr: float = 1e-4
    target_entropy: float = float("nan")
    backprop: str = "local"
    fixed_steps: int = 0
    brooks_gelman: bool = False
    policy_state: str = "next"
    action_source: str = "final"
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def __post_init__(self):
        self.hidden_widths = tuple(self.hidden_widths)
        positive = ("n_beliefs", "n_max", "n_critics", "batch_size", "buffer_capacity", "utd")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_beliefs < 2:
            raise ContractError(f"n_beliefs must be >= 2 for the PSRF, got {self.n_beliefs}")
        if not 0 <= self.policy_utd <= self.utd:
            raise ContractError(f"policy_utd must lie in [0, utd={self.utd}], got {self.policy_utd}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.threshold <= 1.0:
            raise ContractError(f"threshold must exceed 1, got {self.threshold}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.backprop not in BACKPROP_MODES:
            raise ContractError(f"Unknown backprop mode {self.backprop!r}; expected one of {BACKPROP_MODES}")
        if self.policy_state not in ("next", "current"):
            raise ContractError(f"policy_state must be 'next' or 'current', got {self.policy_state!r}")
        if self.action_source not in ("final", "history"):
            raise ContractError(f"action_source must be 'final' or 'history', got {self.action_source!r}")
        for name in ("fixed_steps", "random_steps", "min_data", "policy_utd"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")

    def resolved_memory_size(self):
        return self.memory_size if self.memory_size > 0 else self.n_beliefs

    def resolved_beta(self):
        if self.beta >= 0:
            return self.beta
        return 0.0 if self.n_critics == 1 else 0.75


# =============================================================================
# Steady-state policy gradient
# =============================================================================

def steady_state_pg_loss(
    policy, q_fn, s, a_seed, horizon, alpha=0.0, noise=None, rng=None,
    mode="local", frozen_params=None, with_log_pi=False,
):
    """Loss -mean_rows sum_{n=0..H} [Q(s, a_n) - alpha * log pi^s(a_n | s)].

    Row b runs its own chain a_0 = f(a_seed_b, s, eps_0), a_n = f(a_{n-1}, s, eps_n).
    In `local` mode only the first transition sees live parameters; later ones
    use `frozen_params` (default: the current values as constants) while action
    gradients still flow through them. `q_fn(s, a_node)` returns a (rows, 1)
    node. The entropy term always evaluates its mixture components with live
    parameters, conditioned on a_seed and the chain beliefs a_0 .. a_{H-1}.
    """
    if mode not in BACKPROP_MODES:
        raise ContractError(f"Unknown backprop mode {mode!r}")
    if horizon < 0:
        raise ContractError(f"Horizon must be >= 0, got {horizon}")
    a_seed = np.atleast_2d(np.asarray(a_seed, dtype=np.float64))
    if noise is None:
        if rng is None:
            raise ContractError("Either noise or rng must be given")
        noise = rng.standard_normal((horizon + 1, *a_seed.shape))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (horizon + 1, *a_seed.shape):
        raise DimensionError(f"Noise must have shape {(horizon + 1, *a_seed.shape)}, got {noise.shape}")
    frozen = policy if frozen_params is None else replace(policy, params=frozen_params)

    tape = Tape()
    prev = tape.constant(a_seed)
    transitions = []
    for n in range(horizon + 1):
        if n == 0 or mode == "full":
            step = transition_node(policy, s, prev, noise[n])
        elif mode == "truncated_full":
            step = transition_node(policy, s, dc.stop_gradient(prev), noise[n])
        else:
            step = transition_node(frozen, s, prev, noise[n], trainable=False)
        transitions.append(step)
        prev = step.action

    log_pi = None
    if alpha > 0 or with_log_pi:
        conditioning = [tape.constant(a_seed)] + [t.action for t in transitions[:-1]]
        heads = [policy_heads(policy, s, c) for c in conditioning]
        log_pi = [nested_log_density(policy, t.pre_squash, heads) for t in transitions]

    terms = []
    for n, t in enumerate(transitions):
        value = q_fn(s, t.action)
        if alpha > 0:
            value = value - alpha * log_pi[n]
        terms.append(dc.mean(value))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    loss = -total
    if not np.isfinite(loss.values):
        raise NumericError(
            "Policy loss is not finite",
            {"terms": [float(t.values) for t in terms], "horizon": horizon, "alpha": alpha},
        )
    beliefs = np.stack([t.action.values for t in transitions])
    log_pi_values = None if log_pi is None else np.stack([lp.values[:, 0] for lp in log_pi])
    return PolicyLoss(loss, terms, beliefs, log_pi_values)


# =============================================================================
# Agent
# =============================================================================

@dataclass
class SSPGAgent:
    config: AgentConfig
    obs_dim: int
    action_dim: int
    policy: BTPolicy
    critic: SoftQEnsemble
    temperature: Temperature
    convergence: grdiag.ConvergenceState
    memory: ShortTermActionMemory
    buffer: ReplayBuffer
    interactions: int = 0
    learn_steps: int = 0
    last_stats: ActStats = field(default=None, repr=False)

    @classmethod
    def create(cls, config, obs_dim, action_dim, rng):
        policy = BTPolicy.create(
            obs_dim, action_dim, config.hidden_widths, rng,
            log_std_min=config.log_std_min, log_std_max=config.log_std_max,
        )
        critic = SoftQEnsemble.create(
            obs_dim, action_dim, config.hidden_widths, config.n_critics, rng,
            beta=config.resolved_beta(), tau=config.tau, lr=config.critic_lr, adam_beta1=config.adam_beta1,
        )
        target_entropy = -float(action_dim) if math.isnan(config.target_entropy) else config.target_entropy
        log_alpha = math.log(config.alpha) if config.alpha > 0 else -math.inf
        temperature = Temperature(log_alpha, config.alpha_mode, target_entropy, config.alpha_lr)
        convergence = grdiag.ConvergenceState(
            rho=config.rho, threshold=config.threshold, n_max=config.n_max, brooks_gelman=config.brooks_gelman
        )
        memory = ShortTermActionMemory(config.resolved_memory_size(), action_dim)
        buffer = ReplayBuffer(config.buffer_capacity, obs_dim, action_dim)
        return cls(config, obs_dim, action_dim, policy, critic, temperature, convergence, memory, buffer)

    @property
    def horizon(self):
        """Learning-chain truncation ceil(N-hat)."""
        return int(math.ceil(self.convergence.n_hat - 1e-9))

    # -------------------------------------------------------------------------
    # Acting
    # -------------------------------------------------------------------------

    def _reason(self, s, a0, rng, max_steps):
        """Run chains until the PSRF passes; returns (chain, N, converged, R^p, trace)."""
        cap = self.convergence.n_max if max_steps is None else min(max_steps, self.convergence.n_max)
        if self.config.fixed_steps > 0:
            n = self.config.fixed_steps if max_steps is None else min(self.config.fixed_steps, max_steps)
            return simulate_chain(self.policy, s, a0, n, rng), n, True, float("nan"), []
        if cap < 2:
            return simulate_chain(self.policy, s, a0, cap, rng), cap, False, float("nan"), []

        n = min(max(2, int(math.floor(self.convergence.n_hat))), cap)
        chain = simulate_chain(self.policy, s, a0, n, rng)
        passed, r_p = grdiag.prefix_passes(chain.steps, self.convergence)
        trace = [(n, r_p)]
        if passed:
            # Same rule as grdiag.min_converged_length: the shortest passing prefix
            for length in range(2, n):
                shorter, r_short = grdiag.prefix_passes(chain.steps[:length], self.convergence)
                trace.append((length, r_short))
                if shorter:
                    return chain, length, True, r_short, trace
            return chain, n, True, r_p, trace
        while not passed and chain.n_steps < cap:
            chain = extend_chain(self.policy, chain, 1, rng)
            passed, r_p = grdiag.prefix_passes(chain.steps, self.convergence)
            trace.append((chain.n_steps, r_p))
        return chain, chain.n_steps, passed, r_p, trace

    def act(self, s, rng, explore=True, max_steps=None, memory_rng=None, explore_rng=None):
        """One environment action and the ActStats of the reasoning that chose it."""
        memory_rng = memory_rng or rng
        explore_rng = explore_rng or rng
        self.interactions += 1
        if explore and self.interactions <= self.config.random_steps:
            action = explore_rng.uniform(-1.0, 1.0, size=self.action_dim)
            self.last_stats = ActStats(0, False, float("nan"), [], True)
            return action, self.last_stats

        a0 = self.memory.sample(self.config.n_beliefs, memory_rng)
        chain, n, converged, r_p, trace = self._reason(s, a0, rng, max_steps)
        if not converged and self.config.fixed_steps == 0:
            logger.warning(f"Reasoning chains did not converge within {n} steps (R_p={r_p:.4f})")
        self.convergence = grdiag.update_running_steps(self.convergence, n)
        beliefs = chain.steps[n - 1]
        self.memory.push(beliefs)

        if self.config.action_source == "history":
            pool = chain.steps[:n].reshape(-1, self.action_dim)
        else:
            pool = beliefs
        action = pool[rng.integers(pool.shape[0])].copy()
        self.last_stats = ActStats(n, converged, r_p, trace, False)
        return action, self.last_stats

    def sample_steady_state(self, s, n_samples, rng, memory_rng=None):
        """Beliefs at the converged step of repeated reasoning rounds, at least n_samples rows."""
        memory_rng = memory_rng or rng
        batches, total = [], 0
        while total < n_samples:
            a0 = self.memory.sample(self.config.n_beliefs, memory_rng)
            chain, n, _, _, _ = self._reason(s, a0, rng, None)
            self.convergence = grdiag.update_running_steps(self.convergence, n)
            beliefs = chain.steps[n - 1]
            self.memory.push(beliefs)
            batches.append(beliefs)
            total += beliefs.shape[0]
        return np.concatenate(batches)[:n_samples]

    # -------------------------------------------------------------------------
    # Learning
    # -------------------------------------------------------------------------

    def _q_fn(self, s, a_node):
        return q_aggregate_node(self.critic, s, a_node)

    def policy_gradient_loss(self, s, a_seed, rng, noise=None, with_log_pi=False, horizon=None):
        return steady_state_pg_loss(
            self.policy, self._q_fn, s, a_seed,
            self.horizon if horizon is None else horizon,
            alpha=self.temperature.alpha, noise=noise, rng=rng,
            mode=self.config.backprop, with_log_pi=with_log_pi,
        )

    def term_gradient_norms(self, s, a_seed, rng, noise=None):
        """Norm of the policy-parameter gradient of every per-step term."""
        result = self.policy_gradient_loss(s, a_seed, rng, noise=noise)
        norms = []
        for term in result.terms:
            grads = self.policy.params.gradients(dc.backward(term))
            norms.append(float(np.sqrt(sum(np.sum(g * g) for g in grads.values()))))
        return norms

    def learn_step(self, batch, rng, update_policy=True):
        need_log_pi = self.temperature.alpha > 0 or self.temperature.mode == "auto"
        policy_s = batch.s_next if self.config.policy_state == "next" else batch.s
        result = self.policy_gradient_loss(policy_s, batch.a, rng, with_log_pi=need_log_pi)
        policy_loss = float(result.loss.values)
        if update_policy:
            grads = self.policy.params.gradients(dc.backward(result.loss))
            dc.adam_step(self.policy.params, grads, self.config.policy_lr, self.config.adam_beta1)

        target_chain = result
        if self.config.policy_state != "next":
            target_chain = self.policy_gradient_loss(batch.s_next, batch.a, rng, with_log_pi=need_log_pi)
        a_next = target_chain.beliefs[-1]
        log_pi_next = target_chain.log_pi[-1] if target_chain.log_pi is not None else np.zeros(len(batch.r))
        targets = bellman_target(
            self.critic, batch.r, self.config.gamma, batch.s_next, a_next,
            log_pi_next, self.temperature.alpha, batch.done,
        )
        critic_loss = bellman_update(self.critic, batch.s, batch.a, targets)
        polyak_update(self.critic)

        mean_log_pi = float("nan")
        if result.log_pi is not None:
            mean_log_pi = float(np.mean(result.log_pi))
            self.temperature = temperature_update(self.temperature, mean_log_pi)
        self.learn_steps += 1
        return LossReport(
            policy_loss, critic_loss, self.temperature.alpha, self.convergence.n_hat, result.beliefs.shape[0] - 1,
            mean_log_pi,
        )

    def ready_to_learn(self):
        return len(self.buffer) >= max(self.config.min_data, 1)

    def train_on_buffer(self, buffer_rng, noise_rng=None):
        """AGENT_UTD learn steps; the policy moves only on the first AGENT_POLICY_UTD."""
        noise_rng = noise_rng or buffer_rng
        reports = []
        for k in range(self.config.utd):
            batch = self.buffer.sample(self.config.batch_size, buffer_rng)
            reports.append(self.learn_step(batch, noise_rng, update_policy=k < self.config.policy_utd))
        return reports

    # -------------------------------------------------------------------------
    # Checkpoints
    # -------------------------------------------------------------------------

    def stores(self):
        return [self.policy.params, *self.critic.stores()]

    def checkpoint_extra(self):
        return {
            "n_hat": self.convergence.n_hat,
            "log_alpha": self.temperature.log_alpha,
            "memory": self.memory.contents().tolist(),
            "interactions": self.interactions,
            "learn_steps": self.learn_steps,
            "agent_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
        }

    def save(self, path, extra=None):
        dc.save_checkpoint(path, self.stores(), {**self.checkpoint_extra(), **(extra or {})})

    def restore(self, stores, extra):
        """Load parameters and acting state written by save()."""
        own = {store.name: store for store in self.stores()}
        missing = sorted(set(own) - set(stores))
        if missing:
            raise CheckpointError(f"Checkpoint lacks parameter stores {missing}")
        for name, store in own.items():
            loaded = stores[name]
            if {k: v.shape for k, v in loaded.params.items()} != {k: v.shape for k, v in store.params.items()}:
                raise CheckpointError(f"Parameter shapes of {name!r} do not match this agent")
            _assign(store, loaded)
        try:
            self.convergence = replace(self.convergence, n_hat=float(extra["n_hat"]))
            self.temperature = replace(self.temperature, log_alpha=float(extra["log_alpha"]))
            self.interactions = int(extra.get("interactions", 0))
            self.learn_steps = int(extra.get("learn_steps", 0))
            memory = np.asarray(extra.get("memory", []), dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Malformed agent state in checkpoint: {e}") from e
        self.memory = ShortTermActionMemory(self.memory.capacity, self.action_dim)
        if memory.size:
            self.memory.push(memory.reshape(-1, self.action_dim))
        return self


def _assign(store: ParamStore, loaded: ParamStore):
    store.params = {k: v.copy() for k, v in loaded.params.items()}
    store.m = {k: v.copy() for k, v in loaded.m.items()}
    store.v = {k: v.copy() for k, v in loaded.v.items()}
    store.step = loaded.step

