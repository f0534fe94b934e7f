"""
Positional bandits and ground-truth oracles
Single-step goal-reaching tasks, the canonical exp(Q/alpha) density on a grid,
goal visit frequencies and the quantized goal-to-goal transition matrix.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from btpolicy import transition_sample
from errors import ContractError, DimensionError

logger = logging.getLogger(__name__)


@dataclass
class PositionalBandit:
    """Reward is minus the distance to the closest goal; every episode is one step."""
    goals: np.ndarray
    low: float = -1.0
    high: float = 1.0
    visit_radius: float = 0.2

    def __post_init__(self):
        self.goals = np.atleast_2d(np.asarray(self.goals, dtype=np.float64))
        if self.goals.size == 0:
            raise ContractError("A positional bandit needs at least one goal")
        if not self.low < self.high:
            raise ContractError(f"Empty box [{self.low}, {self.high}]")
        if np.any(self.goals < self.low) or np.any(self.goals > self.high):
            raise ContractError(f"Goals {self.goals.tolist()} lie outside the box [{self.low}, {self.high}]")
        if self.visit_radius <= 0:
            raise ContractError(f"Visit radius must be positive, got {self.visit_radius}")

    @property
    def n_goals(self):
        return self.goals.shape[0]

    @property
    def action_dim(self):
        return self.goals.shape[1]

    @property
    def obs_dim(self):
        return 1

    def reset(self):
        """Constant token state; the task has a single state."""
        return np.zeros(self.obs_dim)

    def from_cube(self, a):
        return self.low + (np.asarray(a, dtype=np.float64) + 1.0) * 0.5 * (self.high - self.low)

    def to_cube(self, position):
        return 2.0 * (np.asarray(position, dtype=np.float64) - self.low) / (self.high - self.low) - 1.0

    def reward(self, positions):
        """Negative distance to the nearest goal for each row of `positions`."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        if positions.shape[1] != self.action_dim:
            raise DimensionError(f"Positions must have width {self.action_dim}, got {positions.shape[1]}")
        distances = np.linalg.norm(positions[:, None, :] - self.goals[None, :, :], axis=2)
        return -distances.min(axis=1)

    def step(self, position):
        """(reward, done) for one box position; out-of-box positions are clipped."""
        position = np.asarray(position, dtype=np.float64).reshape(-1)
        if np.any(position < self.low) or np.any(position > self.high):
            logger.warning(f"Action {position} outside the box [{self.low}, {self.high}]; clipping")
            position = np.clip(position, self.low, self.high)
        return float(self.reward(position)[0]), True


def circle_goals(n_goals, radius=0.6):
    """n_goals points evenly spaced on a circle around the origin."""
    if n_goals < 1:
        raise ContractError(f"Need at least one goal, got {n_goals}")
    angles = 2.0 * np.pi * np.arange(n_goals) / n_goals
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def make_bandit(kind, goals=None, n_goals=None, radius=0.6, visit_radius=0.2):
    """Build the 1-D toy task or a 2-D circle bandit from config values."""
    if kind == "bandit_1d":
        goals = [[-0.55], [0.55]] if goals is None else goals
    elif kind == "bandit_2d":
        goals = circle_goals(n_goals, radius) if goals is None else goals
    else:
        raise ContractError(f"Unknown environment kind {kind!r}")
    return PositionalBandit(np.asarray(goals, dtype=np.float64), visit_radius=visit_radius)


# =============================================================================
# Oracles
# =============================================================================

@dataclass(frozen=True)
class CanonicalOracle:
    """Grid over a 1-D action box on which exp(Q/alpha) is normalized."""
    alpha: float
    resolution: int = 2001
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractError(f"Canonical density needs alpha > 0, got {self.alpha}")
        if self.resolution < 2:
            raise ContractError(f"Grid needs at least 2 points, got {self.resolution}")

    def grid(self):
        return np.linspace(self.low, self.high, self.resolution)


def canonical_density(oracle, q_fn):
    """(grid, density) with density proportional to exp(q_fn(grid)/alpha).

    `q_fn` maps an (n, 1) array of actions to n values. Normalization shifts by
    the maximum log-weight before exponentiating and integrates with the
    trapezoidal rule.
    """
    grid = oracle.grid()
    log_w = np.asarray(q_fn(grid[:, None]), dtype=np.float64).reshape(-1) / oracle.alpha
    if log_w.shape != grid.shape:
        raise DimensionError(f"Q evaluated to shape {log_w.shape} on a grid of {grid.shape[0]} points")
    weights = np.exp(log_w - np.max(log_w))
    return grid, weights / integrate.trapezoid(weights, grid)


def bin_masses(grid, density, edges):
    """Probability mass of a gridded density inside each histogram bin."""
    masses = np.histogram(grid, bins=edges, weights=density)[0]
    return masses / masses.sum()


def empirical_masses(samples, edges):
    counts = np.histogram(np.asarray(samples, dtype=np.float64).reshape(-1), bins=edges)[0]
    if counts.sum() == 0:
        raise ContractError("No samples fall inside the histogram range")
    return counts / counts.sum()


def tv_distance(p, q):
    """Total variation between two probability vectors over the same bins."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"Cannot compare distributions of shapes {p.shape} and {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def goal_visit_frequencies(positions, env):
    """(per-goal frequencies, out-of-radius mass); entries sum to 1."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if positions.shape[0] == 0 or positions.size == 0:
        raise ContractError("Need at least one episode to compute visit frequencies")
    distances = np.linalg.norm(positions[:, None, :] - env.goals[None, :, :], axis=2)
    nearest = distances.argmin(axis=1)
    inside = distances[np.arange(len(nearest)), nearest] <= env.visit_radius
    counts = np.bincount(nearest[inside], minlength=env.n_goals)
    total = positions.shape[0]
    return counts / total, float(np.sum(~inside)) / total


def _ball_samples(center, radius, n, rng):
    d = center.shape[0]
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return center + direction * radius * rng.uniform(size=(n, 1)) ** (1.0 / d)


def quantized_transition_matrix(policy, env, samples, rng):
    """G x G matrix of one-step goal transitions under the BT-policy.

    Row g: beliefs drawn uniformly within the visit radius of goal g (and
    strictly inside the box) take one reasoning step; outputs are assigned to
    their nearest goal. Rows with no usable samples are NaN and reported.
    """
    if env.n_goals < 2:
        raise ContractError("Transition matrix needs at least two goals")
    if samples < 1:
        raise ContractError(f"Need at least one sample per goal, got {samples}")
    s = env.reset()
    matrix = np.full((env.n_goals, env.n_goals), np.nan)
    undefined = []
    for g, goal in enumerate(env.goals):
        positions = _ball_samples(goal, env.visit_radius, samples, rng)
        positions = positions[np.all((positions > env.low) & (positions < env.high), axis=1)]
        if positions.shape[0] == 0:
            logger.warning(f"No samples landed near goal {g}; row left undefined")
            undefined.append(g)
            continue
        beliefs = env.to_cube(positions)
        eps = rng.standard_normal(beliefs.shape)
        outputs = env.from_cube(transition_sample(policy, s, beliefs, eps))
        nearest = np.linalg.norm(outputs[:, None, :] - env.goals[None, :, :], axis=2).argmin(axis=1)
        matrix[g] = np.bincount(nearest, minlength=env.n_goals) / nearest.shape[0]
    return matrix, undefined
