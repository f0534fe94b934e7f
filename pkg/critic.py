"""
Soft Q ensemble
K critics with delayed copies, the uncertainty-penalized aggregate, soft
Bellman targets and regression, and Polyak averaging.
"""
import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

import diffcore as dc
from btpolicy import state_rows
from diffcore import MlpSpec, ParamStore, Tape
from errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

QEstimate = namedtuple("QEstimate", ["values", "aggregate"])


@dataclass
class SoftQEnsemble:
    spec: MlpSpec
    members: list
    targets: list
    beta: float = 0.0
    tau: float = 0.995
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        if not self.members:
            raise ContractError("A critic ensemble needs at least one member")
        if len(self.members) != len(self.targets):
            raise ContractError(f"{len(self.members)} online critics but {len(self.targets)} delayed copies")
        for online, delayed in zip(self.members, self.targets):
            shapes = {k: v.shape for k, v in online.params.items()}
            if shapes != {k: v.shape for k, v in delayed.params.items()}:
                raise DimensionError(f"Delayed critic {delayed.name} does not match {online.name}")
        if self.beta < 0:
            raise ContractError(f"Penalty coefficient must be >= 0, got {self.beta}")
        if not 0.0 <= self.tau < 1.0:
            raise ContractError(f"Polyak coefficient must lie in [0, 1), got {self.tau}")

    @classmethod
    def create(cls, obs_dim, action_dim, hidden_widths, n_members, rng, beta=None, **kwargs):
        spec = MlpSpec(obs_dim + action_dim, tuple(hidden_widths), 1)
        members = [dc.init_mlp(spec, ParamStore(f"q{k}"), rng) for k in range(n_members)]
        targets = [member.copy(name=f"{member.name}_target") for member in members]
        if beta is None:
            beta = 0.0 if n_members == 1 else 0.75
        return cls(spec, members, targets, beta=beta, **kwargs)

    @property
    def n_members(self):
        return len(self.members)

    def stores(self):
        return [*self.members, *self.targets]


def _input_node(tape, s, a):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return tape.constant(np.concatenate([state_rows(s, a.shape[0]), a], axis=1))


def q_eval(ens, s, a, use_delayed=False):
    """Per-member values (K, B) and the aggregate mean - beta * std (B,)."""
    x = _input_node(Tape(), s, a)
    stores = ens.targets if use_delayed else ens.members
    values = np.stack([dc.mlp_forward(ens.spec, store, x).values[:, 0] for store in stores])
    aggregate = values.mean(axis=0)
    if ens.n_members > 1 and ens.beta > 0:
        aggregate = aggregate - ens.beta * values.std(axis=0)
    return QEstimate(values, aggregate)


def q_aggregate_node(ens, s, a_node, use_delayed=False):
    """Aggregate soft Q as a (B, 1) node; critic parameters are gradient-stopped."""
    tape = a_node.tape
    rows = tape.constant(state_rows(s, a_node.shape[0]))
    x = dc.concat([rows, a_node], axis=1)
    stores = ens.targets if use_delayed else ens.members
    outputs = [dc.mlp_forward(ens.spec, store, x, trainable=False) for store in stores]
    total = outputs[0]
    for out in outputs[1:]:
        total = total + out
    mean = total * (1.0 / len(outputs))
    if len(outputs) == 1 or ens.beta == 0:
        return mean
    var = dc.square(outputs[0] - mean)
    for out in outputs[1:]:
        var = var + dc.square(out - mean)
    var = var * (1.0 / len(outputs))
    # Rows where all members agree get std 0 and no gradient through the root
    agree = (var.values == 0.0).astype(np.float64)
    std = dc.power(var + agree, 0.5) * (1.0 - agree)
    return mean - ens.beta * std


def bellman_target(ens, r, gamma, s_next, a_next, log_pi_ss, alpha, done=None):
    """r + gamma * (Q'(s', a') - alpha * log pi^s(a'|s')), plain arrays (no gradient path).

    Terminal transitions and gamma == 0 give exactly r.
    """
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    done = np.zeros_like(r, dtype=bool) if done is None else np.atleast_1d(np.asarray(done, dtype=bool))
    if gamma == 0 or np.all(done):
        return r.copy()
    q_next = q_eval(ens, s_next, a_next, use_delayed=True).aggregate
    soft_value = q_next - alpha * np.atleast_1d(np.asarray(log_pi_ss, dtype=np.float64))
    return np.where(done, r, r + gamma * soft_value)


def bellman_update(ens, s, a, target):
    """One Adam step per member on the squared soft Bellman error; returns mean loss."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    tape = Tape()
    x = _input_node(tape, s, a)
    if x.shape[0] != target.shape[0]:
        raise DimensionError(f"{x.shape[0]} transitions but {target.shape[0]} targets")
    losses = [dc.mean(dc.square(dc.mlp_forward(ens.spec, store, x) - target)) for store in ens.members]
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    if not np.isfinite(total.values):
        raise NumericError(
            "Critic loss is not finite; skipping update",
            {"member_losses": [float(loss.values) for loss in losses], "target_abs_max": float(np.max(np.abs(target)))},
        )
    grads = dc.backward(total)
    for store in ens.members:
        dc.adam_step(store, store.gradients(grads), ens.lr, ens.adam_beta1, ens.adam_beta2)
    return float(total.values) / ens.n_members


def polyak_update(ens):
    """phi' <- tau * phi' + (1 - tau) * phi, in place."""
    for online, delayed in zip(ens.members, ens.targets):
        for key, value in delayed.params.items():
            value *= ens.tau
            value += (1.0 - ens.tau) * online.params[key]
    return ens
