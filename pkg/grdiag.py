"""
Convergence diagnostics for parallel reasoning chains
Multivariate Gelman-Rubin: within/between covariances, the PSRF, the
backtracking search for the shortest converged prefix and the running
step budget N-hat.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from btpolicy import ChainHistory
from errors import (
    ContractError,
    DegenerateCovarianceError,
    DimensionError,
    InsufficientChainsError,
    InsufficientSamplesError,
)

logger = logging.getLogger(__name__)

W_REGULARIZER = 1e-10
DEGENERATE_VARIANCE = 1e-14


@dataclass(frozen=True)
class PsrfReport:
    within: np.ndarray
    between: np.ndarray
    lambda_max: float
    r_p: float
    n_steps: int
    n_chains: int


@dataclass(frozen=True)
class ConvergenceState:
    n_hat: float = 1.0
    rho: float = 0.99
    threshold: float = 1.1
    n_max: int = 64
    brooks_gelman: bool = False

    def __post_init__(self):
        if self.n_hat < 1.0:
            raise ContractError(f"N-hat must be >= 1, got {self.n_hat}")
        if not 0.0 <= self.rho < 1.0:
            raise ContractError(f"rho must lie in [0, 1), got {self.rho}")
        if self.threshold <= 1.0:
            raise ContractError(f"PSRF threshold must exceed 1, got {self.threshold}")
        if self.n_max < 2:
            raise ContractError(f"N_max must be >= 2, got {self.n_max}")


def _samples(chain):
    """Beliefs a_1..a_N as an (N, M, d) array."""
    x = chain.steps if isinstance(chain, ChainHistory) else np.asarray(chain, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise DimensionError(f"Chain samples must be (N, M, d), got shape {x.shape}")
    return x


def within_covariance(chain):
    """Average unbiased within-chain sample covariance W."""
    x = _samples(chain)
    n, m, _ = x.shape
    if n < 2:
        raise InsufficientSamplesError(f"Within-chain covariance needs N >= 2 samples, got {n}")
    dev = x - x.mean(axis=0, keepdims=True)
    return np.einsum("nmi,nmj->ij", dev, dev) / (m * (n - 1))


def between_covariance(chain):
    """Sample covariance B of the per-chain means around the grand mean."""
    x = _samples(chain)
    m = x.shape[1]
    if m < 2:
        raise InsufficientChainsError(f"Between-chain covariance needs M >= 2 chains, got {m}")
    means = x.mean(axis=0)
    dev = means - means.mean(axis=0)
    return dev.T @ dev / (m - 1)


def _degenerate_dims(within):
    diagonal = np.diag(within)
    dims = [i for i, var in enumerate(diagonal) if var <= DEGENERATE_VARIANCE]
    if dims:
        return dims
    eigenvalues, eigenvectors = np.linalg.eigh(within)
    if eigenvalues[0] > DEGENERATE_VARIANCE:
        return []
    return [i for i, weight in enumerate(np.abs(eigenvectors[:, 0])) if weight > 1e-3]


def psrf(chain, brooks_gelman=False):
    """R^p = sqrt((N - 1)/N + lambda_max(W^-1 B)).

    lambda_max comes from the symmetric pencil B x = lambda W x; W + eps I
    stands in for W when its Cholesky factorization fails.
    With brooks_gelman the eigenvalue is scaled by (M + 1)/M.
    """
    x = _samples(chain)
    n, m, d = x.shape
    within = within_covariance(x)
    between = between_covariance(x)
    dims = _degenerate_dims(within)
    if dims:
        raise DegenerateCovarianceError(
            f"Within-chain covariance is singular along dimensions {dims}",
            dims,
            {"n_steps": n, "n_chains": m, "within_diag": np.diag(within).tolist()},
        )
    try:
        eigenvalues = linalg.eigh(between, within, eigvals_only=True)
    except linalg.LinAlgError:
        eigenvalues = linalg.eigh(between, within + W_REGULARIZER * np.eye(d), eigvals_only=True)
    lambda_max = max(float(eigenvalues[-1]), 0.0)
    factor = (m + 1) / m if brooks_gelman else 1.0
    r_p = float(np.sqrt((n - 1) / n + factor * lambda_max))
    return PsrfReport(within, between, lambda_max, r_p, n, m)


def psrf_trace(chain, start=2, brooks_gelman=False):
    """PSRF of every prefix a_1:N for N = start..len(chain)."""
    x = _samples(chain)
    return [psrf(x[:n], brooks_gelman) for n in range(max(start, 2), x.shape[0] + 1)]


def prefix_passes(chain, state):
    """(passed, R^p) for the whole chain.

    Chains that collapsed onto one point (W and B both zero) count as
    converged; a singular W with spread between chains does not.
    """
    x = _samples(chain)
    try:
        report = psrf(x, state.brooks_gelman)
    except DegenerateCovarianceError:
        n = x.shape[0]
        if np.max(np.abs(between_covariance(x))) <= DEGENERATE_VARIANCE:
            return True, float(np.sqrt((n - 1) / n))
        return False, float("inf")
    return report.r_p < state.threshold, report.r_p


def min_converged_length(chain, state):
    """Shortest prefix length whose PSRF is below threshold, or None.

    The full chain is tested first; if it fails the result is None. Otherwise
    the first prefix, counting up from length 2, that passes is returned.
    """
    x = _samples(chain)
    n = x.shape[0]
    if n < int(np.floor(state.n_hat)):
        raise ContractError(f"Chain of {n} steps is shorter than floor(N-hat) = {int(np.floor(state.n_hat))}")
    if not prefix_passes(x, state)[0]:
        return None
    for length in range(2, n):
        if prefix_passes(x[:length], state)[0]:
            return length
    return n


def update_running_steps(state, n):
    """N-hat <- rho * N-hat + (1 - rho) * N."""
    if n < 1:
        raise ContractError(f"Converged length must be >= 1, got {n}")
    return replace(state, n_hat=state.rho * state.n_hat + (1.0 - state.rho) * n)
