"""Covariances restricted to the zero-sum parameter subspace.

Parameters live in ``{theta : sum(theta) = 0}``, so every parameter error
``theta_hat - theta_opt`` lies in the orthogonal complement of the all-ones
vector.  Eigenvalues used for coverage and condition numbers are taken on
that subspace; along the all-ones direction tabular covariances are always
singular and that direction is never explored.
"""

from functools import lru_cache

import numpy as np
from scipy.linalg import null_space

from .env import DiscreteEnv


@lru_cache(maxsize=64)
def zero_sum_basis(d: int) -> np.ndarray:
    """Orthonormal basis of ``{v in R^d : sum(v) = 0}``, shape (d, d - 1)."""
    basis = null_space(np.ones((1, d)))
    basis.setflags(write=False)
    return basis


def restricted_eigvalsh(M: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix on the zero-sum subspace."""
    U = zero_sum_basis(M.shape[0])
    if U.shape[1] == 0:
        return np.zeros(0)
    R = U.T @ M @ U
    return np.linalg.eigvalsh(0.5 * (R + R.T))


def pair_law(env: DiscreteEnv) -> np.ndarray:
    """Probability of each ordered distinct pair ``(s, a, b)`` drawn by the data sampler.

    Two independent SFT draws conditioned on being distinct, shape (S, A, A).
    """
    pi = env.sft_policy
    joint = pi[:, :, None] * pi[:, None, :]
    idx = np.arange(env.n_actions)
    joint[:, idx, idx] = 0.0
    mass = joint.sum(axis=(1, 2), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(mass > 0, joint / mass, 0.0)
    return env.prompt_weights[:, None, None] * cond
