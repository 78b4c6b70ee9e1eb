"""Input validation helpers shared across the package.

These mirror the ``sklearn.utils.validation`` style: each helper either
returns a sanitized array or raises ``ValueError`` with a message naming the
offending argument.
"""

from __future__ import annotations

import numpy as np

ROW_TOL = 1e-9


class PoisonedStateError(FloatingPointError):
    """Raised when a NaN or infinity would propagate into learned state."""


def check_probability_rows(probs, name="probs", tol=ROW_TOL):
    """Validate a 2-D array whose rows are probability vectors."""
    arr = np.asarray(probs, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"{name} row {bad} sums to {sums[bad]!r}, not 1")
    return arr


def check_distribution(vec, n, name="distribution", tol=ROW_TOL):
    arr = np.asarray(vec, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    if abs(arr.sum() - 1.0) > tol:
        raise ValueError(f"{name} sums to {arr.sum()!r}, not 1")
    return arr


def check_weights(vec, n, name="weights"):
    """Nonnegative state weights; need not be normalized."""
    arr = np.asarray(vec, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    return arr


def check_index_array(idx, upper, name):
    arr = np.asarray(idx)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must hold integer indices")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= upper):
        raise ValueError(f"{name} out of range [0, {upper})")
    return arr


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise PoisonedStateError(f"non-finite values in {what}")
    return arr


def as_probs(policy):
    """Return the (n_states, n_actions) probability table of any policy-like object.

    Accepts a raw array, a :class:`~safecritic.cmdp.PolicyTable` or a
    :class:`~safecritic.policy.SoftmaxPolicy`.
    """
    probs = getattr(policy, "probs", policy)
    return check_probability_rows(probs, name="policy")


def check_policy_shape(probs, mdp):
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )
    return probs
