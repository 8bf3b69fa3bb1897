"""Swapped-prediction loss with proportion-constrained codes as targets.

Each view's probabilities must predict the *other* view's codes; codes come
from the constrained transport solve and are treated as constants (no
gradient flows through the solver). Code columns are renormalized from mass
1/n to per-sample distributions before entering the cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sinkhorn import MarginalSpec, TransportPlan, harden, solve_codes


@dataclass(frozen=True)
class SwapLossResult:
    loss: float
    grad_scores_s: np.ndarray
    grad_scores_t: np.ndarray
    codes_s: TransportPlan
    codes_t: TransportPlan


def _log_softmax_cols(scores: np.ndarray, temperature: float) -> np.ndarray:
    X = scores / temperature
    X = X - X.max(axis=0, keepdims=True)
    return X - np.log(np.exp(X).sum(axis=0, keepdims=True))


def _column_distributions(plan: TransportPlan, hard: bool) -> np.ndarray:
    Q = harden(plan) if hard else plan.values
    col_mass = Q.sum(axis=0, keepdims=True)
    # Columns with zero mass (a_j = 0) contribute nothing to the loss.
    safe = np.where(col_mass > 0, col_mass, 1.0)
    return Q / safe


def swap_loss(
    scores_s: np.ndarray,
    scores_t: np.ndarray,
    marginals: MarginalSpec,
    epsilon: float,
    temperature: float,
    sinkhorn_iters: int = 5,
    hard: bool = False,
) -> SwapLossResult:
    """Cross-entropy between each view's softmax probabilities and the other
    view's codes, averaged over the bag.

    Codes are solved with a fixed number of sweeps (training convention) and
    column-renormalized to distributions; `hard` snaps them to one-hot
    first. Gradients w.r.t. the score matrices are (P - C)/(temperature*n)
    per view; their column sums are zero by the softmax/cross-entropy
    structure.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    S_s = np.asarray(scores_s, dtype=np.float64)
    S_t = np.asarray(scores_t, dtype=np.float64)
    if S_s.shape != S_t.shape:
        raise ValueError(f"view score shapes differ: {S_s.shape} vs {S_t.shape}")

    codes_s = solve_codes(S_s, marginals, epsilon, max_iters=sinkhorn_iters, tol=0.0)
    codes_t = solve_codes(S_t, marginals, epsilon, max_iters=sinkhorn_iters, tol=0.0)
    C_s = _column_distributions(codes_s, hard)
    C_t = _column_distributions(codes_t, hard)

    logP_s = _log_softmax_cols(S_s, temperature)
    logP_t = _log_softmax_cols(S_t, temperature)
    n = S_s.shape[1]
    loss = float(-((C_t * logP_s).sum() + (C_s * logP_t).sum()) / n)

    P_s = np.exp(logP_s)
    P_t = np.exp(logP_t)
    grad_s = (P_s - C_t) / (temperature * n)
    grad_t = (P_t - C_s) / (temperature * n)
    return SwapLossResult(
        loss=loss,
        grad_scores_s=grad_s,
        grad_scores_t=grad_t,
        codes_s=codes_s,
        codes_t=codes_t,
    )


def predicted_proportions(probs: np.ndarray) -> np.ndarray:
    """Mean posterior per cluster (row means of a column-stochastic matrix)."""
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("probability matrix must be 2-D")
    col_sums = P.sum(axis=0)
    if not np.allclose(col_sums, 1.0, atol=1e-6):
        raise ValueError("columns must sum to 1")
    return P.mean(axis=1)


def bag_proportion_loss(predicted: np.ndarray, prior: np.ndarray) -> float:
    """Cross-entropy of the prior against the predicted proportions.

    Diagnostic only; the training objective never optimizes it directly.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if predicted.shape != prior.shape:
        raise ValueError("vectors must have equal length")
    return float(-(prior * np.log(np.clip(predicted, 1e-12, None))).sum())
