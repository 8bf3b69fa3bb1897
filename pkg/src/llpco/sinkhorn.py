"""Entropy-regularized optimal transport with cluster-proportion marginals.

Distributes the unit mass of a bag of samples over K clusters so that
cluster k receives a prescribed share of the total (row marginals) while
every sample keeps its own mass (column marginals, uniform by default).
The solver maximizes

    Tr(Q^T S) + epsilon * h(Q)        over  Q >= 0, Q 1 = w, Q^T 1 = a

where S holds prototype-vs-sample similarities and h is the entropy
-sum(Q * log Q). Equal row marginals w = 1/K recover the classic
balanced-assignment special case.

Iteration runs in the log domain with dual potentials, so similarity
magnitudes up to ~1e4 * epsilon never overflow, and marginals with exact
zeros are handled by dropping the corresponding rows/columns up front.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import UnsupportedInstanceError

# Marginal vectors must sum to 1 within this before a solve is attempted.
MARGINAL_SUM_TOL = 1e-6

# lp_oracle refuses instances whose assignment enumeration exceeds this.
MAX_ORACLE_ENUMERATIONS = 2_000_000


@dataclass(frozen=True)
class MarginalSpec:
    """Row (cluster-share) and column (per-sample) marginals of the plan.

    row: length-K non-negative vector summing to 1; zeros allowed.
    col: length-n non-negative vector summing to 1; uniform 1/n by default.
    """

    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        row = np.asarray(self.row, dtype=np.float64)
        col = np.asarray(self.col, dtype=np.float64)
        object.__setattr__(self, "row", row)
        object.__setattr__(self, "col", col)
        for name, vec in (("row", row), ("col", col)):
            if vec.ndim != 1 or vec.size == 0:
                raise ValueError(f"{name} marginal must be a non-empty 1-D vector")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} marginal has non-finite entries")
            if np.any(vec < 0):
                raise ValueError(f"{name} marginal has negative entries")
            total = float(vec.sum())
            if abs(total - 1.0) > MARGINAL_SUM_TOL:
                raise ValueError(
                    f"{name} marginal sums to {total:.9g}, expected 1 within {MARGINAL_SUM_TOL}"
                )

    @classmethod
    def with_uniform_cols(cls, row, n: int) -> "MarginalSpec":
        """Cluster proportions `row` with uniform per-sample mass 1/n."""
        if n < 1:
            raise ValueError("need at least one column")
        return cls(row=np.asarray(row, dtype=np.float64), col=np.full(n, 1.0 / n))


@dataclass(frozen=True)
class TransportPlan:
    """A (possibly approximate) solution of the constrained assignment.

    values: K x n non-negative matrix.
    residual: achieved L1 marginal error |Q1 - w|_1 + |Q^T 1 - a|_1.
    iterations_used: sweeps performed (or assignments enumerated, for the oracle).
    converged: residual <= tol was reached before the iteration cap.
    """

    values: np.ndarray
    residual: float
    iterations_used: int
    converged: bool
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _validated_scores(scores, marginals: MarginalSpec) -> np.ndarray:
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {S.shape}")
    K, n = S.shape
    if K < 2:
        raise ValueError("need at least two clusters")
    if n < 1:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(S)):
        raise ValueError("score matrix has non-finite entries")
    if marginals.row.size != K:
        raise ValueError(f"row marginal has length {marginals.row.size}, expected {K}")
    if marginals.col.size != n:
        raise ValueError(f"col marginal has length {marginals.col.size}, expected {n}")
    return S


def solve_codes(
    scores,
    marginals: MarginalSpec,
    epsilon: float,
    max_iters: int = 10_000,
    tol: float = 1e-8,
) -> TransportPlan:
    """Solve the entropic assignment problem by alternating dual updates.

    One iteration is a full row-then-column sweep. The loop stops once the
    L1 marginal residual drops to `tol` or `max_iters` sweeps have run;
    `tol=0.0` effectively requests exactly `max_iters` sweeps (the
    fixed-iteration mode used during training). A plan that did not reach
    `tol` is returned with `converged=False`, never raised.
    """
    S = _validated_scores(scores, marginals)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    K, n = S.shape
    w = marginals.row
    a = marginals.col

    # Zero-mass rows/columns would give -inf potentials; solve the reduced
    # problem and reinsert exact zeros afterwards.
    live_rows = w > 0
    live_cols = a > 0
    logits = S[np.ix_(live_rows, live_cols)] / epsilon
    log_w = np.log(w[live_rows])
    log_a = np.log(a[live_cols])

    w_live = w[live_rows]
    a_live = a[live_cols]
    g = np.zeros(log_a.size)
    Q_live = None
    residual = np.inf
    iterations_used = 0
    converged = False
    for it in range(1, max_iters + 1):
        A = logits + g[None, :]
        m_row = A.max(axis=1)
        f = log_w - (m_row + np.log(np.exp(A - m_row[:, None]).sum(axis=1)))
        B = logits + f[:, None]
        m_col = B.max(axis=0)
        g = log_a - (m_col + np.log(np.exp(B - m_col[None, :]).sum(axis=0)))
        Q_live = np.exp(B + g[None, :])
        residual = float(
            np.abs(Q_live.sum(axis=1) - w_live).sum()
            + np.abs(Q_live.sum(axis=0) - a_live).sum()
        )
        iterations_used = it
        if residual <= tol:
            converged = True
            break

    Q = np.zeros((K, n))
    Q[np.ix_(live_rows, live_cols)] = Q_live
    return TransportPlan(
        values=Q,
        residual=residual,
        iterations_used=iterations_used,
        converged=converged,
        row_marginal=w.copy(),
        col_marginal=a.copy(),
    )


def entropy(plan: TransportPlan) -> float:
    """Entropy -sum(Q log Q) of the plan, with 0 log 0 taken as 0."""
    return float(-xlogy(plan.values, plan.values).sum())


def max_feasible_entropy(marginals: MarginalSpec) -> float:
    """Entropy of the independence coupling outer(w, a), the feasible maximum."""
    return float(-xlogy(marginals.row, marginals.row).sum() - xlogy(marginals.col, marginals.col).sum())


def harden(plan: TransportPlan) -> np.ndarray:
    """One-hot each column on its argmax row, keeping the column's mass.

    Ties go to the lower cluster index. The result keeps the column
    marginals exactly but may violate the row marginals; hardening is a
    lossy projection, not a constrained rounding.
    """
    Q = plan.values
    winners = Q.argmax(axis=0)
    hard = np.zeros_like(Q)
    hard[winners, np.arange(Q.shape[1])] = plan.col_marginal
    return hard


def _multinomial_count(counts: np.ndarray) -> int:
    total = 1
    placed = 0
    for c in counts:
        for i in range(1, int(c) + 1):
            placed += 1
            total = total * placed // i
    return total


def _assignments(counts: np.ndarray):
    """Yield all cluster assignments with the given per-cluster counts,
    in lexicographic order over the assignment tuple."""
    K = counts.size
    n = int(counts.sum())
    remaining = counts.copy()
    assign: list[int] = []

    def rec():
        if len(assign) == n:
            yield tuple(assign)
            return
        for k in range(K):
            if remaining[k] > 0:
                remaining[k] -= 1
                assign.append(k)
                yield from rec()
                assign.pop()
                remaining[k] += 1

    yield from rec()


def lp_oracle(scores, marginals: MarginalSpec) -> TransportPlan:
    """Exact maximizer of Tr(Q^T S) over the transport polytope, by
    exhaustive enumeration of integral assignments.

    Only instances with uniform column mass and integral per-cluster counts
    w*n are supported (those have an integral optimal vertex); anything
    else raises UnsupportedInstanceError. Among tied optima the first
    assignment in lexicographic order wins. Intended as a small-instance
    reference for the epsilon -> 0 limit of the entropic solver.
    """
    S = _validated_scores(scores, marginals)
    K, n = S.shape
    if K * n > 64:
        raise ValueError(f"oracle limited to K*n <= 64, got {K * n}")
    a = marginals.col
    if not np.allclose(a, 1.0 / n, atol=1e-12):
        raise UnsupportedInstanceError("column marginal must be uniform 1/n")
    counts_real = marginals.row * n
    counts = np.rint(counts_real).astype(np.int64)
    if np.any(np.abs(counts_real - counts) > 1e-9):
        raise UnsupportedInstanceError("w * n is not integral")
    if counts.sum() != n:
        raise UnsupportedInstanceError("rounded cluster counts do not partition the bag")
    if _multinomial_count(counts) > MAX_ORACLE_ENUMERATIONS:
        raise UnsupportedInstanceError("assignment enumeration too large")

    cols = np.arange(n)
    best_obj = -np.inf
    best_assign = None
    enumerated = 0
    for assign in _assignments(counts):
        enumerated += 1
        obj = S[assign, cols].sum() / n
        if obj > best_obj:
            best_obj = obj
            best_assign = assign

    Q = np.zeros((K, n))
    Q[best_assign, cols] = 1.0 / n
    residual = float(
        np.abs(Q.sum(axis=1) - marginals.row).sum() + np.abs(Q.sum(axis=0) - a).sum()
    )
    return TransportPlan(
        values=Q,
        residual=residual,
        iterations_used=enumerated,
        converged=True,
        row_marginal=marginals.row.copy(),
        col_marginal=a.copy(),
    )


def plan_objective(plan: TransportPlan, scores) -> float:
    """Linear part Tr(Q^T S) of the transport objective."""
    return float((plan.values * np.asarray(scores, dtype=np.float64)).sum())
