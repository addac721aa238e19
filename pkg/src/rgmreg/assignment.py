"""From affinity scores to soft and hard correspondences.

The differentiable half (instance normalisation, slack augmentation,
Sinkhorn) operates on :class:`~rgmreg.autodiff.Tensor` so it can sit inside
the training graph.  The hard half (Hungarian LAP, soft-to-hard extraction)
is plain numpy.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import EPS, Tensor

INSTANCE_NORM_EPS = 1e-5


@dataclass
class SoftCorrespondence:
    """Non-slack block of a Sinkhorn output plus its slack row and column."""

    probs: Tensor
    slack_row: np.ndarray
    slack_col: np.ndarray

    @property
    def matrix(self):
        return self.probs.data

    @property
    def shape(self):
        return self.probs.shape


@dataclass
class HardCorrespondence:
    pairs: np.ndarray  # (k, 2) int64, sorted by source index
    shape: tuple

    def __len__(self):
        return len(self.pairs)

    def as_matrix(self):
        m = np.zeros(self.shape)
        if len(self.pairs):
            m[self.pairs[:, 0], self.pairs[:, 1]] = 1.0
        return m

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros((0, 2), dtype=np.int64), tuple(shape))

    @classmethod
    def from_pairs(cls, pairs, shape):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return cls(pairs[order], tuple(shape))


def instance_norm_exp(A):
    """``exp`` of the matrix standardised over all of its entries (no affine)."""
    A = ad.as_tensor(A)
    if A.size < 2:
        raise ValueError("instance_norm_exp needs at least 2 elements")
    centered = A - ad.mean(A)
    z = centered * ad.power(ad.var(A) + INSTANCE_NORM_EPS, -0.5)
    return ad.exp(z)


def append_slack(P, value=1.0):
    """Append one slack column and one slack row, all set to ``value``."""
    P = ad.as_tensor(P)
    n, m = P.shape
    dt = P.data.dtype
    with_col = ad.concat([P, Tensor(np.full((n, 1), value), dtype=dt)], axis=1)
    return ad.concat([with_col, Tensor(np.full((1, m + 1), value), dtype=dt)], axis=0)


def _normalize(block, axis):
    s = ad.clip(ad.sum(block, axis=axis, keepdims=True), EPS, np.inf)
    return block / s


def sinkhorn(S, iters=10, slack=True):
    """Alternating row / column normalisation of a positive matrix.

    With ``slack`` the last row and column of ``S`` are slack: only the other
    rows and columns are normalised (each against its full sum, slack entry
    included), so the slack sums stay unconstrained.
    """
    if iters < 1:
        raise ValueError("sinkhorn needs at least one iteration")
    S = ad.as_tensor(S)
    for _ in range(iters):
        if slack:
            S = ad.concat([_normalize(S[:-1], 1), S[-1:]], axis=0)
            S = ad.concat([_normalize(S[:, :-1], 0), S[:, -1:]], axis=1)
        else:
            S = _normalize(_normalize(S, 1), 0)
    if not slack:
        n, m = S.shape
        return SoftCorrespondence(S, np.zeros(m), np.zeros(n))
    return SoftCorrespondence(S[:-1, :-1], S.data[-1, :-1].copy(), S.data[:-1, -1].copy())


def constraint_residual(C):
    """Largest deviation of a non-slack row or column total (slack included) from 1."""
    P = C.matrix
    rows = P.sum(axis=1) + C.slack_col
    cols = P.sum(axis=0) + C.slack_row
    return float(max(np.abs(rows - 1).max(initial=0.0), np.abs(cols - 1).max(initial=0.0)))


# ---------------------------------------------------------------------------
# hard assignment


def _augment_path(start_row, target_col, banned_col, tight, col_of_row, row_of_col, frozen):
    """BFS for an alternating path in the tight graph from ``start_row`` to ``target_col``.

    Returns the predecessor map (column -> row that reaches it) or None.
    """
    via = {}
    queue = [start_row]
    seen = {banned_col}
    while queue:
        nxt = []
        for r in queue:
            for c in np.flatnonzero(tight[r]):
                c = int(c)
                if c in seen:
                    continue
                seen.add(c)
                via[c] = r
                if c == target_col:
                    return via
                r2 = int(row_of_col[c])
                if not frozen[r2]:
                    nxt.append(r2)
        queue = nxt
    return None


def _lexicographic_refine(cost, col_of_row, u, v, n_real_rows):
    """Move to the lexicographically smallest optimum among equal-cost assignments.

    An assignment is optimal iff it only uses edges that are tight under the
    optimal dual ``(u, v)``, so the search runs on that subgraph.
    """
    size = cost.shape[0]
    tol = 1e-12 * max(1.0, float(np.abs(cost).max())) * size
    tight = (cost - u[:, None] - v[None, :]) <= tol
    if tight.sum() == size:
        return col_of_row
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(size, dtype=np.int64)
    row_of_col[col_of_row] = np.arange(size)
    frozen = np.zeros(size, dtype=bool)
    for i in range(n_real_rows):
        cur = int(col_of_row[i])
        frozen[i] = True
        for j in np.flatnonzero(tight[i]):
            j = int(j)
            if j >= cur:
                break
            r0 = int(row_of_col[j])
            if frozen[r0]:
                continue
            via = _augment_path(r0, cur, j, tight, col_of_row, row_of_col, frozen)
            if via is None:
                continue
            c = cur
            while True:
                r = via[c]
                prev = int(col_of_row[r])
                col_of_row[r] = c
                row_of_col[c] = r
                if r == r0:
                    break
                c = prev
            col_of_row[i] = j
            row_of_col[j] = i
            break
    return col_of_row


def hungarian(score):
    """Maximum-total one-to-one assignment of size ``min(N, M)``.

    Among several optimal assignments the lexicographically smallest pair
    list is returned.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ValueError(f"hungarian expects a matrix, got shape {score.shape}")
    n, m = score.shape
    if n == 0 or m == 0:
        return HardCorrespondence.empty((n, m))
    if not np.all(np.isfinite(score)):
        raise ValueError("hungarian: scores must be finite")
    size = max(n, m)
    cost = np.zeros((size, size))
    # maximise by minimising a nonnegative shifted negation; dummy cells cost 0
    cost[:n, :m] = score.max() - score
    col_of_row, u, v = _kernels.lap_min(cost)
    col_of_row = _lexicographic_refine(cost, col_of_row, u, v, n)
    rows = np.arange(n)
    keep = col_of_row[:n] < m
    pairs = np.stack([rows[keep], col_of_row[:n][keep]], axis=1)
    return HardCorrespondence(pairs.astype(np.int64), (n, m))


def hard_from_soft(C, threshold=0.5):
    """Hungarian on the rows and columns whose soft mass exceeds ``threshold``."""
    P = C.matrix if isinstance(C, SoftCorrespondence) else np.asarray(C)
    rows = np.flatnonzero(P.sum(axis=1) > threshold)
    cols = np.flatnonzero(P.sum(axis=0) > threshold)
    if len(rows) == 0 or len(cols) == 0:
        return HardCorrespondence.empty(P.shape)
    sub = hungarian(P[np.ix_(rows, cols)])
    pairs = np.stack([rows[sub.pairs[:, 0]], cols[sub.pairs[:, 1]]], axis=1)
    return HardCorrespondence(pairs, P.shape)
