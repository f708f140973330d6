"""Hungarian assignment and video-query initialization from frame queries.

Frame queries of adjacent frames are put into a consistent instance order
by minimum-cost matching on cosine distance, then fused into one query per
slot with softmax weights over frames.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


@dataclass
class Assignment:
    permutation: np.ndarray   # row i -> column permutation[i]
    total_cost: float


def _check_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    return c


def _shortest_augmenting_path(c: np.ndarray):
    """O(n^3) primal-dual assignment; returns row->col matching and potentials."""
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)      # p[j]: 1-based row owning column j, 0 = free
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.intp)
    perm[p[1:] - 1] = np.arange(n)
    return perm, u[1:], v[1:]


def _lexicographic(c: np.ndarray, perm: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest-column-first optimum among all optimal assignments.

    Every optimal assignment uses only zero-reduced-cost edges of an optimal
    dual, so it suffices to find the lexicographically smallest perfect
    matching of that equality graph, starting from a known one.
    """
    n = c.shape[0]
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    tight = (c - u[:, None] - v[None, :]) <= tol
    if tight.sum() == n:
        return perm
    perm = perm.copy()
    owner = np.empty(n, dtype=np.intp)
    owner[perm] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i, : perm[i]]):
            # can row i take column j while rows > i still cover the rest?
            if owner[j] < i:
                continue
            target = perm[i]
            start = owner[j]
            parent = {start: None}
            queue = deque([start])
            found = None
            while queue and found is None:
                r = queue.popleft()
                for col in np.flatnonzero(tight[r]):
                    if col == j or owner[col] < i:
                        continue
                    if col == target:
                        found = (r, col)
                        break
                    nxt = owner[col]
                    if nxt not in parent and nxt != i:
                        parent[nxt] = (r, col)
                        queue.append(nxt)
            if found is None:
                continue
            # parent[row] = (taker, col): taker moves onto row's old column col
            r, col = found
            while True:
                perm[r] = col
                owner[col] = r
                step = parent[r]
                if step is None:
                    break
                r, col = step
            perm[i] = j
            owner[j] = i
            break
    return perm


def hungarian(cost) -> Assignment:
    """Exact minimum-cost perfect assignment of a square cost matrix.

    Ties are broken toward the lexicographically smallest permutation.
    """
    c = _check_cost(cost)
    n = c.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.intp), 0.0)
    perm, u, v = _shortest_augmenting_path(c)
    best = _total(c, perm)
    lex = _lexicographic(c, perm, u, v)
    if _total(c, lex) <= best:
        perm = lex
    return Assignment(perm, _total(c, perm))


def _total(c: np.ndarray, perm: np.ndarray) -> float:
    total = 0.0
    for i, j in enumerate(perm):
        total += c[i, j]
    return total


def rectangular_assignment(cost) -> list[tuple[int, int]]:
    """Match every column of an (n_rows >= n_cols) cost matrix to a distinct row.

    Pads with zero-cost dummy columns; returns (row, col) pairs for real columns.
    """
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if m > n:
        raise ValueError(f"cannot assign {m} columns to {n} rows")
    if m == 0:
        return []
    square = np.zeros((n, n))
    square[:, :m] = c
    perm = hungarian(square).permutation
    return [(int(i), int(perm[i])) for i in range(n) if perm[i] < m]


# ------------------------------------------------------------ reorder/aggregate


def cosine_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 - cosine similarity between rows of ``a`` and ``b``; zero rows have cosine 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    sim = np.divide(a @ b.T, denom, out=np.zeros(denom.shape), where=denom > 0)
    return 1.0 - sim


@dataclass
class ReorderedFrameQueries:
    queries: Tensor                 # (T, N, C)
    permutations: list[np.ndarray]  # per frame, slot i takes row permutations[t][i]
    assignments: list[Assignment]


def reorder(frame_queries, chain: bool = True) -> ReorderedFrameQueries:
    """Put every frame's queries into frame 1's instance order.

    With ``chain`` (default) frame t is matched against the already
    rearranged frame t-1; otherwise against the raw frame t-1.
    Indexing is recorded on the tape; the matching itself is not differentiated.
    """
    q = frame_queries if isinstance(frame_queries, Tensor) else T.tensor(frame_queries)
    t_len, n, c = q.shape
    raw = q.data
    perms = [np.arange(n)]
    assignments = [Assignment(np.arange(n), 0.0)]
    prev = raw[0]
    for t in range(1, t_len):
        a = hungarian(cosine_cost(prev, raw[t]))
        perms.append(a.permutation)
        assignments.append(a)
        prev = raw[t][a.permutation] if chain else raw[t]
    index = np.concatenate([t * n + p for t, p in enumerate(perms)])
    flat = T.take(q.reshape(t_len * n, c), index, axis=0)
    return ReorderedFrameQueries(flat.reshape(t_len, n, c), perms, assignments)


def aggregate(reordered: Tensor, score: nn.Linear, return_weights: bool = False):
    """Per-slot softmax-over-frames weighted sum of rearranged frame queries."""
    logits = score(reordered)                 # (T, N, 1)
    weights = T.softmax(logits, axis=0)
    video = (weights * reordered).sum(axis=0)
    if return_weights:
        return video, weights.reshape(weights.shape[:2])
    return video


class VideoQueryInitializer(nn.Module):
    def __init__(self, rng: np.random.Generator, dim: int, chain: bool = True):
        self.score = nn.Linear(rng, dim, 1)
        self.chain = chain

    def __call__(self, frame_queries: Tensor):
        reordered = reorder(frame_queries, chain=self.chain)
        return aggregate(reordered.queries, self.score), reordered
