"""Discrete optimal transport between current and stored feature sets.

``ot_exact`` is a transportation simplex (MODI potentials, Bland pivoting)
for arbitrary marginals.  ``ot_loss`` uses squared Euclidean ground cost and
uniform weights; with equal point counts the optimal plan is a scaled
permutation (Birkhoff), which is found with an assignment solver.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, DimensionError, NumericError


@dataclass
class DiscreteDist:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.shape[0] < 1 or self.points.shape[0] != len(self.weights):
            raise ContractError("need at least one point and one weight per point")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, points: np.ndarray) -> "DiscreteDist":
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))


@dataclass
class TransportPlan:
    W: np.ndarray
    cost: float
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    iterations: int = 0


def cost_matrix(E: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances ``||e_i - g_j||^2``."""
    if E.ndim != 2 or G.ndim != 2 or E.shape[1] != G.shape[1]:
        raise DimensionError(f"cannot pair {E.shape} with {G.shape}")
    d = (E * E).sum(1)[:, None] + (G * G).sum(1)[None, :] - 2.0 * E @ G.T
    return np.maximum(d, 0.0)


def _northwest_corner(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    n, m = len(a), len(b)
    x = np.zeros((n, m))
    ra, rb = a.copy(), b.copy()
    basis = []
    i = j = 0
    while True:
        q = min(ra[i], rb[j])
        x[i, j] = q
        ra[i] -= q
        rb[j] -= q
        basis.append((i, j))
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1 or ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return x, basis


def _potentials(C: np.ndarray, basis: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    n, m = C.shape
    adj_r: list[list[int]] = [[] for _ in range(n)]
    adj_c: list[list[int]] = [[] for _ in range(m)]
    for i, j in basis:
        adj_r[i].append(j)
        adj_c[j].append(i)
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in adj_r[k]:
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in adj_c[k]:
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _tree_path(basis: list[tuple[int, int]], n: int, m: int, start_col: int, end_row: int
               ) -> list[tuple[int, int]]:
    """Basic cells on the tree path from column ``start_col`` to row ``end_row``."""
    adj: dict[tuple[str, int], list[tuple[tuple[str, int], tuple[int, int]]]] = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append((("c", j), (i, j)))
        adj.setdefault(("c", j), []).append((("r", i), (i, j)))
    start, goal = ("c", start_col), ("r", end_row)
    prev: dict = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt, cell in adj.get(node, []):
            if nxt not in prev:
                prev[nxt] = (node, cell)
                queue.append(nxt)
    path = []
    node = goal
    while prev[node] is not None:
        node, cell = prev[node]
        path.append(cell)
    path.reverse()
    return path


def transport_simplex(a: np.ndarray, b: np.ndarray, C: np.ndarray, tol: float = 1e-12,
                      max_iter: int = 100_000) -> tuple[np.ndarray, int]:
    """Optimal plan of the balanced transportation problem."""
    n, m = C.shape
    x, basis = _northwest_corner(a, b)
    in_basis = np.zeros((n, m), dtype=bool)
    for cell in basis:
        in_basis[cell] = True
    scale = max(1.0, float(np.abs(C).max()))
    for it in range(max_iter):
        u, v = _potentials(C, basis)
        reduced = C - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        neg = np.flatnonzero(reduced.ravel() < -tol * scale)
        if neg.size == 0:
            return x, it
        i, j = divmod(int(neg[0]), m)  # Bland: lowest index enters
        # cycle: (i,j)+, then path from column j back to row i alternates -, +, ...
        path = _tree_path(basis, n, m, j, i)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(x[c] for c in minus)
        leaving = min(c for c in minus if x[c] <= theta + tol)
        x[i, j] += theta
        for c in minus:
            x[c] -= theta
        for c in plus:
            x[c] += theta
        x[leaving] = 0.0
        basis.remove(leaving)
        in_basis[leaving] = False
        basis.append((i, j))
        in_basis[i, j] = True
    raise NumericError("transportation simplex did not converge")


def _check_marginals(mu_w: np.ndarray, nu_w: np.ndarray, cost: np.ndarray) -> None:
    if cost.shape != (len(mu_w), len(nu_w)):
        raise DimensionError(f"cost shape {cost.shape} != ({len(mu_w)}, {len(nu_w)})")
    if not np.all(np.isfinite(cost)):
        raise NumericError("non-finite cost entries")
    if abs(mu_w.sum() - nu_w.sum()) > 1e-7:
        raise ContractError("marginals carry different total mass")


def ot_exact(mu: DiscreteDist, nu: DiscreteDist, cost: np.ndarray | None = None) -> TransportPlan:
    """Globally optimal transport plan between two discrete distributions."""
    cost = cost_matrix(mu.points, nu.points) if cost is None else np.asarray(cost, dtype=np.float64)
    return ot_exact_weights(mu.weights, nu.weights, cost)


def ot_exact_weights(a: np.ndarray, b: np.ndarray, cost: np.ndarray) -> TransportPlan:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_marginals(a, b, cost)
    b = b * (a.sum() / b.sum())
    W, iters = transport_simplex(a, b, cost)
    W = np.maximum(W, 0.0)
    return TransportPlan(W, float((W * cost).sum()), W.sum(1), W.sum(0), iters)


def ot_sinkhorn(a: np.ndarray, b: np.ndarray, cost: np.ndarray, eps: float = 1e-2,
                n_iter: int = 2000, tol: float = 1e-10) -> TransportPlan:
    """Entropic plan via log-domain Sinkhorn; approaches ``ot_exact`` as eps -> 0."""
    from scipy.special import logsumexp

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_marginals(a, b, cost)
    la, lb = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    for it in range(n_iter):
        f = eps * (la - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (lb - logsumexp((f[:, None] - cost) / eps, axis=0))
        W = np.exp((f[:, None] + g[None, :] - cost) / eps)
        if np.abs(W.sum(1) - a).max() < tol:
            break
    return TransportPlan(W, float((W * cost).sum()), W.sum(1), W.sum(0), it + 1)


def uniform_plan(E: np.ndarray, G: np.ndarray, cost: np.ndarray | None = None) -> TransportPlan:
    """Optimal plan between uniform distributions on the rows of E and G."""
    cost = cost_matrix(E, G) if cost is None else cost
    n, m = cost.shape
    if n == m:
        rows, cols = linear_sum_assignment(cost)
        W = np.zeros((n, m))
        W[rows, cols] = 1.0 / n
        return TransportPlan(W, float((W * cost).sum()), W.sum(1), W.sum(0))
    return ot_exact_weights(np.full(n, 1.0 / n), np.full(m, 1.0 / m), cost)


def ot_loss(current_feats: np.ndarray, snapshot) -> tuple[float, np.ndarray]:
    """Transport cost between current features and their stored snapshot.

    ``snapshot`` is a :class:`~orderlab.taskstream.FeatureSnapshot` or a plain
    array.  The gradient holds the optimal plan fixed:
    ``dL/de_i = sum_j 2 W_ij (e_i - g_j)``.
    """
    G = getattr(snapshot, "feats", snapshot)
    if current_feats.shape[0] != G.shape[0]:
        raise ContractError("current and stored feature sets must have equal row counts")
    if current_feats.shape[0] == 0:
        return 0.0, np.zeros_like(current_feats)
    plan = uniform_plan(current_feats, G)
    W = plan.W
    grad = 2.0 * (W.sum(1)[:, None] * current_feats - W @ G)
    return plan.cost, grad
