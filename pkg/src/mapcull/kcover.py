"""K-Cover point selection as an integer linear program.

    minimize    q^T x + lam * 1^T zeta
    subject to  A x + zeta >= b 1
                sum(x) = n_desired
                x binary, zeta nonnegative integer

Rows of A are images, columns are map points, A[l, i] = 1 when image l
observes point i. Weights follow q_i = max(c) - c_i for observation counts c.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .graph import GraphError, MapGraph, Origin, Split
from .lp import simplex

log = logging.getLogger(__name__)

EXACT_CAP = 2000
# "auto" switches to greedy above this many points: the dense simplex gets slow.
AUTO_EXACT_MAX = 60


class Source(str, Enum):
    MAP = "map"
    QUERY = "query"


class KCoverError(ValueError):
    pass


class InfeasibleBudgetError(KCoverError):
    pass


class SolverCapError(KCoverError):
    pass


def compute_weights(obs_counts) -> np.ndarray:
    c = np.asarray(obs_counts, dtype=np.int64).reshape(-1)
    if c.size == 0:
        raise KCoverError("cannot weight an empty point set")
    if np.any(c < 0):
        raise KCoverError("observation counts must be nonnegative")
    return c.max() - c


@dataclass
class KCoverInstance:
    rows: list  # per image: sorted column indices of visible points
    weights: np.ndarray
    b: int
    n_desired: int
    slack_penalty: float | None = None
    point_ids: np.ndarray | None = None  # graph point id of each column
    image_ids: np.ndarray | None = None  # graph image id of each row

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int64).reshape(-1)
        self.rows = [np.unique(np.asarray(r, dtype=np.int64)) for r in self.rows]
        if self.point_ids is None:
            self.point_ids = np.arange(len(self.weights))
        if self.image_ids is None:
            self.image_ids = np.arange(len(self.rows))
        if self.slack_penalty is None:
            top = int(self.weights.max()) if len(self.weights) else 0
            self.slack_penalty = float(100 * top + 1)
        if self.b < 0:
            raise KCoverError("b must be nonnegative")
        if np.any(self.weights < 0):
            raise KCoverError("weights must be nonnegative")
        for r in self.rows:
            if len(r) and (r[0] < 0 or r[-1] >= self.n_points):
                raise KCoverError("row references a column outside the instance")

    @property
    def n_points(self) -> int:
        return len(self.weights)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def uncoverable(self) -> np.ndarray:
        """Rows that cannot reach b even with every point selected."""
        return np.array([len(r) < self.b for r in self.rows], dtype=bool)

    def matrix(self) -> sp.csr_matrix:
        indptr = np.concatenate([[0], np.cumsum([len(r) for r in self.rows])]).astype(np.int64)
        indices = np.concatenate(self.rows) if self.rows else np.zeros(0, dtype=np.int64)
        data = np.ones(len(indices), dtype=np.int64)
        return sp.csr_matrix((data, indices, indptr), shape=(self.n_rows, self.n_points))

    def dense(self) -> np.ndarray:
        return self.matrix().toarray()

    def evaluate(self, x) -> "KCoverSolution":
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        cover = self.matrix() @ x
        zeta = np.maximum(0, self.b - cover).astype(np.int64)
        obj = float(self.weights @ x) + self.slack_penalty * float(zeta.sum())
        return KCoverSolution(x=x.astype(np.int8), zeta=zeta, objective=obj, optimal=False)

    def to_json(self) -> str:
        return json.dumps({
            "rows": [r.tolist() for r in self.rows], "weights": self.weights.tolist(),
            "b": self.b, "n_desired": self.n_desired, "slack_penalty": self.slack_penalty,
            "point_ids": np.asarray(self.point_ids).tolist(), "image_ids": np.asarray(self.image_ids).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "KCoverInstance":
        d = json.loads(text)
        return cls(rows=d["rows"], weights=d["weights"], b=d["b"], n_desired=d["n_desired"],
                   slack_penalty=d["slack_penalty"], point_ids=np.array(d["point_ids"], dtype=np.int64),
                   image_ids=np.array(d["image_ids"], dtype=np.int64))


@dataclass
class KCoverSolution:
    x: np.ndarray
    zeta: np.ndarray
    objective: float
    optimal: bool

    def selected(self, instance: KCoverInstance) -> np.ndarray:
        return np.asarray(instance.point_ids)[self.x.astype(bool)]

    def to_json(self) -> str:
        return json.dumps({"x": self.x.tolist(), "zeta": self.zeta.tolist(),
                           "objective": self.objective, "optimal": self.optimal})


def build_instance(graph: MapGraph, source, b: int, n_desired: int, slack_penalty=None,
                   point_ids=None, image_ids=None) -> KCoverInstance:
    """Assemble A and q from the MAP edges or from the QUERY overlay."""
    source = Source(source)
    origin = Origin.MAP if source is Source.MAP else Origin.QUERY
    if image_ids is None:
        image_ids = graph.images_of(origin)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if len(image_ids) == 0:
        raise KCoverError(f"graph has no {origin.name} images")
    if point_ids is None:
        point_ids = np.arange(graph.n_points)
    point_ids = np.asarray(point_ids, dtype=np.int64)
    column = np.full(graph.n_points, -1, dtype=np.int64)
    column[point_ids] = np.arange(len(point_ids))

    ptr, kpts = graph.image_keypoints
    rows = []
    for l in image_ids:
        w = kpts[ptr[l]:ptr[l + 1]]
        w = w[graph.kpt_origin[w] == origin]
        p = graph.kpt_point[w]
        cols = column[p[p >= 0]]
        rows.append(np.unique(cols[cols >= 0]))
    counts = graph.obs_count_map if source is Source.MAP else graph.obs_count_query
    return KCoverInstance(rows=rows, weights=compute_weights(counts[point_ids]), b=b,
                          n_desired=n_desired, slack_penalty=slack_penalty,
                          point_ids=point_ids, image_ids=image_ids)


# -- greedy ------------------------------------------------------------------

def greedy_order(instance: KCoverInstance) -> tuple[np.ndarray, int]:
    """Full greedy pick order and the length of its covering phase.

    Phase 1 repeatedly takes the point covering the most still-deficient rows
    (ties: lower weight, then lower index) until no row is deficient or no
    point helps. Phase 2 appends the remaining points by (weight, index).
    Every budget's greedy selection is a prefix of this order.
    """
    n = instance.n_points
    A = instance.matrix()
    Acsc = A.tocsc()
    q = instance.weights
    b = instance.b
    cover = np.zeros(instance.n_rows, dtype=np.int64)
    deficient = cover < b
    gain = np.asarray(A.T @ deficient.astype(np.int64)).reshape(-1)
    chosen = np.zeros(n, dtype=bool)
    order = []
    while len(order) < n:
        cand = np.flatnonzero((gain > 0) & ~chosen)
        if len(cand) == 0:
            break
        g = gain[cand]
        cand = cand[g == g.max()]
        j = int(cand[np.argmin(q[cand])])
        chosen[j] = True
        order.append(j)
        rows_j = Acsc.indices[Acsc.indptr[j]:Acsc.indptr[j + 1]]
        cover[rows_j] += 1
        done = rows_j[cover[rows_j] == b]
        for r in done:
            gain[A.indices[A.indptr[r]:A.indptr[r + 1]]] -= 1
    n_cover = len(order)
    rest = np.flatnonzero(~chosen)
    rest = rest[np.lexsort((rest, q[rest]))]
    return np.concatenate([np.asarray(order, dtype=np.int64), rest]), n_cover


def solve_greedy(instance: KCoverInstance, order=None) -> KCoverSolution:
    if instance.n_desired > instance.n_points:
        raise InfeasibleBudgetError(f"n_desired={instance.n_desired} exceeds N_p={instance.n_points}")
    if order is None:
        order, _ = greedy_order(instance)
    x = np.zeros(instance.n_points, dtype=np.int64)
    x[order[:instance.n_desired]] = 1
    return instance.evaluate(x)


# -- exact branch and bound ---------------------------------------------------

def _node_lp(A, q, lam, b, n_desired, fixed):
    """LP relaxation with fixed variables substituted out.

    Returns (bound, x_full) or (inf, None) if infeasible.
    """
    free = np.flatnonzero(fixed < 0)
    ones = np.flatnonzero(fixed == 1)
    m = A.shape[0]
    f = len(free)
    budget = n_desired - len(ones)
    if budget < 0 or budget > f:
        return np.inf, None
    rhs_cover = b - A[:, ones].sum(axis=1)
    const = float(q[ones].sum())
    # columns: x_free (f) | zeta (m) | surplus (m) | upper slack (f)
    n_var = 2 * f + 2 * m
    M = np.zeros((m + 1 + f, n_var))
    M[:m, :f] = A[:, free]
    M[:m, f:f + m] = np.eye(m)
    M[:m, f + m:f + 2 * m] = -np.eye(m)
    M[m, :f] = 1.0
    M[m + 1:, :f] = np.eye(f)
    M[m + 1:, f + 2 * m:] = np.eye(f)
    rhs = np.concatenate([rhs_cover, [budget], np.ones(f)])
    cost = np.concatenate([q[free].astype(float), np.full(m, lam), np.zeros(m + f)])
    res = simplex(cost, M, rhs)
    if res.status != "optimal":
        return np.inf, None
    x = fixed.astype(float).copy()
    x[free] = res.x[:f]
    return res.fun + const, x


def solve_exact(instance: KCoverInstance, cap: int = EXACT_CAP) -> KCoverSolution:
    """Proven-optimal solution by best-first branch and bound on the LP relaxation.

    Branches on the most fractional x (ties: lowest index); nodes with equal
    bounds are expanded in creation order.
    """
    n = instance.n_points
    if instance.n_desired > n:
        raise InfeasibleBudgetError(f"n_desired={instance.n_desired} exceeds N_p={n}")
    if n > cap:
        raise SolverCapError(f"{n} variables exceed the exact-solver cap {cap}; use solve_greedy")
    A = instance.dense().astype(float)
    q = instance.weights
    lam = instance.slack_penalty
    b = instance.b

    best = solve_greedy(instance)
    counter = itertools.count()
    heap = []
    fixed = np.full(n, -1, dtype=np.int64)
    bound, x = _node_lp(A, q, lam, b, instance.n_desired, fixed)
    if x is not None:
        heapq.heappush(heap, (bound, next(counter), fixed, x))
    while heap:
        bound, _, fixed, x = heapq.heappop(heap)
        if bound >= best.objective - 1e-9:
            continue
        frac = np.abs(x - np.round(x))
        frac[fixed >= 0] = 0.0
        if frac.max() <= 1e-9:
            cand = instance.evaluate(np.round(x).astype(np.int64))
            if cand.objective < best.objective:
                best = cand
            continue
        dist = np.where(fixed < 0, np.abs(x - 0.5), np.inf)
        j = int(np.argmin(dist))
        for val in (0, 1):
            child = fixed.copy()
            child[j] = val
            cb, cx = _node_lp(A, q, lam, b, instance.n_desired, child)
            if cx is not None and cb < best.objective - 1e-9:
                heapq.heappush(heap, (cb, next(counter), child, cx))
    best.optimal = True
    return best


def solve(instance: KCoverInstance, solver: str = "auto", cap: int = EXACT_CAP) -> KCoverSolution:
    if solver == "exact" or (solver == "auto" and instance.n_points <= min(cap, AUTO_EXACT_MAX)):
        return solve_exact(instance, cap=cap)
    if solver in ("greedy", "auto"):
        return solve_greedy(instance)
    raise KCoverError(f"unknown solver {solver!r}")


def brute_force(instance: KCoverInstance) -> KCoverSolution:
    """Exhaustive enumeration over all C(N_p, n_desired) selections (tiny instances only)."""
    n = instance.n_points
    best = None
    for combo in itertools.combinations(range(n), instance.n_desired):
        x = np.zeros(n, dtype=np.int64)
        x[list(combo)] = 1
        cand = instance.evaluate(x)
        if best is None or cand.objective < best.objective:
            best = cand
    best.optimal = True
    return best


def generate_labels(graph: MapGraph, b: int = 30, n_desired: int = 500, solver: str = "auto",
                    cap: int = EXACT_CAP) -> MapGraph:
    """Label training-area points by solving K-Cover on the query overlay.

    Only points matched by at least one training query are candidates; all
    other training-area points get label 0. Returns a new graph.
    """
    if len(graph.images_of(Origin.QUERY)) == 0:
        raise KCoverError("label generation needs a query overlay")
    train_pts = graph.area_points(Split.TRAIN)
    matched = train_pts[graph.obs_count_query[train_pts] > 0]
    labels = np.full(graph.n_points, -1, dtype=np.int8)
    labels[train_pts] = 0
    if len(matched):
        n_eff = min(n_desired, len(matched))
        if n_eff < n_desired:
            log.warning("only %d matched training points; labeling all of them", len(matched))
        inst = build_instance(graph, Source.QUERY, b, n_eff, point_ids=matched,
                              image_ids=graph.images_of(Origin.QUERY, Split.TRAIN))
        sol = solve(inst, solver=solver, cap=cap)
        labels[sol.selected(inst)] = 1
    return graph.copy(labels=labels)
