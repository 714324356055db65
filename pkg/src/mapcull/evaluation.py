"""Sparsifiers, localization recall, curve aggregation and match histograms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .graph import MapGraph
from .pnp import pose_error, solve_pnp
from .world import QueryObservation, SyntheticWorld, match_query

THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
SCORE_THRESHOLD = 0.1


class BudgetError(ValueError):
    pass


def _check_budget(n_desired: int, n_points: int):
    if n_desired < 0 or n_desired > n_points:
        raise BudgetError(f"budget {n_desired} outside [0, {n_points}]")


def sparsify_random(candidates, n_desired: int, seed: int = 0) -> np.ndarray:
    """Uniform subset of ``candidates`` (ids) without replacement, sorted."""
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_budget(n_desired, len(candidates))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=n_desired, replace=False))


def sparsify_by_scores(candidates, scores, n_desired: int, threshold: float = SCORE_THRESHOLD,
                       seed: int = 0) -> np.ndarray:
    """Random points with score above ``threshold``, topped up at random from the rest.

    ``scores`` is indexed by point id.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_budget(n_desired, len(candidates))
    rng = np.random.default_rng(seed)
    s = np.asarray(scores)[candidates]
    above, below = candidates[s > threshold], candidates[~(s > threshold)]
    if len(above) >= n_desired:
        return np.sort(rng.choice(above, size=n_desired, replace=False))
    fill = rng.choice(below, size=n_desired - len(above), replace=False)
    return np.sort(np.concatenate([above, fill]))


def kept_keypoints(graph: MapGraph, selection) -> int:
    """#kpts: MAP keypoints whose 3D point is selected."""
    return int(graph.map_obs[np.asarray(selection, dtype=np.int64)].sum())


@dataclass
class Localization:
    n_matches: int
    n_correct: int
    success: bool
    position_error: float
    rotation_error: float


def localize(world: SyntheticWorld, graph: MapGraph, obs: QueryObservation, selected_mask,
             seed: int = 0) -> Localization:
    m = match_query(world, graph, obs, selected_mask)
    K = world.config.intrinsics.matrix
    res = solve_pnp(m.pixels, graph.positions[m.points], K, seed=seed ^ obs.index,
                    threshold=world.config.inlier_px)
    if not res.success:
        return Localization(len(m), int(m.correct.sum()), False, np.inf, np.inf)
    dp, dr = pose_error(res.rotation, res.translation, obs.pose.rotation, obs.pose.translation)
    return Localization(len(m), int(m.correct.sum()), True, dp, dr)


def recall_at(locs, thresholds=THRESHOLDS) -> np.ndarray:
    if not locs:
        return np.zeros(len(thresholds))
    dp = np.array([l.position_error for l in locs])
    dr = np.array([l.rotation_error for l in locs])
    return np.array([np.mean((dp < t) & (dr < r)) for t, r in thresholds])


@dataclass
class EvalReport:
    """Rows of (method, scene, budget, n_points, kpts, recall per threshold, n_images)."""
    rows: list = field(default_factory=list)
    match_counts: dict = field(default_factory=dict)  # (method, scene, budget) -> counts

    def add(self, method, scene, budget, n_points, kpts, recall, n_images, counts):
        self.rows.append({"method": method, "scene": scene, "budget": int(budget),
                          "n_points": int(n_points), "kpts": int(kpts),
                          "recall": [float(r) for r in recall], "n_images": int(n_images)})
        self.match_counts[(method, scene, int(budget))] = np.asarray(counts, dtype=np.int64)

    def methods(self):
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def curve(self, method, scene):
        rows = sorted((r for r in self.rows if r["method"] == method and r["scene"] == scene),
                      key=lambda r: r["budget"])
        return (np.array([r["kpts"] for r in rows], dtype=float),
                np.array([r["recall"] for r in rows]).reshape(-1, len(THRESHOLDS)),
                rows[0]["n_images"] if rows else 0)

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(self.rows + other.rows, {**self.match_counts, **other.match_counts})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "scene", "budget", "n_points", "kpts",
                    "recall_0.25m_2deg", "recall_0.5m_5deg", "recall_5m_10deg", "n_images"])
        for r in self.rows:
            w.writerow([r["method"], r["scene"], r["budget"], r["n_points"], r["kpts"],
                        *(f"{x:.6f}" for x in r["recall"]), r["n_images"]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rep = cls()
        for r in csv.DictReader(io.StringIO(text)):
            rec = [float(r[k]) for k in ("recall_0.25m_2deg", "recall_0.5m_5deg", "recall_5m_10deg")]
            rep.rows.append({"method": r["method"], "scene": r["scene"], "budget": int(r["budget"]),
                             "n_points": int(r["n_points"]), "kpts": int(r["kpts"]),
                             "recall": rec, "n_images": int(r["n_images"])})
        return rep


def evaluate_recall(world: SyntheticWorld, graph: MapGraph, observations, selections: dict,
                    scene: str = "scene", seed: int = 0, report: EvalReport | None = None) -> EvalReport:
    """``selections`` maps method -> {budget: point ids}; queries are all given observations."""
    report = report if report is not None else EvalReport()
    for method, by_budget in selections.items():
        for budget, sel in sorted(by_budget.items()):
            mask = np.zeros(graph.n_points, dtype=bool)
            mask[np.asarray(sel, dtype=np.int64)] = True
            locs = [localize(world, graph, o, mask, seed) for o in observations]
            report.add(method, scene, budget, len(sel), kept_keypoints(graph, sel), recall_at(locs),
                       len(observations), [l.n_matches for l in locs])
    return report


# -- aggregation -----------------------------------------------------------

@dataclass
class Curve:
    grid: np.ndarray
    recall: np.ndarray  # (len(grid), n_thresholds)
    clamped: np.ndarray  # (len(grid),) True where some scene was clamped


def interpolate_curve(kpts, recall, grid):
    """Linear interpolation of recall over #kpts; outside the swept range the end value is held."""
    kpts = np.asarray(kpts, dtype=float)
    recall = np.asarray(recall, dtype=float).reshape(len(kpts), -1)
    order = np.argsort(kpts, kind="stable")
    kpts, recall = kpts[order], recall[order]
    grid = np.asarray(grid, dtype=float)
    out = np.stack([np.interp(grid, kpts, recall[:, j]) for j in range(recall.shape[1])], axis=1)
    clamped = (grid < kpts[0]) | (grid > kpts[-1])
    return out, clamped


def aggregate_curves(curves, grid) -> Curve:
    """Image-count-weighted mean of per-scene curves; ``curves`` is [(kpts, recall, n_images)]."""
    if not curves:
        raise ValueError("need at least one scene")
    grid = np.asarray(grid, dtype=float)
    total = np.zeros((len(grid), np.asarray(curves[0][1]).reshape(len(curves[0][0]), -1).shape[1]))
    weight = 0.0
    clamped = np.zeros(len(grid), dtype=bool)
    for kpts, recall, n_images in curves:
        r, c = interpolate_curve(kpts, recall, grid)
        total += n_images * r
        weight += n_images
        clamped |= c
    return Curve(grid, total / weight, clamped)


def common_grid(report: EvalReport, methods, scenes, n: int = 5) -> np.ndarray:
    """Evenly spaced #kpts values inside every (method, scene) swept range."""
    lo, hi = 0.0, np.inf
    for m in methods:
        for s in scenes:
            k, _, _ = report.curve(m, s)
            lo, hi = max(lo, k.min()), min(hi, k.max())
    if not lo < hi:
        raise ValueError("methods share no common #kpts range")
    return np.linspace(lo, hi, n)


def averaged(report: EvalReport, method, scenes, grid) -> Curve:
    return aggregate_curves([report.curve(method, s) for s in scenes], grid)


def match_count_histogram(counts, bins=10, range_=None):
    """Per-bin fractions of query images (they sum to 1) and the bin edges."""
    counts = np.asarray(counts, dtype=float)
    if len(counts) == 0:
        return np.zeros(bins if np.ndim(bins) == 0 else len(bins) - 1), np.asarray(bins, dtype=float)
    if range_ is None and np.ndim(bins) == 0 and counts.min() == counts.max():
        range_ = (counts.min() - 0.5, counts.max() + 0.5)
    hist, edges = np.histogram(counts, bins=bins, range=range_)
    return hist / hist.sum(), edges
