"""End-to-end comparison of sparsifiers on synthetic scenes.

Per seed: scene 0 holds the validation area (camera 1), scenes 1.. hold test
areas (camera 1); camera 0 of every scene is the training area. One scorer
per loss variant is trained on all scenes at once (coverage term applied
transductively to every map image) and compared against Random, ILP(map)
and ILP(query) at a sweep of point budgets.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import (EvalReport, SCORE_THRESHOLD, evaluate_recall, localize, recall_at,
                         sparsify_by_scores, sparsify_random)
from .graph import MapGraph, Origin, Split, query_overlay
from .kcover import Source, build_instance, generate_labels, greedy_order
from .scorer import ScorerConfig, ScorerModel, score_graph
from .training import LossConfig, TrainConfig, train
from .world import (SyntheticWorld, WorldConfig, build_map_graph, generate_world, overlay_matches,
                    query_observations, simulate_matches)

log = logging.getLogger(__name__)

VARIANTS = {"gnn": "both", "gnn_bce": "bce", "gnn_kc": "kc"}


@dataclass(frozen=True)
class SuiteConfig:
    n_scenes: int = 4
    seeds: tuple = (0, 1, 2)
    world: WorldConfig = WorldConfig()
    budgets: tuple = (100, 200, 300, 450, 650, 900)
    b: int = 30
    n_desired: int = 500
    score_threshold: float = SCORE_THRESHOLD
    epochs: int = 20
    lr: float = 1e-3
    K: float = 30
    lambda_l1: float = 0.01
    scorer: ScorerConfig = ScorerConfig()
    variants: tuple = ("gnn", "gnn_bce", "gnn_kc")
    val_budget: int = 300


@dataclass
class Scene:
    name: str
    world: SyntheticWorld
    graph: MapGraph  # training labels attached
    observations: list
    role: Split  # split of camera 1 in this scene

    def queries(self, camera: int):
        return [o for o in self.observations if o.pose.camera == camera]

    def area(self, split: Split) -> np.ndarray:
        return self.graph.area_points(split)


def scene_seed(seed: int, index: int) -> int:
    return 1000 * seed + index


def label_graph(world: SyntheticWorld, graph: MapGraph, observations, b: int, n_desired: int,
                solver: str = "auto") -> MapGraph:
    """Labels from K-Cover on the correct matches of camera-0 (training) queries."""
    train_q = [o for o in observations if o.pose.camera == 0]
    recs, imgs = overlay_matches(world, train_q, simulate_matches(world, graph, train_q), camera=0)
    labeled = generate_labels(query_overlay(graph, recs, imgs), b=b, n_desired=n_desired, solver=solver)
    # The scorer trains on the map alone; only the labels come from the overlay.
    return graph.copy(labels=labeled.labels)


def scene_world_config(cfg: SuiteConfig, index: int) -> WorldConfig:
    role = Split.VALID if index == 0 else Split.TEST
    return dataclasses.replace(cfg.world, camera1_split=int(role))


def make_scene(world: SyntheticWorld, graph: MapGraph, name: str) -> Scene:
    return Scene(name, world, graph, query_observations(world), Split(world.config.camera1_split))


def build_scene(cfg: SuiteConfig, seed: int, index: int) -> Scene:
    world = generate_world(scene_world_config(cfg, index), scene_seed(seed, index))
    graph = build_map_graph(world)
    scene = make_scene(world, graph, f"seed{seed}_scene{index}")
    scene.graph = label_graph(world, graph, scene.observations, cfg.b, cfg.n_desired)
    return scene


def recall_metric(scene: Scene, scores: np.ndarray, budget: int, threshold: float, seed: int = 0) -> float:
    """Recall at the tightest threshold on camera-1 queries after score-based sparsification."""
    area = scene.area(scene.role)
    sel = sparsify_by_scores(area, scores, min(budget, len(area)), threshold, seed)
    mask = np.zeros(scene.graph.n_points, dtype=bool)
    mask[sel] = True
    locs = [localize(scene.world, scene.graph, o, mask, seed) for o in scene.queries(1)]
    return float(recall_at(locs)[0])


def train_variant(cfg: SuiteConfig, scenes, variant: str, seed: int, out_dir=None):
    loss = LossConfig.from_name(VARIANTS[variant], K=cfg.K, lambda_l1=cfg.lambda_l1)
    model = ScorerModel.init(cfg.scorer, seed)
    val = [s for s in scenes if s.role == Split.VALID]

    def validate(m, epoch):
        return float(np.mean([recall_metric(s, score_graph(m, s.graph), cfg.val_budget,
                                            cfg.score_threshold, seed) for s in val]))

    res = train([s.graph for s in scenes], model, TrainConfig(epochs=cfg.epochs, lr=cfg.lr, loss=loss),
                seed=seed, validate=validate if val else None, out_dir=out_dir,
                progress=lambda row: log.info("%s seed %d epoch %d: %s", variant, seed, row["epoch"], row))
    return res


def baseline_selections(cfg: SuiteConfig, scene: Scene, seed: int) -> dict:
    g = scene.graph
    area = scene.area(Split.TEST)
    budgets = [b for b in cfg.budgets if b <= len(area)]
    out = {"random": {b: sparsify_random(area, b, seed) for b in budgets}}

    inst = build_instance(g, Source.MAP, cfg.b, max(budgets), point_ids=area,
                          image_ids=g.images_of(Origin.MAP, Split.TEST))
    order, _ = greedy_order(inst)
    out["ilp_map"] = {b: np.sort(inst.point_ids[order[:b]]) for b in budgets}

    test_q = scene.queries(1)
    recs, imgs = overlay_matches(scene.world, test_q, simulate_matches(scene.world, g, test_q), camera=1)
    gq = query_overlay(g, recs, imgs, allowed_splits=(Split.TEST,))
    qinst = build_instance(gq, Source.QUERY, cfg.b, max(budgets), point_ids=area,
                           image_ids=gq.images_of(Origin.QUERY))
    qorder, _ = greedy_order(qinst)
    out["ilp_query"] = {b: np.sort(qinst.point_ids[qorder[:b]]) for b in budgets}
    return out


@dataclass
class SuiteResult:
    report: EvalReport
    test_scenes: list
    train_logs: dict = field(default_factory=dict)  # (variant, seed) -> log rows


def run_suite(cfg: SuiteConfig = SuiteConfig(), out_dir=None) -> SuiteResult:
    report = EvalReport()
    test_names, logs = [], {}
    for seed in cfg.seeds:
        scenes = [build_scene(cfg, seed, i) for i in range(cfg.n_scenes)]
        tests = [s for s in scenes if s.role == Split.TEST]
        selections = {s.name: baseline_selections(cfg, s, seed) for s in tests}
        for variant in cfg.variants:
            res = train_variant(cfg, scenes, variant, seed)
            logs[(variant, seed)] = res.log
            for s in tests:
                scores = score_graph(res.best_model, s.graph)
                area = s.area(Split.TEST)
                selections[s.name][variant] = {
                    b: sparsify_by_scores(area, scores, b, cfg.score_threshold, seed)
                    for b in cfg.budgets if b <= len(area)}
        for s in tests:
            evaluate_recall(s.world, s.graph, s.queries(1), selections[s.name], scene=s.name,
                            seed=seed, report=report)
            test_names.append(s.name)
    return SuiteResult(report, test_names, logs)
