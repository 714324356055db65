import dataclasses

import numpy as np
import pytest

from conftest import pnp_scene
from mapcull.evaluation import (BudgetError, EvalReport, aggregate_curves, common_grid, evaluate_recall,
                                interpolate_curve, kept_keypoints, match_count_histogram, sparsify_by_scores,
                                sparsify_random)
from mapcull.graph import Split
from mapcull.pnp import pose_error, solve_pnp
from mapcull.world import (PointClass, WorldConfig, WorldConfigError, build_map_graph, generate_world,
                           load_world, query_observations, save_world, simulate_matches)

TINY = WorldConfig(n_points=800, images_per_session=8, query_images_per_session=4, road_length=60.0)


@pytest.fixture(scope="module")
def tiny():
    world = generate_world(TINY, 3)
    return world, build_map_graph(world), query_observations(world)


def test_world_is_seeded():
    a, b = generate_world(TINY, 5), generate_world(TINY, 5)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.canonical, b.canonical)
    assert not np.array_equal(a.positions, generate_world(TINY, 6).positions)


def test_seasonal_fraction():
    w = generate_world(WorldConfig(), 0)
    invalid = ~w.query_valid.all(axis=1)
    assert abs(invalid.mean() - 0.4) <= 0.03
    assert np.all(w.classes[invalid] == PointClass.SEASONAL)
    w0 = generate_world(dataclasses.replace(TINY, seasonal_fraction=0.0), 0)
    assert w0.query_valid.all()


def test_world_config_checks():
    with pytest.raises(WorldConfigError):
        WorldConfig(seasonal_fraction=0.9, repetitive_fraction=0.2)
    with pytest.raises(WorldConfigError):
        WorldConfig.from_dict({"n_points": 10, "colour": 1})
    assert WorldConfig.from_dict(TINY.to_dict()) == TINY


def test_world_save_load(tmp_path, tiny):
    world = tiny[0]
    save_world(world, tmp_path / "w.npz")
    back = load_world(tmp_path / "w.npz")
    assert back.config == world.config and back.seed == world.seed
    assert np.array_equal(back.positions, world.positions)
    assert np.array_equal(back.query_poses[3].rotation, world.query_poses[3].rotation)


def test_map_graph_counts(tiny):
    world, g, _ = tiny
    g.validate()
    per_point = np.bincount(g.kpt_point[g.kpt_point >= 0], minlength=g.n_points)
    assert np.array_equal(g.obs_count_map, per_point)
    # one keypoint per (image, point) pair
    pairs = g.kpt_image.astype(np.int64) * g.n_points + g.kpt_point
    assert len(np.unique(pairs)) == g.n_keypoints
    splits = {im.camera_id: im.split for im in g.images}
    assert splits == {0: Split.TRAIN, 1: Split.TEST}


def test_point_behind_cameras_is_unobserved():
    world = generate_world(TINY, 1)
    pos = world.positions.copy()
    pos[0] = [-500.0, 0.0, 1.0]
    g = build_map_graph(dataclasses.replace(world, positions=pos))
    assert g.obs_count_map[0] == 0


def test_no_selection_no_matches(tiny):
    world, g, obs = tiny
    ms = simulate_matches(world, g, obs[:3], np.zeros(g.n_points, dtype=bool))
    assert all(len(m) == 0 for m in ms)


def test_noise_free_stable_world_matches_are_correct():
    cfg = dataclasses.replace(TINY, seasonal_fraction=0.0, repetitive_fraction=0.0, pixel_noise=0.0,
                              descriptor_noise=0.0)
    world = generate_world(cfg, 2)
    g = build_map_graph(world)
    ms = simulate_matches(world, g, query_observations(world)[:6])
    assert sum(len(m) for m in ms) > 0
    assert all(m.correct.all() for m in ms)


def test_stable_oracle_beats_random_on_correct_matches(tiny):
    world, g, obs = tiny
    area = g.area_points(Split.TEST)
    stable = area[world.classes[area] == PointClass.STABLE]
    n = len(stable) // 2
    q = [o for o in obs if o.pose.camera == 1]

    def correct(sel):
        mask = np.zeros(g.n_points, dtype=bool)
        mask[sel] = True
        return sum(int(m.correct.sum()) for m in simulate_matches(world, g, q, mask))

    assert correct(sparsify_random(stable, n, 0)) > correct(sparsify_random(area, n, 0))


def test_pnp_noise_free_exact():
    for seed in range(5):
        pix, X, K, R, t = pnp_scene(seed, n=20)
        res = solve_pnp(pix, X, K, seed=seed)
        dp, dr = pose_error(res.rotation, res.translation, R, t)
        assert res.success and dp < 1e-6 and dr < 1e-6


def test_pnp_needs_six_matches():
    pix, X, K, _, _ = pnp_scene(0, n=5)
    assert not solve_pnp(pix, X, K).success


def test_pnp_robust_to_outliers():
    ok = 0
    for seed in range(30):
        pix, X, K, R, t = pnp_scene(seed, outlier_frac=0.3, noise_px=1.0)
        res = solve_pnp(pix, X, K, seed=seed)
        if res.success:
            dp, dr = pose_error(res.rotation, res.translation, R, t)
            ok += dp < 0.25 and dr < 2.0
    assert ok >= 28


def test_sparsify_examples():
    c = np.arange(3)
    s = np.array([0.9, 0.05, 0.6])
    assert sparsify_by_scores(c, s, 2).tolist() == [0, 2]
    assert sparsify_by_scores(c, s, 3).tolist() == [0, 1, 2]
    assert sparsify_random(c, 3).tolist() == [0, 1, 2]
    assert np.array_equal(sparsify_random(np.arange(50), 10, 4), sparsify_random(np.arange(50), 10, 4))
    with pytest.raises(BudgetError):
        sparsify_random(c, 4)


def test_sparsify_budget_exact_and_above_threshold():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(5, 200))
        cand = np.sort(rng.choice(1000, n, replace=False))
        scores = rng.random(1000)
        for budget in sorted(set(rng.integers(0, n + 1, 6).tolist())):
            sel = sparsify_by_scores(cand, scores, budget, 0.1, trial)
            assert len(sel) == budget == len(np.unique(sel)) and np.isin(sel, cand).all()
            if budget <= (scores[cand] > 0.1).sum():
                assert np.all(scores[sel] > 0.1)
            assert len(sparsify_random(cand, budget, trial)) == budget


def test_sparsify_random_uniform():
    n, k, draws = 20, 5, 10_000
    counts = np.zeros(n)
    for s in range(draws):
        counts[sparsify_random(np.arange(n), k, s)] += 1
    p = k / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma)


def test_histogram():
    frac, edges = match_count_histogram([7, 7, 7, 7])
    assert (frac > 0).sum() == 1 and frac.max() == 1.0
    frac, _ = match_count_histogram(np.random.default_rng(0).integers(0, 100, 57), bins=8)
    assert abs(frac.sum() - 1) < 1e-12


def test_interpolation_and_aggregation():
    grid = np.array([100.0, 200.0])
    r, clamped = interpolate_curve([100, 300], [[0.2, 0.3, 0.4], [0.6, 0.7, 0.8]], grid)
    assert np.allclose(r[:, 0], [0.2, 0.4]) and not clamped.any()
    one = aggregate_curves([([100, 300], [[0.2] * 3, [0.6] * 3], 10)], grid)
    assert np.allclose(one.recall, interpolate_curve([100, 300], [[0.2] * 3, [0.6] * 3], grid)[0])
    c = aggregate_curves([([100], [[0.2] * 3], 100), ([100], [[0.6] * 3], 300)], [100.0])
    assert c.recall[0, 0] == pytest.approx(0.5)
    c = aggregate_curves([([100], [[0.2] * 3], 50), ([100], [[0.6] * 3], 50)], [100.0])
    assert c.recall[0, 0] == pytest.approx(0.4)
    _, clamped = interpolate_curve([100, 300], [[0.1] * 3, [0.2] * 3], [50.0, 400.0])
    assert clamped.all()


def test_evaluate_recall_bounds(tiny):
    world, g, obs = tiny
    q = [o for o in obs if o.pose.camera == 1][:8]
    everything = np.arange(g.n_points)
    rep = evaluate_recall(world, g, q, {"all": {g.n_points: everything}, "none": {0: everything[:0]}},
                          scene="s", seed=0)
    full = next(r for r in rep.rows if r["method"] == "all")
    none = next(r for r in rep.rows if r["method"] == "none")
    assert none["recall"] == [0.0, 0.0, 0.0] and none["kpts"] == 0
    assert full["kpts"] == g.n_keypoints and full["recall"][0] > 0
    for r in rep.rows:
        assert r["recall"][0] <= r["recall"][1] <= r["recall"][2]
    back = EvalReport.from_csv(rep.to_csv())
    assert back.to_csv() == rep.to_csv()
    assert kept_keypoints(g, everything) == g.n_keypoints


def test_common_grid_inside_every_range():
    rep = EvalReport()
    for m, ks in (("a", [100, 500]), ("b", [200, 900])):
        for b, k in enumerate(ks):
            rep.add(m, "s", b, b, k, [0.1, 0.2, 0.3], 4, [1, 2])
    grid = common_grid(rep, ["a", "b"], ["s"], n=3)
    assert grid.tolist() == [200.0, 350.0, 500.0]
