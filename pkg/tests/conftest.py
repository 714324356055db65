import numpy as np
import pytest

from mapcull.graph import ImageNode, Intrinsics, MapGraph, Origin, Split, build_knn_edges

INTR = Intrinsics(100.0, 100.0, 64.0, 48.0, 128, 96)


def random_graph(n_points=40, n_images=6, per_image=12, dim=8, k=4, seed=0,
                 splits=None) -> MapGraph:
    """Small random map: each image observes ``per_image`` distinct points."""
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n_points, 3)) * 3.0
    images, desc, pix, ev, ec = [], [], [], [], []
    w = 0
    for l in range(n_images):
        split = Split.TRAIN if splits is None else splits[l]
        images.append(ImageNode(l, np.eye(3), np.zeros(3), INTR, session=l % 2,
                                camera_id=0, origin=Origin.MAP, split=split))
        for p in rng.choice(n_points, size=min(per_image, n_points), replace=False):
            desc.append(rng.normal(size=dim))
            pix.append(rng.uniform([0, 0], [127, 95]))
            ev.append((w, p))
            ec.append((w, l))
            w += 1
    ev = np.array(ev)
    obs = np.bincount(ev[:, 1], minlength=n_points)
    return MapGraph(
        positions=pos, descriptors=np.array(desc), pixels=np.array(pix),
        kpt_origin=np.zeros(w), images=images, edges_v=ev,
        edges_n=build_knn_edges(pos, k), edges_c=np.array(ec),
        obs_count_map=obs, k=k, seed=seed,
    )


@pytest.fixture
def small_graph():
    return random_graph()


def point_graph(descs, edges_n, k=4) -> MapGraph:
    """One image observing every point; ``descs[i]`` lists point i's keypoint descriptors."""
    n = len(descs)
    rows, ev = [], []
    for i, ds in enumerate(descs):
        for d in ds:
            ev.append((len(rows), i))
            rows.append(d)
    w = len(rows)
    return MapGraph(
        positions=np.arange(3 * n, dtype=float).reshape(n, 3), descriptors=np.array(rows, dtype=float),
        pixels=np.full((w, 2), 10.0), kpt_origin=np.zeros(w),
        images=[ImageNode(0, np.eye(3), np.zeros(3), INTR, 0, 0)],
        edges_v=np.array(ev), edges_n=np.array(edges_n, dtype=np.int64).reshape(-1, 2),
        edges_c=np.array([(j, 0) for j in range(w)]), k=k,
    )


def relative_gradient_error(loss_fn, params, grads, h=1e-6):
    """Largest per-tensor max|numeric - analytic| / max|numeric| over all parameters."""
    worst = 0.0
    for name, value in params.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            p1 = {k: v.copy() for k, v in params.items()}
            p2 = {k: v.copy() for k, v in params.items()}
            p1[name][idx] += h
            p2[name][idx] -= h
            num[idx] = (loss_fn(p1) - loss_fn(p2)) / (2 * h)
        ana = grads[name] if grads[name] is not None else np.zeros_like(value)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst


def full_loss_gradient_error(g2: str, merge: str, seed: int) -> float:
    """Finite-difference check of BCE + K-Cover loss through one GNN variant."""
    from mapcull import autodiff as ad
    from mapcull.graph import sample_subgraph
    from mapcull.scorer import ScorerConfig, ScorerModel
    from mapcull.training import LossConfig, batch_loss

    rng = np.random.default_rng(seed)
    g = random_graph(n_points=30, n_images=3, per_image=10, dim=5, k=3, seed=seed)
    g = g.copy(labels=rng.integers(-1, 2, size=g.n_points))
    cfg = ScorerConfig(descriptor_dim=5, hidden_dim=4, out_dim=4, g2=g2, heads=2, head_merge=merge)
    model = ScorerModel.init(cfg, seed)
    for name, v in model.params.items():
        if name.split(".")[1].startswith("b"):
            v[...] = rng.normal(scale=0.3, size=v.shape)  # keep LeakyReLU away from its kink
    sub = sample_subgraph(g, int(rng.integers(g.n_images)))
    loss_cfg = LossConfig(K=float(rng.integers(2, 8)), lambda_l1=0.01)

    tape = ad.Tape()
    loss, P, _ = batch_loss(model, sub, loss_cfg, use_labels=True, tape=tape)
    ad.backward(tape, loss)

    def value(params):
        out, _, _ = batch_loss(ScorerModel(cfg, params), sub, loss_cfg, use_labels=True,
                               tape=ad.Tape(record=False))
        return float(out.value)

    return relative_gradient_error(value, model.params, {k: P[k].grad for k in P})


def pnp_scene(seed, n=60, outlier_frac=0.0, noise_px=0.0):
    """Random camera looking at points 5-30 m ahead; returns pixels, points, K, R, t."""
    from scipy.spatial.transform import Rotation
    from mapcull.world import WorldConfig

    rng = np.random.default_rng(seed)
    cfg = WorldConfig()
    K = cfg.intrinsics.matrix
    R = Rotation.from_rotvec(rng.normal(scale=0.5, size=3)).as_matrix()
    t = rng.normal(scale=2.0, size=3)
    depth = rng.uniform(5, 30, n)
    pix = rng.uniform([0, 0], [cfg.width, cfg.image_height], size=(n, 2))
    cam = np.c_[(pix - K[:2, 2]) / cfg.focal, np.ones(n)] * depth[:, None]
    X = (cam - t) @ R  # world = R^T (cam - t)
    pix = pix + rng.normal(scale=noise_px, size=pix.shape)
    bad = rng.random(n) < outlier_frac
    pix[bad] = rng.uniform([0, 0], [cfg.width, cfg.image_height], size=(int(bad.sum()), 2))
    return pix, X, K, R, t


TINY_PIPELINE = {
    "seed": 0,
    "suite": {
        "n_scenes": 2, "budgets": [20, 40, 60, 80], "b": 10, "n_desired": 100, "epochs": 1, "val_budget": 40,
        "world": {"n_points": 800, "images_per_session": 8, "query_images_per_session": 4, "road_length": 60.0},
        "scorer": {"hidden_dim": 16, "out_dim": 16},
    },
}

STAGES = ("generate", "build", "label", "train", "score", "sparsify", "eval", "report")


def run_pipeline(workdir, config=None):
    """Run every CLI stage on a small config; returns the exit codes."""
    import json
    from mapcull.cli import main

    workdir.mkdir(parents=True, exist_ok=True)
    cfg = workdir / "pipeline.json"
    cfg.write_text(json.dumps(config or TINY_PIPELINE))
    return [main([stage, "--workdir", str(workdir), "--config", str(cfg)]) for stage in STAGES]


def random_instance(rng, n_p=None, n_m=None):
    """Random K-Cover instance with at most 12 points and 5 images."""
    from mapcull.kcover import KCoverInstance, compute_weights

    n_p = n_p or int(rng.integers(2, 13))
    n_m = n_m or int(rng.integers(1, 6))
    rows = [np.flatnonzero(rng.random(n_p) < rng.uniform(0.2, 0.8)) for _ in range(n_m)]
    q = compute_weights(rng.integers(0, 6, size=n_p))
    return KCoverInstance(rows, q, b=int(rng.integers(0, 4)), n_desired=int(rng.integers(1, n_p + 1)))
