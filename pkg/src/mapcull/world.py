"""Synthetic long-term street world, map building and query matching.

A scene is a straight road along +x. Camera 0 looks at the left side (+y),
camera 1 at the right side (-y), so their frusta never share points. Points
belong to one of three classes:

* STABLE: same position and appearance in every session.
* SEASONAL: valid while mapping; in query sessions the structure is replaced
  by a displaced copy with a fresh descriptor (foliage, snow, parked cars).
* REPETITIVE: stable geometry, descriptors drawn from a few shared texture
  centers, so nearest-neighbor matching often picks the wrong instance.

Each side alternates dense (facade) and sparse (open) road segments whose
descriptors carry a region signature, and every class carries a class
signature. Appearance signatures are shared by all scenes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .graph import ImageNode, Intrinsics, MapGraph, Origin, QueryMatch, Split, build_knn_edges


class PointClass(IntEnum):
    STABLE = 0
    SEASONAL = 1
    REPETITIVE = 2


class WorldConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_points: int = 5000
    seasonal_fraction: float = 0.4
    repetitive_fraction: float = 0.15
    seasonal_flip: float = 1.0  # chance a seasonal point is replaced in query sessions
    seasonal_shift: float = 1.0  # std of the replacement displacement (m)
    n_map_sessions: int = 6
    n_query_sessions: int = 6
    images_per_session: int = 40
    query_images_per_session: int = 10
    road_length: float = 150.0
    segment_length: float = 20.0
    dense_factor: float = 6.0
    side_near: float = 5.0
    side_far: float = 18.0
    height: float = 6.0
    camera_height: float = 1.5
    lateral_jitter: float = 1.0
    yaw_jitter_deg: float = 3.0
    focal: float = 500.0
    width: int = 640
    image_height: int = 480
    descriptor_dim: int = 32
    class_signature: float = 0.6
    region_signature: float = 0.6
    n_texture_centers: int = 4
    descriptor_noise: float = 0.15
    pixel_noise: float = 1.0
    detect_stable: tuple = (0.3, 0.9)
    detect_seasonal: tuple = (0.3, 0.9)
    detect_repetitive: tuple = (0.3, 0.9)
    match_tau: float = 0.45
    inlier_px: float = 4.0
    k: int = 9
    camera1_split: int = int(Split.TEST)
    appearance_seed: int = 7

    def __post_init__(self):
        if self.n_points <= 0 or self.n_map_sessions <= 0 or self.n_query_sessions <= 0:
            raise WorldConfigError("need at least one point, one map session and one query session")
        if self.images_per_session <= 0 or self.query_images_per_session <= 0:
            raise WorldConfigError("need at least one image per session")
        if not 0 <= self.seasonal_fraction + self.repetitive_fraction <= 1:
            raise WorldConfigError("class fractions must sum to at most 1")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2, self.image_height / 2,
                          self.width, self.image_height)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise WorldConfigError(f"unknown world config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class CameraPose:
    session: int
    camera: int
    index: int
    rotation: np.ndarray
    translation: np.ndarray


@dataclass
class SyntheticWorld:
    config: WorldConfig
    seed: int
    positions: np.ndarray
    classes: np.ndarray
    side: np.ndarray  # 0 = left (camera 0), 1 = right (camera 1)
    region: np.ndarray  # 0 = sparse/open, 1 = dense/facade
    detect: np.ndarray
    canonical: np.ndarray
    query_valid: np.ndarray  # (N, n_query_sessions)
    replaced_positions: np.ndarray
    replaced_descriptors: np.ndarray
    map_poses: list
    query_poses: list
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return len(self.positions)

    def split_of_camera(self, camera: int) -> Split:
        return Split.TRAIN if camera == 0 else Split(self.config.camera1_split)

    def image_node(self, pose: CameraPose, image_id: int, origin=Origin.MAP) -> ImageNode:
        return ImageNode(image_id, pose.rotation, pose.translation, self.config.intrinsics,
                         pose.session, pose.camera, origin, self.split_of_camera(pose.camera))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def appearance_basis(cfg: WorldConfig):
    """Class signatures, region signatures and repetitive texture centers."""
    rng = np.random.default_rng(cfg.appearance_seed)
    d = cfg.descriptor_dim
    return (_unit(rng.normal(size=(3, d))), _unit(rng.normal(size=(2, d))),
            _unit(rng.normal(size=(cfg.n_texture_centers, d))))


def look_rotation(forward: np.ndarray, down=(0.0, 0.0, -1.0)) -> np.ndarray:
    """World->camera rotation for a camera looking along ``forward`` (x right, y down)."""
    f = _unit(np.asarray(forward, dtype=float))
    d = np.asarray(down, dtype=float)
    d = _unit(d - f * (d @ f))
    r = np.cross(d, f)
    return np.stack([r, d, f])


def _poses(cfg: WorldConfig, rng, n_sessions: int, per_session: int, session_base: int):
    out = []
    xs = np.linspace(0.0, cfg.road_length, per_session)
    step = cfg.road_length / max(per_session - 1, 1)
    for s in range(n_sessions):
        for cam in (0, 1):
            for j, x0 in enumerate(xs):
                x = x0 + rng.uniform(-0.4, 0.4) * step
                y = rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter)
                yaw = np.deg2rad(rng.normal(0.0, cfg.yaw_jitter_deg))
                sign = 1.0 if cam == 0 else -1.0
                fwd = np.array([-np.sin(yaw) * sign, np.cos(yaw) * sign, 0.0])
                R = look_rotation(fwd)
                c = np.array([x, y, cfg.camera_height])
                out.append(CameraPose(session_base + s, cam, j, R, -R @ c))
    return out


def _draw_descriptor(cfg, basis, cls, region, rng, n):
    cls_sig, reg_sig, centers = basis
    d = cfg.descriptor_dim
    base = cfg.class_signature * cls_sig[cls] + cfg.region_signature * reg_sig[region]
    g = rng.normal(size=(n, d)) / np.sqrt(d)
    rep = cls == PointClass.REPETITIVE
    if rep.any():
        which = rng.integers(0, len(centers), size=int(rep.sum()))
        g[rep] = centers[which] + 0.05 * g[rep]
    return _unit(base + g)


def generate_world(config: WorldConfig = WorldConfig(), seed: int = 0) -> SyntheticWorld:
    cfg = config
    rng = np.random.default_rng(seed)
    n = cfg.n_points
    basis = appearance_basis(cfg)

    # Road segments alternate at random between dense and sparse.
    lo, hi = -10.0, cfg.road_length + 10.0
    n_seg = int(np.ceil((hi - lo) / cfg.segment_length))
    seg_dense = rng.random((2, n_seg)) < 0.5
    side = rng.integers(0, 2, size=n)
    weights = np.where(seg_dense, cfg.dense_factor, 1.0)
    seg = np.empty(n, dtype=np.int64)
    for s in (0, 1):
        idx = np.flatnonzero(side == s)
        seg[idx] = rng.choice(n_seg, size=len(idx), p=weights[s] / weights[s].sum())
    x = lo + (seg + rng.random(n)) * cfg.segment_length
    depth = rng.uniform(cfg.side_near, cfg.side_far, size=n)
    y = np.where(side == 0, depth, -depth)
    z = rng.uniform(0.0, cfg.height, size=n)
    positions = np.stack([x, y, z], axis=1)
    region = seg_dense[side, seg].astype(np.int64)

    u = rng.random(n)
    classes = np.full(n, PointClass.STABLE, dtype=np.int64)
    classes[u < cfg.seasonal_fraction + cfg.repetitive_fraction] = PointClass.REPETITIVE
    classes[u < cfg.seasonal_fraction] = PointClass.SEASONAL

    ranges = {PointClass.STABLE: cfg.detect_stable, PointClass.SEASONAL: cfg.detect_seasonal,
              PointClass.REPETITIVE: cfg.detect_repetitive}
    detect = np.empty(n)
    for c, (a, b) in ranges.items():
        m = classes == c
        detect[m] = rng.uniform(a, b, size=int(m.sum()))

    canonical = _draw_descriptor(cfg, basis, classes, region, rng, n)
    flips = (classes == PointClass.SEASONAL) & (rng.random(n) < cfg.seasonal_flip)
    query_valid = np.repeat(~flips[:, None], cfg.n_query_sessions, axis=1)
    replaced_positions = positions + rng.normal(0.0, cfg.seasonal_shift, size=(n, 3))
    replaced_descriptors = _draw_descriptor(cfg, basis, classes, region, rng, n)

    map_poses = _poses(cfg, rng, cfg.n_map_sessions, cfg.images_per_session, 0)
    query_poses = _poses(cfg, rng, cfg.n_query_sessions, cfg.query_images_per_session,
                         cfg.n_map_sessions)
    return SyntheticWorld(cfg, seed, positions, classes, side, region, detect, canonical,
                          query_valid, replaced_positions, replaced_descriptors,
                          map_poses, query_poses)


def _visible(cfg: WorldConfig, R, t, X):
    cam = X @ R.T + t
    depth = cam[:, 2]
    ok = depth > 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cfg.focal * cam[:, 0] / depth + cfg.width / 2
        v = cfg.focal * cam[:, 1] / depth + cfg.image_height / 2
    ok &= (u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.image_height)
    return ok, np.stack([u, v], axis=1)


def _noisy_pixels(cfg, pix, rng):
    out = pix + rng.normal(0.0, cfg.pixel_noise, size=pix.shape)
    return np.clip(out, 0.0, np.nextafter([cfg.width, cfg.image_height], 0.0))


def _noisy_descriptors(cfg, desc, rng):
    return _unit(desc + rng.normal(size=desc.shape) * cfg.descriptor_noise / np.sqrt(cfg.descriptor_dim))


def _image_rng(world: SyntheticWorld, kind: int, idx: int):
    return np.random.default_rng([world.seed, kind, idx])


def build_map_graph(world: SyntheticWorld) -> MapGraph:
    """Keypoints of every mapping image, visibility/containing edges and kNN edges."""
    cfg = world.config
    images, desc, pix, ev, ec = [], [], [], [], []
    w = 0
    for l, pose in enumerate(world.map_poses):
        rng = _image_rng(world, 0, l)
        ok, uv = _visible(cfg, pose.rotation, pose.translation, world.positions)
        ids = np.flatnonzero(ok)
        ids = ids[rng.random(len(ids)) < world.detect[ids]]
        images.append(world.image_node(pose, l))
        desc.append(_noisy_descriptors(cfg, world.canonical[ids], rng))
        pix.append(_noisy_pixels(cfg, uv[ids], rng))
        kid = w + np.arange(len(ids))
        ev.append(np.stack([kid, ids], axis=1))
        ec.append(np.stack([kid, np.full(len(ids), l)], axis=1))
        w += len(ids)
    ev = np.concatenate(ev)
    return MapGraph(
        positions=world.positions, descriptors=np.concatenate(desc), pixels=np.concatenate(pix),
        kpt_origin=np.zeros(w, dtype=np.int8), images=images, edges_v=ev,
        edges_n=build_knn_edges(world.positions, cfg.k), edges_c=np.concatenate(ec),
        obs_count_map=np.bincount(ev[:, 1], minlength=world.n_points), k=cfg.k, seed=world.seed,
        meta={"world": cfg.to_dict()},
    )


@dataclass
class QueryObservation:
    """Keypoints detected in one query image, generated once and reused for every map."""
    index: int
    pose: CameraPose
    points: np.ndarray  # world point behind each keypoint
    replaced: np.ndarray  # True where the keypoint sees the seasonal replacement
    pixels: np.ndarray
    descriptors: np.ndarray


def query_observations(world: SyntheticWorld) -> list:
    cfg = world.config
    out = []
    for q, pose in enumerate(world.query_poses):
        rng = _image_rng(world, 1, q)
        valid = world.query_valid[:, pose.session - cfg.n_map_sessions]
        X = np.where(valid[:, None], world.positions, world.replaced_positions)
        ok, uv = _visible(cfg, pose.rotation, pose.translation, X)
        ids = np.flatnonzero(ok)
        ids = ids[rng.random(len(ids)) < world.detect[ids]]
        base = np.where(valid[ids, None], world.canonical[ids], world.replaced_descriptors[ids])
        out.append(QueryObservation(q, pose, ids, ~valid[ids], _noisy_pixels(cfg, uv[ids], rng),
                                    _noisy_descriptors(cfg, base, rng)))
    return out


@dataclass
class QueryMatches:
    index: int
    pixels: np.ndarray
    points: np.ndarray  # matched map point ids
    correct: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.points)


def match_query(world: SyntheticWorld, graph: MapGraph, obs: QueryObservation,
                selected: np.ndarray | None = None) -> QueryMatches:
    """Nearest map keypoint descriptor among selected points inside the query frustum."""
    cfg = world.config
    empty = QueryMatches(obs.index, np.zeros((0, 2)), np.zeros(0, dtype=np.int64),
                         np.zeros(0, dtype=bool), np.zeros((0, cfg.descriptor_dim)))
    if len(obs.points) == 0:
        return empty
    ok, uv = _visible(cfg, obs.pose.rotation, obs.pose.translation, graph.positions)
    if selected is not None:
        ok &= selected
    cand = np.flatnonzero(ok)
    ptr, kpts = graph.map_visibility
    lens = ptr[cand + 1] - ptr[cand]
    if lens.sum() == 0:
        return empty
    starts = np.repeat(ptr[cand] - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
    cand_kpts = kpts[starts]
    cand_pts = np.repeat(cand, lens)
    kd = graph.descriptors[cand_kpts]
    d2 = (np.sum(obs.descriptors ** 2, axis=1)[:, None] - 2.0 * obs.descriptors @ kd.T
          + np.sum(kd ** 2, axis=1)[None, :])
    best = np.argmin(d2, axis=1)
    dist = np.sqrt(np.maximum(d2[np.arange(len(best)), best], 0.0))
    acc = dist < cfg.match_tau
    pts = cand_pts[best[acc]]
    pix = obs.pixels[acc]
    err = np.linalg.norm(uv[pts] - pix, axis=1)
    return QueryMatches(obs.index, pix, pts, err <= cfg.inlier_px, obs.descriptors[acc])


def simulate_matches(world: SyntheticWorld, graph: MapGraph, observations, selected=None) -> list:
    return [match_query(world, graph, o, selected) for o in observations]


def overlay_matches(world: SyntheticWorld, observations, matches, camera: int = 0,
                    correct_only: bool = True):
    """QueryMatch records and query ImageNodes for queries of one camera."""
    images, records = [], []
    for obs, m in zip(observations, matches):
        if obs.pose.camera != camera:
            continue
        j = len(images)
        images.append(world.image_node(obs.pose, j, Origin.QUERY))
        keep = m.correct if correct_only else np.ones(len(m), dtype=bool)
        for p, px, d in zip(m.points[keep], m.pixels[keep], m.descriptors[keep]):
            records.append(QueryMatch(j, px, d, int(p)))
    return records, images


def save_world(world: SyntheticWorld, path) -> None:
    arrays = {f.name: getattr(world, f.name) for f in dataclasses.fields(world)
              if isinstance(getattr(world, f.name), np.ndarray)}
    for kind in ("map_poses", "query_poses"):
        poses = getattr(world, kind)
        arrays[kind + "_int"] = np.array([[p.session, p.camera, p.index] for p in poses], dtype=np.int64)
        arrays[kind + "_R"] = np.array([p.rotation for p in poses])
        arrays[kind + "_t"] = np.array([p.translation for p in poses])
    header = json.dumps({"config": world.config.to_dict(), "seed": world.seed, "meta": world.meta},
                        sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), **arrays)


def load_world(path) -> SyntheticWorld:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        kw = {}
        for f in dataclasses.fields(SyntheticWorld):
            if f.name in z.files:
                kw[f.name] = z[f.name]
        for kind in ("map_poses", "query_poses"):
            ints, Rs, ts = z[kind + "_int"], z[kind + "_R"], z[kind + "_t"]
            kw[kind] = [CameraPose(int(a), int(b), int(c), R, t) for (a, b, c), R, t in zip(ints, Rs, ts)]
    return SyntheticWorld(WorldConfig.from_dict(header["config"]), int(header["seed"]),
                          meta=header.get("meta", {}), **kw)
