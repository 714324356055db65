"""Heterogeneous SfM map graph.

A map is stored as three node sets (3D points, 2D keypoints, images) and three
directed edge sets:

* visibility edges ``edges_v``: keypoint -> point
* kNN edges ``edges_n``: neighbor point -> point
* containing edges ``edges_c``: keypoint -> image

Point and keypoint attributes live in flat numpy arrays indexed by node id.
Keypoints and images carry an origin tag so the query overlay (matches of
localized training queries) can share the file and the arrays with the map.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

BRUTE_FORCE_LIMIT = 50_000
FORMAT_NAME = "mapcull-graph"
FORMAT_VERSION = 1


class Origin(IntEnum):
    MAP = 0
    QUERY = 1


class Split(IntEnum):
    TRAIN = 0
    VALID = 1
    TEST = 2


class GraphError(ValueError):
    pass


class EmptyGraphError(GraphError):
    pass


class EmptySubgraphError(GraphError):
    pass


class SplitViolationError(GraphError):
    pass


class GraphFormatError(GraphError):
    """Raised for unreadable graph files; the message names the line or record."""


class GraphSchemaError(GraphError):
    """Raised when a graph file parses but violates the schema."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return (
            (pixels[:, 0] >= 0) & (pixels[:, 0] < self.width)
            & (pixels[:, 1] >= 0) & (pixels[:, 1] < self.height)
        )


@dataclass(eq=False)
class ImageNode:
    id: int
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    intrinsics: Intrinsics
    session: int
    camera_id: int
    origin: Origin = Origin.MAP
    split: Split = Split.TRAIN

    def __eq__(self, other):
        if not isinstance(other, ImageNode):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.intrinsics == other.intrinsics
            and self.session == other.session
            and self.camera_id == other.camera_id
            and self.origin == other.origin
            and self.split == other.split
        )

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray):
        """Project world points; returns (pixels, depths)."""
        cam = np.asarray(points, dtype=float).reshape(-1, 3) @ self.rotation.T + self.translation
        depth = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * cam[:, 0] / depth + self.intrinsics.cx
            v = self.intrinsics.fy * cam[:, 1] / depth + self.intrinsics.cy
        return np.stack([u, v], axis=1), depth

    def with_id(self, new_id: int) -> "ImageNode":
        return dataclasses.replace(self, id=new_id)


@dataclass(frozen=True)
class PointNode:
    id: int
    position: np.ndarray
    label_gt: int | None
    score: float | None
    obs_count_map: int
    obs_count_query: int


@dataclass(frozen=True)
class KeyPointNode:
    id: int
    descriptor: np.ndarray
    pixel: np.ndarray
    origin: Origin
    image: int


def _csr(keys: np.ndarray, values: np.ndarray, n: int):
    """Group ``values`` by ``keys`` into CSR form, values ascending within each key."""
    order = np.lexsort((values, keys))
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, keys + 1, 1)
    return np.cumsum(ptr), values[order].astype(np.int64)


@dataclass(eq=False)
class MapGraph:
    positions: np.ndarray
    descriptors: np.ndarray
    pixels: np.ndarray
    kpt_origin: np.ndarray
    images: list
    edges_v: np.ndarray
    edges_n: np.ndarray
    edges_c: np.ndarray
    obs_count_map: np.ndarray | None = None
    obs_count_query: np.ndarray | None = None
    labels: np.ndarray | None = None  # -1 where no label
    scores: np.ndarray | None = None  # nan where unscored
    k: int = 9
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n_p = len(self.positions)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise GraphSchemaError("descriptors must be a 2D array")
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.kpt_origin = np.asarray(self.kpt_origin, dtype=np.int8).reshape(-1)
        self.edges_v = np.asarray(self.edges_v, dtype=np.int64).reshape(-1, 2)
        self.edges_n = np.asarray(self.edges_n, dtype=np.int64).reshape(-1, 2)
        self.edges_c = np.asarray(self.edges_c, dtype=np.int64).reshape(-1, 2)
        if self.obs_count_map is None:
            self.obs_count_map = np.zeros(n_p, dtype=np.int64)
        if self.obs_count_query is None:
            self.obs_count_query = np.zeros(n_p, dtype=np.int64)
        if self.labels is None:
            self.labels = np.full(n_p, -1, dtype=np.int8)
        if self.scores is None:
            self.scores = np.full(n_p, np.nan)
        self.obs_count_map = np.asarray(self.obs_count_map, dtype=np.int64)
        self.obs_count_query = np.asarray(self.obs_count_query, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.images = list(self.images)

    # -- sizes ---------------------------------------------------------------
    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def n_keypoints(self) -> int:
        return len(self.descriptors)

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def point(self, i: int) -> PointNode:
        label = int(self.labels[i])
        score = float(self.scores[i])
        return PointNode(
            id=i, position=self.positions[i].copy(),
            label_gt=None if label < 0 else label,
            score=None if np.isnan(score) else score,
            obs_count_map=int(self.obs_count_map[i]),
            obs_count_query=int(self.obs_count_query[i]),
        )

    def keypoint(self, w: int) -> KeyPointNode:
        return KeyPointNode(
            id=w, descriptor=self.descriptors[w].copy(), pixel=self.pixels[w].copy(),
            origin=Origin(int(self.kpt_origin[w])), image=int(self.kpt_image[w]),
        )

    # -- derived indices (the graph is treated as immutable) -------------------
    @functools.cached_property
    def kpt_image(self) -> np.ndarray:
        out = np.full(self.n_keypoints, -1, dtype=np.int64)
        out[self.edges_c[:, 0]] = self.edges_c[:, 1]
        return out

    @functools.cached_property
    def kpt_point(self) -> np.ndarray:
        out = np.full(self.n_keypoints, -1, dtype=np.int64)
        out[self.edges_v[:, 0]] = self.edges_v[:, 1]
        return out

    @functools.cached_property
    def image_origin(self) -> np.ndarray:
        return np.array([int(im.origin) for im in self.images], dtype=np.int8)

    @functools.cached_property
    def image_split(self) -> np.ndarray:
        return np.array([int(im.split) for im in self.images], dtype=np.int8)

    @functools.cached_property
    def map_visibility(self):
        """CSR (ptr, keypoint ids) of MAP-origin visibility edges per point."""
        ev = self.edges_v[self.kpt_origin[self.edges_v[:, 0]] == Origin.MAP]
        return _csr(ev[:, 1], ev[:, 0], self.n_points)

    @functools.cached_property
    def image_keypoints(self):
        """CSR (ptr, keypoint ids) of containing edges per image."""
        return _csr(self.edges_c[:, 1], self.edges_c[:, 0], self.n_images)

    @functools.cached_property
    def knn_sources(self):
        """CSR (ptr, source ids) of kNN edges per destination point."""
        return _csr(self.edges_n[:, 1], self.edges_n[:, 0], self.n_points)

    @functools.cached_property
    def map_descriptor_sums(self) -> np.ndarray:
        """Per point, the sum of its MAP keypoint descriptors in ascending keypoint order."""
        ptr, kpts = self.map_visibility
        out = np.zeros((self.n_points, self.descriptor_dim))
        nz = np.diff(ptr) > 0
        if nz.any():
            out[nz] = np.add.reduceat(self.descriptors[kpts], ptr[:-1][nz], axis=0)
        return out

    @functools.cached_property
    def map_obs(self) -> np.ndarray:
        ptr, _ = self.map_visibility
        return np.diff(ptr)

    def visible_points(self, image_id: int) -> np.ndarray:
        """phi_l: sorted ids of points observed through the image's keypoints."""
        ptr, kpts = self.image_keypoints
        w = kpts[ptr[image_id]:ptr[image_id + 1]]
        p = self.kpt_point[w]
        return np.unique(p[p >= 0])

    def images_of(self, origin: Origin, split: Split | None = None) -> np.ndarray:
        mask = self.image_origin == origin
        if split is not None:
            mask &= self.image_split == split
        return np.flatnonzero(mask)

    def area_points(self, split: Split) -> np.ndarray:
        """Points observed by MAP images of the given split."""
        imgs = self.images_of(Origin.MAP, split)
        mask = np.zeros(self.n_points, dtype=bool)
        sel = np.isin(self.kpt_image, imgs) & (self.kpt_point >= 0)
        mask[self.kpt_point[sel]] = True
        return np.flatnonzero(mask)

    def copy(self, **changes) -> "MapGraph":
        fields = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        fields.update(changes)
        for name, value in fields.items():
            if isinstance(value, np.ndarray):
                fields[name] = value.copy()
        fields["images"] = list(fields["images"])
        fields["meta"] = dict(fields["meta"])
        return MapGraph(**fields)

    def __eq__(self, other):
        if not isinstance(other, MapGraph):
            return NotImplemented
        arrays = ("positions", "descriptors", "pixels", "kpt_origin", "edges_v", "edges_n",
                  "edges_c", "obs_count_map", "obs_count_query", "labels")
        return (
            all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and self.descriptor_dim == other.descriptor_dim
            and np.array_equal(self.scores, other.scores, equal_nan=True)
            and self.images == other.images
            and self.k == other.k
            and self.seed == other.seed
        )

    def validate(self, allow_test_overlay: bool = False) -> None:
        """Check referential integrity and the structural invariants."""
        n_p, n_k, n_m = self.n_points, self.n_keypoints, self.n_images
        if not np.all(np.isfinite(self.positions)):
            raise GraphSchemaError("non-finite point position")
        if len(self.pixels) != n_k or len(self.kpt_origin) != n_k:
            raise GraphSchemaError("keypoint arrays disagree in length")
        for name, arr, (hi_a, hi_b) in (
            ("edges_v", self.edges_v, (n_k, n_p)),
            ("edges_n", self.edges_n, (n_p, n_p)),
            ("edges_c", self.edges_c, (n_k, n_m)),
        ):
            if len(arr) and (arr.min() < 0 or arr[:, 0].max() >= hi_a or arr[:, 1].max() >= hi_b):
                raise GraphSchemaError(f"{name} references a missing node")
        if len(np.unique(self.edges_v[:, 0])) != len(self.edges_v):
            raise GraphSchemaError("a keypoint has more than one visibility edge")
        if len(self.edges_c) != n_k or len(np.unique(self.edges_c[:, 0])) != n_k:
            raise GraphSchemaError("every keypoint must belong to exactly one image")
        if np.any(self.edges_n[:, 0] == self.edges_n[:, 1]):
            raise GraphSchemaError("kNN self-loop")
        if len(self.edges_n):
            indeg = np.bincount(self.edges_n[:, 1], minlength=n_p)
            if np.any(indeg != min(self.k, n_p - 1)):
                raise GraphSchemaError("kNN in-degree differs from min(k, N_p - 1)")
        scored = self.scores[~np.isnan(self.scores)]
        if np.any((scored < 0) | (scored > 1)):
            raise GraphSchemaError("score outside [0, 1]")
        for im in self.images:
            if np.abs(im.rotation.T @ im.rotation - np.eye(3)).max() >= 1e-9:
                raise GraphSchemaError(f"image {im.id}: rotation is not orthonormal")
        if n_k:
            kimg = self.kpt_image
            for l, im in enumerate(self.images):
                if im.id != l:
                    raise GraphSchemaError(f"image record {l} carries id {im.id}")
            img_origin = self.image_origin[kimg]
            if np.any(img_origin != self.kpt_origin):
                raise GraphSchemaError("keypoint origin differs from its image origin")
            for l in np.unique(kimg):
                ok = self.images[l].intrinsics.contains(self.pixels[kimg == l])
                if not np.all(ok):
                    raise GraphSchemaError(f"image {l}: keypoint outside image bounds")
        if not allow_test_overlay:
            q = self.images_of(Origin.QUERY)
            if np.any(self.image_split[q] != Split.TRAIN):
                raise SplitViolationError("query overlay outside the training split")


def empty_graph(descriptor_dim: int = 32, k: int = 9) -> MapGraph:
    return MapGraph(
        positions=np.zeros((0, 3)), descriptors=np.zeros((0, descriptor_dim)),
        pixels=np.zeros((0, 2)), kpt_origin=np.zeros(0), images=[],
        edges_v=np.zeros((0, 2)), edges_n=np.zeros((0, 2)), edges_c=np.zeros((0, 2)), k=k,
    )


# -- kNN ---------------------------------------------------------------------

def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Same expression on both search paths so tie-breaking agrees bit for bit.
    d = a - b
    return (d * d).sum(axis=-1)


def _select_knn(rows: np.ndarray, cols: np.ndarray, d2: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((cols, d2, rows))
    rows, cols = rows[order], cols[order]
    start = np.searchsorted(rows, rows, side="left")
    keep = (np.arange(len(rows)) - start) < k
    return np.stack([cols[keep], rows[keep]], axis=1)


def build_knn_edges(positions: np.ndarray, k: int, method: str = "auto", chunk: int = 256) -> np.ndarray:
    """Directed kNN edges (j -> i) for the min(k, N-1) nearest j != i of each i.

    Ties are broken by ascending point id. Rows of the result are sorted by
    destination, then by rank. ``method`` is "brute", "tree" or "auto"
    (brute force below ``BRUTE_FORCE_LIMIT`` points).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n < 2:
        raise EmptyGraphError("kNN needs at least two points")
    if k < 1:
        raise ValueError("k must be positive")
    k_eff = min(k, n - 1)
    if method == "auto":
        method = "brute" if n < BRUTE_FORCE_LIMIT else "tree"

    out = []
    if method == "brute":
        for lo in range(0, n, chunk):
            idx = np.arange(lo, min(lo + chunk, n))
            d2 = _sqdist(positions[idx, None, :], positions[None, :, :])
            d2[np.arange(len(idx)), idx] = np.inf
            kth = np.partition(d2, k_eff - 1, axis=1)[:, k_eff - 1]
            r, c = np.nonzero(d2 <= kth[:, None])
            out.append(_select_knn(idx[r], c, d2[r, c], k_eff))
    elif method == "tree":
        tree = cKDTree(positions)
        m = min(n, k_eff + 5)
        for lo in range(0, n, 4096):
            idx = np.arange(lo, min(lo + 4096, n))
            _, cand = tree.query(positions[idx], k=m)
            cand = np.asarray(cand).reshape(len(idx), m)
            rows = np.repeat(idx, m)
            cols = cand.reshape(-1)
            d2 = _sqdist(positions[rows], positions[cols])
            d2[rows == cols] = np.inf
            d2m = d2.reshape(len(idx), m)
            kth = np.sort(d2m, axis=1)[:, k_eff - 1]
            # Rows whose candidate list may have cut a tie at the k-th distance.
            # The self entry is inf, so take the farthest non-self candidate.
            far = np.where(np.isinf(d2m), -np.inf, d2m).max(axis=1)
            redo = (far <= kth) & (m < n)
            keep = ~np.repeat(redo, m)
            rows, cols, d2 = rows[keep], cols[keep], d2[keep]
            for i in idx[redo]:
                r = np.sqrt(kth[i - lo]) * (1 + 1e-12) + 1e-300
                c = np.array(sorted(tree.query_ball_point(positions[i], r)), dtype=np.int64)
                c = c[c != i]
                rows = np.concatenate([rows, np.full(len(c), i)])
                cols = np.concatenate([cols, c])
                d2 = np.concatenate([d2, _sqdist(positions[np.full(len(c), i)], positions[c])])
            out.append(_select_knn(rows, cols, d2, k_eff))
    else:
        raise ValueError(f"unknown kNN method {method!r}")
    edges = np.concatenate(out).astype(np.int64)
    return edges[np.lexsort((np.arange(len(edges)), edges[:, 1]))]


def with_knn(graph: MapGraph, k: int) -> MapGraph:
    return graph.copy(edges_n=build_knn_edges(graph.positions, k), k=k)


# -- subgraph sampling ---------------------------------------------------------

@dataclass
class Subgraph:
    """Closure of one anchor image: everything needed to score its points.

    ``descriptors`` holds the rows of ``keypoints_needed``; ``vis_order`` and
    ``vis_ptr`` group them by neighbor point (ascending keypoint id inside a
    group). ``slots`` lists, for each center point, the sorted local indices of
    ``{i} U kNN(i)`` in ``neighbor_points`` (padded with -1).
    ``descriptor_sums`` holds the summed MAP descriptors of each neighbor point;
    ``descriptors`` may be None when the closure was built without them.
    """

    anchor_image: int
    center_points: np.ndarray
    neighbor_points: np.ndarray
    keypoints_needed: np.ndarray
    edges_v: np.ndarray
    edges_n: np.ndarray
    edges_c: np.ndarray
    descriptors: np.ndarray | None
    descriptor_sums: np.ndarray
    vis_order: np.ndarray
    vis_ptr: np.ndarray
    center_local: np.ndarray
    slots: np.ndarray
    neighbor_degree: np.ndarray  # |N(j)| in the full graph for each neighbor point
    labels: np.ndarray  # labels of center points (-1 = none)

    @property
    def n_center(self) -> int:
        return len(self.center_points)


def _ranges(ptr: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Concatenate CSR ranges ptr[i]:ptr[i+1] for each i in ids."""
    lens = ptr[ids + 1] - ptr[ids]
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.repeat(ptr[ids] - np.cumsum(lens) + lens, lens)
    return starts + np.arange(total)


def closure(graph: MapGraph, centers: np.ndarray, anchor_image: int = -1,
            keep_descriptors: bool = True) -> Subgraph:
    """Trace centers -> kNN sources -> their MAP keypoints into a Subgraph."""
    centers = np.unique(np.asarray(centers, dtype=np.int64))
    vptr, vkpts = graph.map_visibility
    nptr, nsrc = graph.knn_sources

    src_pos = _ranges(nptr, centers)
    neighbors = np.union1d(centers, nsrc[src_pos])
    kpt_pos = _ranges(vptr, neighbors)
    kpts_grouped = vkpts[kpt_pos]  # grouped by neighbor point, ascending kpt inside
    keypoints_needed = np.unique(kpts_grouped)
    counts = vptr[neighbors + 1] - vptr[neighbors]
    vis_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    vis_order = np.searchsorted(keypoints_needed, kpts_grouped)

    n_c = len(centers)
    deg = nptr[centers + 1] - nptr[centers]
    width = int(deg.max()) + 1 if n_c else 1
    slots = np.full((n_c, width), -1, dtype=np.int64)
    center_local = np.searchsorted(neighbors, centers)
    rows = np.concatenate([np.repeat(np.arange(n_c), deg), np.arange(n_c)])
    members = np.concatenate([nsrc[src_pos], centers])
    order = np.lexsort((members, rows))
    rows, members = rows[order], members[order]
    col = np.arange(len(rows)) - np.searchsorted(rows, rows, side="left")
    slots[rows, col] = np.searchsorted(neighbors, members)

    in_n = np.isin(graph.edges_n[:, 1], centers)
    ev_mask = np.isin(graph.edges_v[:, 0], keypoints_needed)
    return Subgraph(
        anchor_image=anchor_image,
        center_points=centers,
        neighbor_points=neighbors,
        keypoints_needed=keypoints_needed,
        edges_v=graph.edges_v[ev_mask],
        edges_n=graph.edges_n[in_n],
        edges_c=np.stack([keypoints_needed, graph.kpt_image[keypoints_needed]], axis=1),
        descriptors=np.ascontiguousarray(graph.descriptors[keypoints_needed]) if keep_descriptors else None,
        descriptor_sums=graph.map_descriptor_sums[neighbors],
        vis_order=vis_order,
        vis_ptr=vis_ptr,
        center_local=center_local,
        slots=slots,
        neighbor_degree=(nptr[neighbors + 1] - nptr[neighbors]).astype(np.int64),
        labels=graph.labels[centers].copy(),
    )


def sample_subgraph(graph: MapGraph, image_id: int, keep_descriptors: bool = True) -> Subgraph:
    """Four-layer trace image <- keypoints <- points <- kNN points <- their keypoints."""
    if not 0 <= image_id < graph.n_images:
        raise GraphError(f"image {image_id} does not exist")
    ptr, kpts = graph.image_keypoints
    w = kpts[ptr[image_id]:ptr[image_id + 1]]
    w = w[graph.kpt_origin[w] == Origin.MAP]
    p = graph.kpt_point[w]
    centers = np.unique(p[p >= 0])
    if len(centers) == 0:
        raise EmptySubgraphError(f"image {image_id} sees no map points")
    return closure(graph, centers, anchor_image=image_id, keep_descriptors=keep_descriptors)


def scorable_points(graph: MapGraph) -> np.ndarray:
    """Points with at least one MAP visibility edge."""
    return np.flatnonzero(graph.map_obs > 0)


def full_closure(graph: MapGraph) -> Subgraph:
    return closure(graph, scorable_points(graph))


# -- query overlay -------------------------------------------------------------

@dataclass
class QueryMatch:
    image: int  # index into the query image list handed to the overlay
    pixel: np.ndarray
    descriptor: np.ndarray
    point: int


def query_overlay(graph: MapGraph, matches, query_images, allowed_splits=(Split.TRAIN,)) -> MapGraph:
    """Append QUERY-origin images, keypoints and edges for localized queries.

    MAP-origin records are untouched; ``obs_count_query`` is incremented once
    per match. Query images outside ``allowed_splits`` or matches to points of
    a non-allowed area raise SplitViolationError.
    """
    matches = list(matches)
    allowed = {Split(s) for s in allowed_splits}
    for im in query_images:
        if im.split not in allowed:
            raise SplitViolationError(f"query image in split {im.split.name}")
    pids = np.array([m.point for m in matches], dtype=np.int64)
    if len(pids) and (pids.min() < 0 or pids.max() >= graph.n_points):
        raise GraphSchemaError("match references a missing map point")
    forbidden = [s for s in Split if s not in allowed]
    for s in forbidden:
        if len(pids) and np.isin(pids, graph.area_points(s)).any():
            raise SplitViolationError(f"match touches {s.name} geometry")

    base_img = graph.n_images
    base_kpt = graph.n_keypoints
    new_images = [
        dataclasses.replace(im, id=base_img + j, origin=Origin.QUERY) for j, im in enumerate(query_images)
    ]
    d = graph.descriptor_dim
    desc = np.array([m.descriptor for m in matches], dtype=np.float64).reshape(-1, d)
    pix = np.array([m.pixel for m in matches], dtype=np.float64).reshape(-1, 2)
    kids = base_kpt + np.arange(len(matches), dtype=np.int64)
    img_ids = base_img + np.array([m.image for m in matches], dtype=np.int64)
    obs_q = graph.obs_count_query.copy()
    np.add.at(obs_q, pids, 1)
    out = graph.copy(
        descriptors=np.concatenate([graph.descriptors, desc]),
        pixels=np.concatenate([graph.pixels, pix]),
        kpt_origin=np.concatenate([graph.kpt_origin, np.full(len(matches), Origin.QUERY, np.int8)]),
        images=graph.images + new_images,
        edges_v=np.concatenate([graph.edges_v, np.stack([kids, pids], axis=1)]),
        edges_c=np.concatenate([graph.edges_c, np.stack([kids, img_ids], axis=1)]),
        obs_count_query=obs_q,
    )
    return out


# -- serialization -------------------------------------------------------------

def _f(x: float) -> str:
    return format(float(x), ".17g")


def _vec(a) -> str:
    return "[" + ",".join(_f(v) for v in a) + "]"


def _point_record(g: MapGraph, i: int) -> str:
    label = int(g.labels[i])
    score = g.scores[i]
    return (
        f'{{"id":{i},"position":{_vec(g.positions[i])},'
        f'"label_gt":{"null" if label < 0 else label},'
        f'"score":{"null" if np.isnan(score) else _f(score)},'
        f'"obs_count_map":{int(g.obs_count_map[i])},"obs_count_query":{int(g.obs_count_query[i])}}}'
    )


def _kpt_record(g: MapGraph, w: int) -> str:
    return (
        f'{{"id":{w},"descriptor":{_vec(g.descriptors[w])},"pixel":{_vec(g.pixels[w])},'
        f'"origin":"{Origin(int(g.kpt_origin[w])).name}"}}'
    )


def _image_record(im: ImageNode) -> str:
    k = im.intrinsics
    rot = "[" + ",".join(_vec(r) for r in im.rotation) + "]"
    return (
        f'{{"id":{im.id},"rotation":{rot},"translation":{_vec(im.translation)},'
        f'"intrinsics":{{"fx":{_f(k.fx)},"fy":{_f(k.fy)},"cx":{_f(k.cx)},"cy":{_f(k.cy)},'
        f'"width":{int(k.width)},"height":{int(k.height)}}},'
        f'"session":{im.session},"camera_id":{im.camera_id},'
        f'"origin":"{im.origin.name}","split":"{im.split.name}"}}'
    )


def _block(name: str, records, last: bool = False) -> str:
    body = ",\n".join(records)
    sep = "" if last else ","
    if not body:
        return f'"{name}": []{sep}\n'
    return f'"{name}": [\n{body}\n]{sep}\n'


def dumps_graph(graph: MapGraph) -> str:
    parts = [
        "{\n",
        f'"format": "{FORMAT_NAME}",\n"version": {FORMAT_VERSION},\n',
        f'"descriptor_dim": {graph.descriptor_dim},\n',
        _block("points", (_point_record(graph, i) for i in range(graph.n_points))),
        _block("keypoints", (_kpt_record(graph, w) for w in range(graph.n_keypoints))),
        _block("images", (_image_record(im) for im in graph.images)),
        _block("edges_v", (f"[{a},{b}]" for a, b in graph.edges_v)),
        _block("edges_n", (f"[{a},{b}]" for a, b in graph.edges_n)),
        _block("edges_c", (f"[{a},{b}]" for a, b in graph.edges_c), last=True),
        "}\n",
    ]
    return "".join(parts)


def save_graph(graph: MapGraph, path) -> None:
    path = os.fspath(path)
    with open(path, "w") as fh:
        fh.write(dumps_graph(graph))
    meta = {"D": graph.descriptor_dim, "k": graph.k, "seed": graph.seed}
    meta.update(graph.meta)
    with open(path + ".meta", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _ids_in_order(records, name):
    for pos, rec in enumerate(records):
        if not isinstance(rec, dict) or rec.get("id") != pos:
            raise GraphSchemaError(f"{name}[{pos}]: expected record with id {pos}")


def _parse_edges(doc, name):
    try:
        arr = np.array(doc[name], dtype=np.int64).reshape(-1, 2)
    except (KeyError, ValueError, TypeError) as exc:
        raise GraphSchemaError(f"{name}: malformed edge list ({exc})") from None
    return arr


def loads_graph(text: str, meta: dict | None = None) -> MapGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise GraphFormatError("line 1: not a mapcull graph document")
    try:
        dim = int(doc["descriptor_dim"])
        points, kpts, images = doc["points"], doc["keypoints"], doc["images"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphSchemaError(f"missing top-level field {exc}") from None
    for name, recs in (("points", points), ("keypoints", kpts), ("images", images)):
        _ids_in_order(recs, name)

    try:
        pos = np.array([r["position"] for r in points], dtype=np.float64).reshape(-1, 3)
        labels = np.array([-1 if r["label_gt"] is None else r["label_gt"] for r in points], dtype=np.int8)
        scores = np.array([np.nan if r["score"] is None else r["score"] for r in points], dtype=np.float64)
        obs_m = np.array([r["obs_count_map"] for r in points], dtype=np.int64)
        obs_q = np.array([r["obs_count_query"] for r in points], dtype=np.int64)
    except (KeyError, ValueError, TypeError) as exc:
        raise GraphSchemaError(f"points: malformed record ({exc})") from None

    for w, r in enumerate(kpts):
        if len(r.get("descriptor", ())) != dim:
            raise GraphSchemaError(f"keypoints[{w}]: descriptor dimension {len(r.get('descriptor', ()))} != {dim}")
    desc = np.array([r["descriptor"] for r in kpts], dtype=np.float64).reshape(-1, dim)
    pix = np.array([r["pixel"] for r in kpts], dtype=np.float64).reshape(-1, 2)
    try:
        origin = np.array([Origin[r["origin"]] for r in kpts], dtype=np.int8)
    except KeyError as exc:
        raise GraphSchemaError(f"keypoints: unknown origin {exc}") from None

    image_nodes = []
    for l, r in enumerate(images):
        try:
            k = r["intrinsics"]
            image_nodes.append(ImageNode(
                id=l,
                rotation=np.array(r["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.array(r["translation"], dtype=np.float64).reshape(3),
                intrinsics=Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                                      int(k["width"]), int(k["height"])),
                session=int(r["session"]), camera_id=int(r["camera_id"]),
                origin=Origin[r["origin"]], split=Split[r["split"]],
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise GraphSchemaError(f"images[{l}]: malformed record ({exc})") from None

    meta = dict(meta or {})
    k_val = int(meta.pop("k", 9))
    seed = meta.pop("seed", None)
    d_meta = meta.pop("D", dim)
    if d_meta != dim:
        raise GraphSchemaError(f"sidecar D={d_meta} disagrees with descriptor_dim={dim}")
    g = MapGraph(
        positions=pos, descriptors=desc, pixels=pix, kpt_origin=origin, images=image_nodes,
        edges_v=_parse_edges(doc, "edges_v"), edges_n=_parse_edges(doc, "edges_n"),
        edges_c=_parse_edges(doc, "edges_c"), obs_count_map=obs_m, obs_count_query=obs_q,
        labels=labels, scores=scores, k=k_val, seed=seed, meta=meta,
    )
    for name, arr, (hi_a, hi_b) in (
        ("edges_v", g.edges_v, (g.n_keypoints, g.n_points)),
        ("edges_n", g.edges_n, (g.n_points, g.n_points)),
        ("edges_c", g.edges_c, (g.n_keypoints, g.n_images)),
    ):
        bad = np.flatnonzero((arr[:, 0] < 0) | (arr[:, 0] >= hi_a) | (arr[:, 1] < 0) | (arr[:, 1] >= hi_b))
        if len(bad):
            raise GraphSchemaError(f"{name}[{bad[0]}]: references a missing node {arr[bad[0]].tolist()}")
    return g


def load_graph(path) -> MapGraph:
    path = os.fspath(path)
    with open(path) as fh:
        text = fh.read()
    meta = None
    if os.path.exists(path + ".meta"):
        with open(path + ".meta") as fh:
            meta = json.load(fh)
    return loads_graph(text, meta)
