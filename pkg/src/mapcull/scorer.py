"""Point-importance scorer: descriptor gathering, neighborhood layer, MLP head.

    f_desc^i = LeakyReLU(W1 * sum_{w -> i} f_kpt^w + b1)          (g1)
    f_knn^i  = g2({f_desc^j : j in {i} U kNN(i)})                  (g2)
    s^i      = sigmoid(MLP(f_knn^i))                               (g3)

g2 is one of: multi-head graph attention with heads merged by summation
(default) or by mean + LeakyReLU, symmetric-normalized graph convolution, or
a mean-aggregating SAGE layer.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .graph import MapGraph, Subgraph, closure, scorable_points

CKPT_MAGIC = b"MAPCULL-CKPT"
CKPT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ScorerConfig:
    descriptor_dim: int = 32
    hidden_dim: int = 64  # F
    out_dim: int = 64  # F+
    g2: str = "gat"  # gat | graphconv | sage
    heads: int = 4
    head_merge: str = "sum"  # sum | mean (gat only)
    slope: float = 0.1

    def __post_init__(self):
        if self.g2 not in ("gat", "graphconv", "sage"):
            raise ConfigurationError(f"unknown g2 layer {self.g2!r}")
        if self.head_merge not in ("sum", "mean"):
            raise ConfigurationError(f"unknown head merge {self.head_merge!r}")
        if self.out_dim < 2 or self.heads < 1:
            raise ConfigurationError("out_dim must be >= 2 and heads >= 1")


def _param_shapes(cfg: ScorerConfig) -> dict:
    D, F, Fp, H = cfg.descriptor_dim, cfg.hidden_dim, cfg.out_dim, cfg.heads
    shapes = {"g1.W": (D, F), "g1.b": (F,)}
    if cfg.g2 == "gat":
        shapes.update({"g2.W": (F, H * Fp), "g2.a_src": (H, Fp), "g2.a_dst": (H, Fp)})
    elif cfg.g2 == "graphconv":
        shapes["g2.W"] = (F, Fp)
    else:
        shapes.update({"g2.W_self": (F, Fp), "g2.W_nb": (F, Fp)})
    shapes.update({
        "g3.W1": (Fp, Fp), "g3.b1": (Fp,),
        "g3.W2": (Fp, Fp // 2), "g3.b2": (Fp // 2,),
        "g3.W3": (Fp // 2, 1), "g3.b3": (1,),
    })
    return shapes


class ScorerModel:
    def __init__(self, config: ScorerConfig, params: dict):
        self.config = config
        shapes = _param_shapes(config)
        if set(params) != set(shapes):
            raise ConfigurationError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != tuple(shape):
                raise ConfigurationError(f"{name}: shape {np.shape(params[name])} != {shape}")
        self.params = {name: np.array(params[name], dtype=np.float64) for name in shapes}

    @classmethod
    def init(cls, config: ScorerConfig, seed: int = 0) -> "ScorerModel":
        """Glorot-uniform weights from a seeded generator, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            if name.split(".")[1].startswith("b"):
                params[name] = np.zeros(shape)
                continue
            if name.startswith("g2.a_"):
                fan_in, fan_out = 2 * shape[1], 1
            elif name == "g2.W" and config.g2 == "gat":
                fan_in, fan_out = shape[0], config.out_dim
            else:
                fan_in, fan_out = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-lim, lim, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ScorerConfig) -> "ScorerModel":
        return cls(config, {n: np.zeros(s) for n, s in _param_shapes(config).items()})

    def copy(self) -> "ScorerModel":
        return ScorerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def __eq__(self, other):
        if not isinstance(other, ScorerModel):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params)


# -- layers ---------------------------------------------------------------------

def g1_forward(model: ScorerModel, sub: Subgraph, P: dict) -> ad.Var:
    """Descriptor-gathering layer over all neighbor points of the subgraph."""
    d = sub.descriptor_sums.shape[1]
    if d != model.config.descriptor_dim:
        raise ConfigurationError(
            f"graph descriptors have dimension {d}, model expects {model.config.descriptor_dim}")
    x = P["g1.W"].tape.const(sub.descriptor_sums)
    return ad.leaky_relu(ad.linear(x, P["g1.W"], P["g1.b"]), model.config.slope)


def _slot_info(sub: Subgraph):
    mask = sub.slots >= 0
    filled = np.where(mask, sub.slots, sub.center_local[:, None])
    return mask, filled


def gat_forward(model: ScorerModel, h: ad.Var, sub: Subgraph, P: dict, merge: str | None = None) -> ad.Var:
    """Multi-head attention over {i} U kNN(i).

    Uses sum_h sum_j alpha_ij W_h h_j = sum_h W_h (sum_j alpha_ij h_j), and the
    logit terms a_h . W_h h = h . (W_h^T a_h), so W_h is applied once per center.
    """
    cfg = model.config
    merge = merge or cfg.head_merge
    mask, filled = _slot_info(sub)
    u_src = ad.head_project(P["g2.W"], P["g2.a_src"], cfg.out_dim)
    u_dst = ad.head_project(P["g2.W"], P["g2.a_dst"], cfg.out_dim)
    s_src = ad.rowmm(h, u_src)  # (n_sub, H): a_src . W h_i
    s_dst = ad.rowmm(h, u_dst)  # (n_sub, H): a_dst . W h_j
    e_i = ad.reshape(ad.take(s_src, sub.center_local), (len(sub.center_local), 1, cfg.heads))
    e = ad.leaky_relu(ad.add(e_i, ad.take(s_dst, filled)), cfg.slope)
    alpha = ad.masked_softmax(e, mask)
    agg = ad.attend(alpha, ad.take(h, filled))  # (n_c, H, F)
    flat = ad.reshape(agg, (agg.shape[0], cfg.heads * cfg.hidden_dim))
    out = ad.rowmm(flat, ad.restack_heads(P["g2.W"], cfg.heads))
    if merge == "mean":
        return ad.leaky_relu(ad.scale(out, 1.0 / cfg.heads), cfg.slope)
    return out


def gat_forward_meanvariant(model, h, sub, P) -> ad.Var:
    return gat_forward(model, h, sub, P, merge="mean")


def attention_weights(model: ScorerModel, sub: Subgraph) -> np.ndarray:
    """alpha of shape (n_center, slots, heads); zeros on padded slots."""
    tape = ad.Tape(record=False)
    P = {k: tape.const(v) for k, v in model.params.items()}
    h = g1_forward(model, sub, P)
    cfg = model.config
    mask, filled = _slot_info(sub)
    s_src = ad.rowmm(h, ad.head_project(P["g2.W"], P["g2.a_src"], cfg.out_dim))
    s_dst = ad.rowmm(h, ad.head_project(P["g2.W"], P["g2.a_dst"], cfg.out_dim))
    e_i = ad.reshape(ad.take(s_src, sub.center_local), (len(sub.center_local), 1, cfg.heads))
    e = ad.leaky_relu(ad.add(e_i, ad.take(s_dst, filled)), cfg.slope)
    return ad.masked_softmax(e, mask).value


def graphconv_forward(model: ScorerModel, h: ad.Var, sub: Subgraph, P: dict) -> ad.Var:
    """LeakyReLU(W sum_j h_j / sqrt((|N(i)|+1)(|N(j)|+1))) over j in {i} U N(i)."""
    mask, filled = _slot_info(sub)
    deg_i = sub.neighbor_degree[sub.center_local].astype(float)
    deg_j = sub.neighbor_degree[filled].astype(float)
    c = np.where(mask, 1.0 / np.sqrt((deg_i[:, None] + 1.0) * (deg_j + 1.0)), 0.0)
    agg = ad.weighted_sum(c, ad.take(h, filled))
    return ad.leaky_relu(ad.rowmm(agg, P["g2.W"]), model.config.slope)


def sageconv_forward(model: ScorerModel, h: ad.Var, sub: Subgraph, P: dict) -> ad.Var:
    """LeakyReLU(W_self h_i + W_nb mean_{j in N(i)} h_j); empty mean is zero."""
    mask, filled = _slot_info(sub)
    nb = mask & (filled != sub.center_local[:, None])
    cnt = nb.sum(axis=1)
    c = np.where(nb, 1.0 / np.maximum(cnt, 1)[:, None], 0.0)
    mean_nb = ad.weighted_sum(c, ad.take(h, filled))
    h_self = ad.take(h, sub.center_local)
    pre = ad.add(ad.rowmm(h_self, P["g2.W_self"]), ad.rowmm(mean_nb, P["g2.W_nb"]))
    return ad.leaky_relu(pre, model.config.slope)


def g3_forward(model: ScorerModel, f: ad.Var, P: dict) -> ad.Var:
    s = model.config.slope
    x = ad.leaky_relu(ad.linear(f, P["g3.W1"], P["g3.b1"]), s)
    x = ad.leaky_relu(ad.linear(x, P["g3.W2"], P["g3.b2"]), s)
    x = ad.linear(x, P["g3.W3"], P["g3.b3"])
    return ad.sigmoid(ad.reshape(x, (x.shape[0],)))


def forward(model: ScorerModel, sub: Subgraph, tape: ad.Tape | None = None):
    """Scores of ``sub.center_points`` as a Var, plus the parameter Vars."""
    if tape is None:
        tape = ad.Tape(record=False)
    P = {k: tape.param(v) for k, v in model.params.items()}
    h = g1_forward(model, sub, P)
    g2 = model.config.g2
    if g2 == "gat":
        f = gat_forward(model, h, sub, P)
    elif g2 == "graphconv":
        f = graphconv_forward(model, h, sub, P)
    else:
        f = sageconv_forward(model, h, sub, P)
    return g3_forward(model, f, P), P


def predict_scores(model: ScorerModel, sub: Subgraph) -> np.ndarray:
    scores, _ = forward(model, sub)
    return scores.value


def score_graph(model: ScorerModel, graph: MapGraph, chunk: int = 1024) -> np.ndarray:
    """Scores for every point; points without MAP observations get 0."""
    out = np.zeros(graph.n_points)
    pts = scorable_points(graph)
    for lo in range(0, len(pts), chunk):
        sub = closure(graph, pts[lo:lo + chunk], keep_descriptors=False)
        out[sub.center_points] = predict_scores(model, sub)
    return out


# -- checkpoints --------------------------------------------------------------

def dumps_checkpoint(model: ScorerModel, extra: dict | None = None) -> bytes:
    names = list(model.params)
    header = {
        "version": CKPT_VERSION,
        "config": asdict(model.config),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for n in names:
        buf.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes):
    if not data.startswith(CKPT_MAGIC):
        raise ConfigurationError("not a mapcull checkpoint")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != CKPT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        params[t["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(t["shape"]).copy()
        off += 8 * n
    if off != len(data):
        raise ConfigurationError("trailing bytes in checkpoint")
    return ScorerModel(ScorerConfig(**header["config"]), params), header["extra"]


def save_checkpoint(model: ScorerModel, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(model, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
