"""Losses, AdamW and the epoch loop for the point scorer."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import EmptySubgraphError, MapGraph, Origin, Split, Subgraph, sample_subgraph
from .scorer import ScorerModel, forward, save_checkpoint

BCE_EPS = 1e-7


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    K: float = 30
    lambda_l1: float = 0.01
    use_bce: bool = True
    use_kc: bool = True

    def __post_init__(self):
        if not (self.use_bce or self.use_kc):
            raise ValueError("at least one loss term must be enabled")
        if self.K <= 0 or self.lambda_l1 < 0:
            raise ValueError("K must be positive and lambda_l1 nonnegative")

    @classmethod
    def from_name(cls, name: str, **kw) -> "LossConfig":
        if name not in ("both", "bce", "kc"):
            raise ValueError(f"unknown loss {name!r}")
        return cls(use_bce=name != "kc", use_kc=name != "bce", **kw)


def bce_loss(scores: ad.Var, labels: np.ndarray):
    """Mean clamped binary cross-entropy over entries with label 0/1.

    Returns (loss, has_labels); the loss is a constant 0 when nothing is labeled.
    """
    labels = np.asarray(labels)
    sel = np.flatnonzero(labels >= 0)
    if len(sel) == 0:
        return scores.tape.const(0.0), False
    y = labels[sel].astype(np.float64)
    s = ad.clip(ad.take(scores, sel), BCE_EPS, 1.0 - BCE_EPS)
    terms = ad.add(ad.mul(ad.log(s), y), ad.mul(ad.log(ad.sub(1.0, s)), 1.0 - y))
    return ad.scale(ad.mean(terms), -1.0), True


def kcover_loss(scores: ad.Var, cfg: LossConfig) -> ad.Var:
    """|K - sum_{i in phi_l} s_i| + lambda * sum_i s_i over the batch's center points."""
    total = ad.total(scores)
    return ad.add(ad.absolute(ad.sub(total, float(cfg.K))), ad.scale(total, cfg.lambda_l1))


def total_loss(bce: ad.Var | None, kc: ad.Var | None) -> ad.Var:
    terms = [t for t in (bce, kc) if t is not None]
    for name, t in (("bce", bce), ("kc", kc)):
        if t is not None and not np.isfinite(t.value):
            raise NumericalError(f"{name} loss is not finite ({t.value})")
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def batch_loss(model: ScorerModel, sub: Subgraph, cfg: LossConfig, use_labels: bool,
               tape: ad.Tape | None = None):
    """Forward one subgraph; returns (loss Var, param Vars, term values dict)."""
    if tape is None:
        tape = ad.Tape()
    scores, P = forward(model, sub, tape)
    bce = kc = None
    terms = {"bce": 0.0, "kc": 0.0}
    if cfg.use_bce and use_labels:
        bce, has = bce_loss(scores, sub.labels)
        if not has:
            bce = None
        else:
            terms["bce"] = float(bce.value)
    if cfg.use_kc:
        kc = kcover_loss(scores, cfg)
        terms["kc"] = float(kc.value)
    if bce is None and kc is None:
        return None, P, terms
    return total_loss(bce, kc), P, terms


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState) -> dict:
    """Decoupled weight decay Adam; returns new parameter arrays, updates state in place."""
    for name, g in grads.items():
        if g is not None and np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {np.shape(params[name])}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p = p * (1.0 - state.lr * state.weight_decay)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# -- epoch loop ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    loss: LossConfig = LossConfig()


@dataclass
class TrainResult:
    best_model: ScorerModel
    best_epoch: int
    best_metric: float
    log: list  # dict rows: epoch, step, bce, kc, total, val_metric


def _anchors(graph: MapGraph):
    """MAP images with a non-empty subgraph, and whether each lies in the training area."""
    out = []
    for l in graph.images_of(Origin.MAP):
        try:
            sub = sample_subgraph(graph, int(l), keep_descriptors=False)
        except EmptySubgraphError:
            continue
        out.append((sub, graph.images[l].split == Split.TRAIN))
    return out


def loss_metric(model: ScorerModel, batches, cfg: LossConfig) -> float:
    """Negative mean loss over (subgraph, use_labels) pairs; used when no validator is given."""
    vals = []
    for sub, use_labels in batches:
        loss, _, _ = batch_loss(model, sub, cfg, use_labels, ad.Tape(record=False))
        if loss is not None:
            vals.append(float(loss.value))
    return -float(np.mean(vals)) if vals else 0.0


def train(graphs, model: ScorerModel, config: TrainConfig = TrainConfig(), seed: int = 0,
          validate=None, out_dir=None, progress=None) -> TrainResult:
    """Train on every MAP image of every graph, one subgraph per step.

    BCE uses labels only when the anchor image lies in the training split; the
    coverage term applies to every anchor. ``validate(model, epoch) -> float``
    picks the best epoch (higher is better, earliest wins ties).
    """
    if isinstance(graphs, MapGraph):
        graphs = [graphs]
    batches = [b for g in graphs for b in _anchors(g)]
    if not batches:
        raise EmptySubgraphError("no map image has observed points")
    if validate is None:
        val_batches = [(sub, True) for g in graphs for sub, _ in _anchors_split(g, Split.VALID)]
        validate = lambda m, epoch: loss_metric(m, val_batches or batches, config.loss)  # noqa: E731

    rng = np.random.default_rng(seed)
    state = OptimState(config.lr, config.beta1, config.beta2, config.weight_decay, config.eps)
    params = {k: v.copy() for k, v in model.params.items()}
    best = (model.copy(), 0, -np.inf)
    log = []
    step = 0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(1, config.epochs + 1):
        sums = {"bce": 0.0, "kc": 0.0, "total": 0.0}
        for idx in rng.permutation(len(batches)):
            sub, use_labels = batches[idx]
            tape = ad.Tape()
            current = ScorerModel(model.config, params)
            loss, P, terms = batch_loss(current, sub, config.loss, use_labels, tape)
            step += 1
            if loss is None:
                continue
            if not np.isfinite(loss.value):
                raise NumericalError(f"loss diverged at epoch {epoch}, step {step}")
            ad.backward(tape, loss)
            params = adamw_step(params, {k: P[k].grad for k in params}, state)
            for k in ("bce", "kc"):
                sums[k] += terms[k]
            sums["total"] += float(loss.value)
        current = ScorerModel(model.config, params)
        metric = float(validate(current, epoch))
        n = len(batches)
        row = {"epoch": epoch, "step": step, "bce": sums["bce"] / n, "kc": sums["kc"] / n,
               "total": sums["total"] / n, "val_metric": metric}
        log.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None:
            save_checkpoint(current, os.path.join(out_dir, f"ckpt_epoch{epoch}.bin"),
                            extra={"epoch": epoch, "val_metric": metric, "seed": seed})
        if metric > best[2]:
            best = (current.copy(), epoch, metric)
    if out_dir is not None:
        write_metrics_csv(log, os.path.join(out_dir, "metrics.csv"))
    return TrainResult(best[0], best[1], best[2], log)


def _anchors_split(graph: MapGraph, split: Split):
    return [(sub, ok) for sub, ok in _anchors(graph) if graph.images[sub.anchor_image].split == split]


def write_metrics_csv(log, path) -> None:
    cols = ["epoch", "step", "bce", "kc", "total", "val_metric"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in log:
            w.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in cols])
