"""Two-layer graph convolutional classifier with hand-rolled gradients.

The model is softmax(Â · relu(Â X W1 + b1) · W2 + b2). Training is
full-batch, deterministic per seed, and uses adaptive-moment gradient
descent. :func:`loss_and_grad` exposes analytic gradients with respect to
the weights, the propagation matrix entries, and the feature entries; the
counterfactual explainers differentiate through it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import (
    Graph,
    GraphView,
    degrees,
    feature_matrix,
    feature_row,
    neighbors,
    normalized_adjacency,
)

log = logging.getLogger(__name__)

__all__ = [
    "GcnModel",
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "Gradients",
    "Adam",
    "init_model",
    "forward",
    "loss_and_grad",
    "train",
    "predict",
    "node_probabilities",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


@dataclass(frozen=True)
class GcnModel:
    """Weights of the 2-layer GCN; immutable once built."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        b2 = np.asarray(self.b2, dtype=np.float64)
        if w1.ndim != 2 or w2.ndim != 2:
            raise ValueError("w1 and w2 must be matrices")
        if b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
            raise ValueError("bias shapes inconsistent with weight shapes")
        if w1.shape[1] != w2.shape[0]:
            raise ValueError("hidden dimensions of w1 and w2 disagree")
        for arr in (w1, b1, w2, b2):
            if not np.isfinite(arr).all():
                raise ValueError("model weights must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def class_count(self) -> int:
        return self.w2.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.001
    hidden_dim: int = 16
    weight_init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0 or self.hidden_dim <= 0 or self.weight_init_scale <= 0:
            raise ValueError("learning_rate, hidden_dim, weight_init_scale must be positive")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)


@dataclass
class Gradients:
    """Gradients requested from :func:`loss_and_grad`; unrequested slots stay None."""

    w1: np.ndarray | None = None
    b1: np.ndarray | None = None
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None
    a_hat: np.ndarray | None = None
    x: np.ndarray | None = None


class Adam:
    """Adaptive-moment gradient descent on a list of arrays."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params, grads):
        """Return updated copies of `params` given matching `grads`."""
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def init_model(feature_dim: int, class_count: int, cfg: TrainConfig) -> GcnModel:
    """Seeded uniform (Glorot-limit) weight init scaled by cfg.weight_init_scale."""
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden_dim
    lim1 = cfg.weight_init_scale * np.sqrt(6.0 / (feature_dim + h))
    lim2 = cfg.weight_init_scale * np.sqrt(6.0 / (h + class_count))
    return GcnModel(
        w1=rng.uniform(-lim1, lim1, size=(feature_dim, h)),
        b1=np.zeros(h),
        w2=rng.uniform(-lim2, lim2, size=(h, class_count)),
        b2=np.zeros(class_count),
    )


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_parts(model, a_hat, x, m1=None):
    if m1 is None:
        m1 = a_hat @ x
    z1 = m1 @ model.w1 + model.b1
    h1 = np.maximum(z1, 0.0)
    m2 = a_hat @ h1
    z2 = m2 @ model.w2 + model.b2
    return m1, z1, h1, m2, z2, _softmax(z2)


def forward(model: GcnModel, a_hat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-node class probabilities; each row sums to 1."""
    a_hat = np.asarray(a_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a_hat.shape[0] != a_hat.shape[1] or a_hat.shape[0] != x.shape[0]:
        raise ValueError("a_hat must be square and row-aligned with x")
    if x.shape[1] != model.feature_dim:
        raise ValueError(f"x has {x.shape[1]} features, model expects {model.feature_dim}")
    return _forward_parts(model, a_hat, x)[5]


def _loss_and_grad_impl(model, a_hat, x, nodes, targets, wrt, m1=None):
    m1, z1, h1, m2, z2, p = _forward_parts(model, a_hat, x, m1=m1)
    n = a_hat.shape[0]
    k = len(nodes)

    # Mean cross-entropy over the designated nodes, via log-softmax.
    zs = z2[nodes] - z2[nodes].max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = float(-(targets * logp).sum() / k)

    dz2 = np.zeros_like(z2)
    dz2[nodes] = (p[nodes] - targets) / k

    grads = Gradients()
    want_w = "weights" in wrt
    want_a = "a_hat" in wrt
    want_x = "x" in wrt

    if want_w:
        grads.w2 = m2.T @ dz2
        grads.b2 = dz2.sum(axis=0)
    dm2 = dz2 @ model.w2.T
    dh1 = a_hat.T @ dm2
    dz1 = dh1 * (z1 > 0)
    if want_w:
        grads.w1 = m1.T @ dz1
        grads.b1 = dz1.sum(axis=0)
    if want_a or want_x:
        dm1 = dz1 @ model.w1.T
        if want_a:
            grads.a_hat = dm2 @ h1.T + dm1 @ x.T
        if want_x:
            grads.x = a_hat.T @ dm1
    return loss, grads, p


def loss_and_grad(
    model: GcnModel,
    a_hat: np.ndarray,
    x: np.ndarray,
    node_set,
    target_distribution: np.ndarray,
    wrt=("weights",),
) -> tuple[float, Gradients]:
    """Mean cross-entropy over `node_set` and its analytic gradients.

    Parameters
    ----------
    node_set : node ids the loss averages over
    target_distribution : (len(node_set), class_count) rows aligned with
        node_set order
    wrt : subset of {"weights", "a_hat", "x"} selecting which gradients to
        compute
    """
    nodes = np.asarray(list(node_set), dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("node_set must be nonempty")
    targets = np.asarray(target_distribution, dtype=np.float64)
    if targets.shape != (nodes.size, model.class_count):
        raise ValueError(
            f"target_distribution shape {targets.shape} != ({nodes.size}, {model.class_count})"
        )
    unknown = set(wrt) - {"weights", "a_hat", "x"}
    if unknown:
        raise ValueError(f"unknown wrt entries: {sorted(unknown)}")
    a_hat = np.asarray(a_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    loss, grads, _ = _loss_and_grad_impl(model, a_hat, x, nodes, targets, wrt)
    return loss, grads


def _one_hot(labels, class_count):
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train(g: Graph, masks, cfg: TrainConfig = TrainConfig()) -> tuple[GcnModel, TrainHistory]:
    """Full-batch training of the oracle on the train mask.

    Deterministic for a fixed seed. Raises :class:`TrainingError` if the
    loss goes non-finite; logs a warning when some class has no train node
    or when the final loss failed to improve on the initial one.
    """
    model = init_model(g.feature_dim, g.class_count, cfg)
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history

    train_idx = np.flatnonzero(masks.train)
    present = set(g.labels[train_idx].tolist())
    missing = [c for c in range(g.class_count) if c not in present]
    if missing:
        log.warning("classes with no train node: %s", missing)

    a_hat = normalized_adjacency(g)
    m1 = a_hat @ g.features  # structure and features are fixed; hoist Â·X
    targets = _one_hot(g.labels[train_idx], g.class_count)
    y_train = g.labels[train_idx]

    params = [model.w1, model.b1, model.w2, model.b2]
    opt = Adam([p.shape for p in params], lr=cfg.learning_rate)
    initial_loss = None
    for epoch in range(cfg.epochs):
        loss, grads, p = _loss_and_grad_impl(
            model, a_hat, g.features, train_idx, targets, wrt=("weights",), m1=m1
        )
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        if initial_loss is None:
            initial_loss = loss
        acc = float((p[train_idx].argmax(axis=1) == y_train).mean())
        history.train_loss.append(loss)
        history.train_accuracy.append(acc)
        params = opt.step(params, [grads.w1, grads.b1, grads.w2, grads.b2])
        model = GcnModel(*params)
        params = [model.w1, model.b1, model.w2, model.b2]

    if history.train_loss[-1] >= initial_loss:
        log.warning(
            "train loss did not improve: %.6f -> %.6f", initial_loss, history.train_loss[-1]
        )
    return model, history


def node_probabilities(model: GcnModel, g: Graph | GraphView, v: int) -> np.ndarray:
    """Class probabilities of node v on the full (possibly viewed) graph.

    Exact: only the 2-hop receptive field of v contributes to a 2-layer
    model, so the row is assembled from local neighborhoods instead of the
    dense n×n operator.
    """
    if not 0 <= v < g.node_count:
        raise IndexError(f"node id {v} out of range")
    d_tilde = degrees(g).astype(np.float64) + 1.0

    ring = sorted(neighbors(g, v) | {v})
    hidden = {}
    for j in ring:
        nbrs = sorted(neighbors(g, j))
        members = [j] + nbrs
        coefs = np.empty(len(members))
        coefs[0] = 1.0 / d_tilde[j]
        for idx, k in enumerate(nbrs, start=1):
            coefs[idx] = 1.0 / np.sqrt(d_tilde[j] * d_tilde[k])
        rows = np.stack([feature_row(g, k) for k in members])
        z1 = (coefs @ rows) @ model.w1 + model.b1
        hidden[j] = np.maximum(z1, 0.0)

    agg = hidden[v] / d_tilde[v]
    for j in ring:
        if j != v:
            agg = agg + hidden[j] / np.sqrt(d_tilde[v] * d_tilde[j])
    z2 = agg @ model.w2 + model.b2
    z2 = z2 - z2.max()
    e = np.exp(z2)
    return e / e.sum()


def predict(model: GcnModel, g: Graph | GraphView, v: int) -> int:
    """Argmax class for node v; ties break toward the lowest class id."""
    return int(np.argmax(node_probabilities(model, g, v)))


def accuracy(model: GcnModel, g: Graph | GraphView, mask: np.ndarray) -> float:
    """Fraction of masked nodes whose dense-forward argmax matches the label."""
    p = forward(model, normalized_adjacency(g), feature_matrix(g))
    idx = np.flatnonzero(mask)
    return float((p[idx].argmax(axis=1) == g.labels[idx]).mean())


def save_checkpoint(model: GcnModel, path: str | Path, cfg: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Persist weights plus a self-describing JSON header; bitwise round-trip."""
    meta = {
        "format": "graphcfx-gcn-checkpoint",
        "version": 1,
        "feature_dim": model.feature_dim,
        "hidden_dim": model.hidden_dim,
        "class_count": model.class_count,
    }
    if cfg is not None:
        meta["train_config"] = {
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "hidden_dim": cfg.hidden_dim,
            "weight_init_scale": cfg.weight_init_scale,
            "seed": cfg.seed,
        }
    if extra:
        meta["extra"] = extra
    with open(path, "wb") as fh:
        np.savez(
            fh,
            w1=model.w1,
            b1=model.b1,
            w2=model.w2,
            b2=model.b2,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        )


def load_checkpoint(path: str | Path) -> tuple[GcnModel, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format") != "graphcfx-gcn-checkpoint":
            raise ValueError(f"{path} is not a model checkpoint")
        model = GcnModel(w1=data["w1"], b1=data["b1"], w2=data["w2"], b2=data["b2"])
    return model, meta
