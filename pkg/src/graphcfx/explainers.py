"""Counterfactual search for the GCN oracle.

Two gradient-driven explainers share one recipe: attach a relaxed
multiplicative mask to the 2-hop subgraph of the target (edge mask for
structure, feature-scaling matrix for words), descend on a flip objective
plus a sparsity term, binarize after every step, and keep the sparsest
binarized edit whose full-graph prediction differs from the factual class.
Both can only remove: the mask multiplies existing entries, so edges and
words are never added.

:func:`brute_force_counterfactual` exhaustively enumerates small edit sets
and serves as the minimality oracle in tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .gcn import Adam, GcnModel, loss_and_grad, predict
from .graphs import (
    Graph,
    GraphView,
    canonical_edge,
    dense_adjacency,
    feature_row,
    khop_subgraph,
    normalize_adjacency_backward,
    normalize_adjacency_matrix,
    normalized_adjacency,
)

__all__ = [
    "ExplainerParams",
    "CounterfactualResult",
    "BruteForceRefused",
    "explain_structure",
    "explain_features",
    "validate_counterfactual",
    "brute_force_counterfactual",
    "result_view",
]


class BruteForceRefused(ValueError):
    """The instance exceeds the exhaustive search bounds."""


@dataclass(frozen=True)
class ExplainerParams:
    """Optimization knobs shared by both explainers.

    perturb_scope applies to the feature explainer only: "target" perturbs
    just the target's row, "subgraph" perturbs every row of the 2-hop
    subgraph.
    """

    max_iters: int = 500
    mask_learning_rate: float = 0.1
    beta: float = 0.5
    binarize_threshold: float = 0.5
    khop: int = 2
    perturb_scope: str = "target"
    mask_init: float = 3.0

    def __post_init__(self):
        if self.max_iters < 1 or self.mask_learning_rate <= 0:
            raise ValueError("max_iters and mask_learning_rate must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.binarize_threshold < 1:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        if self.khop < 1:
            raise ValueError("khop must be positive")
        if self.perturb_scope not in ("target", "subgraph"):
            raise ValueError("perturb_scope must be 'target' or 'subgraph'")


@dataclass(frozen=True)
class CounterfactualResult:
    """A validated minimal-effort edit that flips the oracle on the target.

    Structure kind: `deleted_edges` holds original-id pairs. Feature kind:
    `removed_words` holds word indices cleared on the target's row;
    `neighbor_removed_words` holds removals on other rows when the feature
    explainer ran subgraph-wide. `distance` counts every removed edge/bit.
    """

    target: int
    kind: str
    factual_class: int
    counterfactual_class: int
    distance: int
    iterations_used: int
    deleted_edges: frozenset = frozenset()
    removed_words: frozenset = frozenset()
    neighbor_removed_words: Mapping[int, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("structure", "feature"):
            raise ValueError(f"kind must be 'structure' or 'feature', got {self.kind!r}")
        if self.factual_class == self.counterfactual_class:
            raise ValueError("counterfactual class must differ from the factual class")
        deleted = frozenset(canonical_edge(int(u), int(v)) for u, v in self.deleted_edges)
        removed = frozenset(int(w) for w in self.removed_words)
        nbr = {int(n): frozenset(int(w) for w in ws)
               for n, ws in dict(self.neighbor_removed_words).items() if ws}
        if self.kind == "structure":
            if removed or nbr:
                raise ValueError("structure results cannot carry word removals")
            edits = len(deleted)
        else:
            if deleted:
                raise ValueError("feature results cannot carry edge deletions")
            if self.target in nbr:
                raise ValueError("target removals belong in removed_words")
            edits = len(removed) + sum(len(ws) for ws in nbr.values())
        if self.distance != edits:
            raise ValueError(f"distance {self.distance} != number of edits {edits}")
        if self.distance < 1:
            raise ValueError("a counterfactual must change at least one edge or word")
        object.__setattr__(self, "deleted_edges", deleted)
        object.__setattr__(self, "removed_words", removed)
        object.__setattr__(self, "neighbor_removed_words", nbr)

    def to_json_dict(self) -> dict:
        out = {
            "target": self.target,
            "kind": self.kind,
            "factual_class": self.factual_class,
            "counterfactual_class": self.counterfactual_class,
            "distance": self.distance,
            "iterations_used": self.iterations_used,
            "deleted_edges": sorted([list(e) for e in self.deleted_edges]),
            "removed_words": sorted(self.removed_words),
        }
        if self.neighbor_removed_words:
            out["neighbor_removed_words"] = {
                str(n): sorted(ws) for n, ws in sorted(self.neighbor_removed_words.items())
            }
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "CounterfactualResult":
        return cls(
            target=int(d["target"]),
            kind=d["kind"],
            factual_class=int(d["factual_class"]),
            counterfactual_class=int(d["counterfactual_class"]),
            distance=int(d["distance"]),
            iterations_used=int(d["iterations_used"]),
            deleted_edges=frozenset(tuple(e) for e in d.get("deleted_edges", [])),
            removed_words=frozenset(d.get("removed_words", [])),
            neighbor_removed_words={
                int(n): frozenset(ws)
                for n, ws in d.get("neighbor_removed_words", {}).items()
            },
        )


def result_view(g: Graph, result: CounterfactualResult) -> GraphView:
    """Reconstruct the counterfactual graph described by a result."""
    if result.kind == "structure":
        return GraphView(g, deleted_edges=result.deleted_edges)
    overrides = {}
    removals = dict(result.neighbor_removed_words)
    if result.removed_words:
        removals[result.target] = result.removed_words
    for node, words in removals.items():
        row = np.array(g.features[node])
        for w in words:
            if not 0 <= w < g.feature_dim:
                raise ValueError(f"word index {w} out of range")
            if row[w] != 1.0:
                raise ValueError(f"word {w} not present on node {node}")
            row[w] = 0.0
        overrides[node] = row
    return GraphView(g, feature_overrides=overrides)


def _check_model(model: GcnModel, g: Graph):
    if model.feature_dim != g.feature_dim or model.class_count != g.class_count:
        raise ValueError(
            f"model dims ({model.feature_dim}, {model.class_count}) do not match "
            f"graph dims ({g.feature_dim}, {g.class_count})"
        )


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def explain_structure(
    model: GcnModel, g: Graph, v: int, params: ExplainerParams = ExplainerParams()
) -> Optional[CounterfactualResult]:
    """Edge-deletion counterfactual via a trainable mask over subgraph edges.

    A sigmoid-relaxed mask multiplies the 2-hop subgraph's adjacency; every
    iteration renormalizes the masked operator, steps the mask logits
    against the factual class (while the binarized prediction still equals
    it) plus a beta-weighted deletion penalty, then binarizes and tests the
    candidate edit on the full graph. Returns the sparsest verified flip,
    or None when none is found within max_iters.
    """
    _check_model(model, g)
    factual = predict(model, g, v)
    sub, node_ids = khop_subgraph(g, v, params.khop)
    sub_edges = sorted(sub.edges)
    if not sub_edges:
        return None
    v_loc = int(np.searchsorted(node_ids, v))
    rows = np.array([e[0] for e in sub_edges])
    cols = np.array([e[1] for e in sub_edges])
    x_sub = sub.features
    onehot = np.zeros((1, model.class_count))
    onehot[0, factual] = 1.0

    logits = np.full(len(sub_edges), params.mask_init)
    opt = Adam([logits.shape], lr=params.mask_learning_rate)
    n_sub = sub.node_count
    best = None  # (distance, deleted original-id edges, flipped class)
    gate = True
    last_deleted: frozenset = frozenset()
    iters_run = 0

    for it in range(1, params.max_iters + 1):
        iters_run = it
        s = _sigmoid(logits)
        a_rel = np.zeros((n_sub, n_sub))
        a_rel[rows, cols] = s
        a_rel[cols, rows] = s
        if gate:
            a_hat = normalize_adjacency_matrix(a_rel)
            _, grads = loss_and_grad(model, a_hat, x_sub, [v_loc], onehot, wrt=("a_hat",))
            ga = normalize_adjacency_backward(a_rel, grads.a_hat)
            # Minimize log p(factual): ascend the factual NLL through the
            # tied symmetric entries.
            d_sig = -(ga[rows, cols] + ga[cols, rows])
        else:
            d_sig = np.zeros_like(s)
        d_sig = d_sig - params.beta
        (logits,) = opt.step([logits], [d_sig * s * (1.0 - s)])

        keep = _sigmoid(logits) >= params.binarize_threshold
        deleted = frozenset(
            canonical_edge(int(node_ids[rows[i]]), int(node_ids[cols[i]]))
            for i in np.flatnonzero(~keep)
        )
        if deleted != last_deleted:
            last_deleted = deleted
            if deleted:
                pred = predict(model, GraphView(g, deleted_edges=deleted), v)
            else:
                pred = factual
            gate = pred == factual
            if pred != factual and (best is None or len(deleted) < best[0]):
                best = (len(deleted), deleted, pred)
                if best[0] == 1:
                    break  # distance 1 is the global minimum

    if best is None:
        return None
    return CounterfactualResult(
        target=v,
        kind="structure",
        factual_class=factual,
        counterfactual_class=best[2],
        distance=best[0],
        iterations_used=iters_run,
        deleted_edges=best[1],
    )


def explain_features(
    model: GcnModel, g: Graph, v: int, params: ExplainerParams = ExplainerParams()
) -> Optional[CounterfactualResult]:
    """Word-removal counterfactual via a feature-scaling matrix in [0, 1].

    The scaling matrix starts at all ones (the factual graph), multiplies
    the perturbed rows elementwise with the oracle's weights frozen, and is
    projected back into [0, 1] after every step. Because 0 · p = 0 the
    counterfactual word set is always a subset of the factual one.
    """
    _check_model(model, g)
    factual = predict(model, g, v)
    sub, node_ids = khop_subgraph(g, v, params.khop)
    v_loc = int(np.searchsorted(node_ids, v))
    if params.perturb_scope == "target":
        perturb_rows = np.array([v_loc])
    else:
        perturb_rows = np.arange(sub.node_count)
    x_sub = sub.features
    orig = x_sub[perturb_rows]  # originally-present word mask
    if orig.sum() == 0:
        return None  # nothing to remove
    a_hat = normalized_adjacency(sub)
    onehot = np.zeros((1, model.class_count))
    onehot[0, factual] = 1.0

    p = np.ones_like(orig)
    opt = Adam([p.shape], lr=params.mask_learning_rate)
    best = None  # (distance, {original node id -> removed word indices}, flipped class)
    gate = True
    last_removed: frozenset = frozenset()
    iters_run = 0

    for it in range(1, params.max_iters + 1):
        iters_run = it
        x_pert = np.array(x_sub)
        x_pert[perturb_rows] = orig * p
        if gate:
            _, grads = loss_and_grad(model, a_hat, x_pert, [v_loc], onehot, wrt=("x",))
            d_p = -(grads.x[perturb_rows] * orig)
        else:
            d_p = np.zeros_like(p)
        d_p = d_p - params.beta * orig
        (p,) = opt.step([p], [d_p])
        p = np.clip(p, 0.0, 1.0)

        removed = frozenset(
            (int(node_ids[perturb_rows[r]]), int(w))
            for r, w in zip(*np.nonzero((orig == 1.0) & (p < params.binarize_threshold)))
        )
        if removed != last_removed:
            last_removed = removed
            if removed:
                by_node: dict[int, set] = {}
                for node, w in removed:
                    by_node.setdefault(node, set()).add(w)
                overrides = {}
                for node, words in by_node.items():
                    row = np.array(g.features[node])
                    row[sorted(words)] = 0.0
                    overrides[node] = row
                pred = predict(model, GraphView(g, feature_overrides=overrides), v)
            else:
                by_node = {}
                pred = factual
            gate = pred == factual
            if pred != factual and (best is None or len(removed) < best[0]):
                best = (len(removed), {n: frozenset(ws) for n, ws in by_node.items()}, pred)
                if best[0] == 1:
                    break

    if best is None:
        return None
    removals = dict(best[1])
    target_words = removals.pop(v, frozenset())
    return CounterfactualResult(
        target=v,
        kind="feature",
        factual_class=factual,
        counterfactual_class=best[2],
        distance=best[0],
        iterations_used=iters_run,
        removed_words=target_words,
        neighbor_removed_words=removals,
    )


def validate_counterfactual(model: GcnModel, g: Graph, result: CounterfactualResult) -> bool:
    """Re-run the oracle on the reconstructed view against the full graph.

    True iff the edit is nonempty, reconstructible, flips the prediction
    away from the recorded factual class, and lands on the recorded
    counterfactual class. Never raises: any mismatch returns False.
    """
    try:
        if result.distance < 1 or result.factual_class == result.counterfactual_class:
            return False
        view = result_view(g, result)
        pred = predict(model, view, result.target)
    except (ValueError, IndexError, KeyError):
        return False
    return pred != result.factual_class and pred == result.counterfactual_class


def brute_force_counterfactual(
    model: GcnModel, g: Graph, v: int, kind: str, budget: int = 2
) -> Optional[CounterfactualResult]:
    """Exhaustive minimal counterfactual over edit subsets of size <= budget.

    Independent of the gradient explainers: plain enumeration in ascending
    subset size, so the first hit is globally minimal. Refuses instances
    beyond budget 2, 20 edges (structure), or 16 target words (feature).
    """
    _check_model(model, g)
    if kind not in ("structure", "feature"):
        raise ValueError(f"kind must be 'structure' or 'feature', got {kind!r}")
    if not 1 <= budget <= 2:
        raise BruteForceRefused(f"budget {budget} outside supported range [1, 2]")
    factual = predict(model, g, v)
    evaluations = 0

    if kind == "structure":
        edges = sorted(g.edges)
        if len(edges) > 20:
            raise BruteForceRefused(f"{len(edges)} edges exceeds the 20-edge bound")
        for size in range(1, budget + 1):
            for combo in itertools.combinations(edges, size):
                evaluations += 1
                pred = predict(model, GraphView(g, deleted_edges=frozenset(combo)), v)
                if pred != factual:
                    return CounterfactualResult(
                        target=v,
                        kind="structure",
                        factual_class=factual,
                        counterfactual_class=pred,
                        distance=size,
                        iterations_used=evaluations,
                        deleted_edges=frozenset(combo),
                    )
        return None

    words = [int(w) for w in np.flatnonzero(feature_row(g, v))]
    if len(words) > 16:
        raise BruteForceRefused(f"{len(words)} target words exceeds the 16-word bound")
    for size in range(1, budget + 1):
        for combo in itertools.combinations(words, size):
            evaluations += 1
            row = np.array(g.features[v])
            row[list(combo)] = 0.0
            pred = predict(model, GraphView(g, feature_overrides={v: row}), v)
            if pred != factual:
                return CounterfactualResult(
                    target=v,
                    kind="feature",
                    factual_class=factual,
                    counterfactual_class=pred,
                    distance=size,
                    iterations_used=evaluations,
                    removed_words=frozenset(combo),
                )
    return None
