"""Factual/counterfactual graph pairs rendered as incident-style prompts.

Each node of the 2-hop neighborhood becomes two lines: its class and
connections, then its words. The counterfactual view is rendered with the
identical template over the identical node set, so the only textual
differences are the removed edges/words and the target's class. Templates
are versioned constants; bump TEMPLATE_VERSION on any wording change.
"""

from __future__ import annotations

from dataclasses import dataclass

from .explainers import CounterfactualResult, result_view
from .graphs import Graph, GraphView, khop_subgraph, neighbors
from .datasets import words_for_node
from .metrics import GroundTruth

__all__ = [
    "TEMPLATE_VERSION",
    "PromptBundle",
    "serialize_incident",
    "build_system_prompt",
    "build_cf_prompt",
]

TEMPLATE_VERSION = "1"

_SYSTEM_PROMPT = """\
You are an assistant that explains the behavior of a machine-learning \
classifier operating on graph data. Each node of the graph belongs to a \
class, carries a set of words, and is connected to other nodes. A \
counterfactual explanation contrasts the original (factual) graph with a \
minimally edited (counterfactual) graph for which the classifier assigns a \
different class to a designated target node; the removed connections or \
words reveal what the original prediction depended on. Your job is to read \
both graphs carefully and explain the change precisely, using only \
information that appears in them."""

_INSTRUCTIONS = """\
Explain in plain language why the difference between the two graphs changes \
the classification of node {target} from "{factual}" to "{counterfactual}".

Then output a fenced JSON code block (```json ... ```) populating exactly \
these keys: target_node, factual_class, counterfactual_class, \
factual_neighbors, counterfactual_neighbors, factual_features, \
counterfactual_features. Use an integer for target_node, lists of integers \
for the two neighbor fields, strings for the two classes, and lists of words \
for the two feature fields, all describing the target node."""


def serialize_incident(view: Graph | GraphView, nodes, target: int,
                       class_overrides: dict | None = None) -> str:
    """Incident-representation text for the induced subgraph on `nodes`.

    One pair of lines per node in ascending id order: connections (within
    `nodes`) and words. The target's connection line carries a "[TARGET] "
    prefix. `class_overrides` substitutes display classes (used to show the
    target's predicted class instead of its dataset label).
    """
    node_set = {int(v) for v in nodes}
    if target not in node_set:
        raise ValueError(f"target {target} not in the serialized node set")
    overrides = class_overrides or {}
    lines = []
    for v in sorted(node_set):
        cls = overrides.get(v, view.class_names[view.labels[v]])
        linked = sorted(neighbors(view, v) & node_set)
        prefix = "[TARGET] " if v == target else ""
        if linked:
            conn = "is connected to nodes " + ", ".join(str(u) for u in linked)
        else:
            conn = "is connected to no other nodes"
        lines.append(f"{prefix}Node {v} (class: {cls}) {conn}.")
        words = words_for_node(view, v)
        if words:
            lines.append(f"Node {v} has words: {', '.join(words)}.")
        else:
            lines.append(f"Node {v} has no words.")
    return "\n".join(lines)


def build_system_prompt() -> str:
    """The fixed system prompt (versioned constant)."""
    return _SYSTEM_PROMPT


@dataclass(frozen=True)
class PromptBundle:
    """One ready-to-send prompt pair plus the ground truth it encodes.

    ground_truth rides along for offline scoring and the mock backend; in
    live mode it is never injected into the prompt texts.
    """

    system_text: str
    user_text: str
    target: int
    ground_truth: GroundTruth
    template_version: str = TEMPLATE_VERSION

    def __post_init__(self):
        if not self.system_text or not self.user_text:
            raise ValueError("prompt texts must be nonempty")


def build_cf_prompt(g: Graph, result: CounterfactualResult, khop: int = 2) -> PromptBundle:
    """Assemble the counterfactual prompt for one explained node.

    The factual 2-hop subgraph and the counterfactual view are serialized
    over the same node set; the target displays its recorded factual and
    counterfactual predicted classes respectively, other nodes display
    their dataset labels.
    """
    target = result.target
    if not 0 <= target < g.node_count:
        raise ValueError(f"target {target} out of range")
    view = result_view(g, result)  # raises on results inconsistent with g
    _, node_ids = khop_subgraph(g, target, khop)
    factual_name = g.class_names[result.factual_class]
    cf_name = g.class_names[result.counterfactual_class]

    factual_text = serialize_incident(g, node_ids, target, {target: factual_name})
    cf_text = serialize_incident(view, node_ids, target, {target: cf_name})
    instructions = _INSTRUCTIONS.format(
        target=target, factual=factual_name, counterfactual=cf_name
    )
    user_text = (
        "Below are two versions of the same graph region.\n\n"
        "Factual graph:\n"
        f"{factual_text}\n\n"
        "Counterfactual graph:\n"
        f"{cf_text}\n\n"
        f"{instructions}"
    )
    truth = GroundTruth(
        target_node=target,
        factual_class=factual_name,
        counterfactual_class=cf_name,
        factual_neighbors=frozenset(neighbors(g, target)),
        counterfactual_neighbors=frozenset(neighbors(view, target)),
        factual_features=frozenset(words_for_node(g, target)),
        counterfactual_features=frozenset(words_for_node(view, target)),
    )
    return PromptBundle(
        system_text=build_system_prompt(),
        user_text=user_text,
        target=target,
        ground_truth=truth,
    )
