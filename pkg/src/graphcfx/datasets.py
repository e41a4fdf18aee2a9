"""Citation-network loading, vocabularies, splits, and synthetic fixtures.

The raw ingestion format is the classic two-file citation layout:

* content file: one node per line, tab-separated
  ``<paper_id> <f_1> ... <f_d> <class_label>`` with binary feature digits
* cites file: one citation per line, tab-separated ``<id_a> <id_b>``
  (direction discarded)

plus an optional vocabulary file (one word per line, row aligned with the
feature columns) and an optional class-names file (one name per line, order
defines class ids).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import Graph, GraphView, canonical_edge, feature_row

log = logging.getLogger(__name__)

__all__ = [
    "DatasetSpec",
    "SplitMasks",
    "DatasetError",
    "load_citation_dataset",
    "save_citation_dataset",
    "load_vocabulary",
    "words_for_node",
    "make_split",
    "make_synthetic",
    "two_community",
    "barbell",
    "random_er",
]


class DatasetError(ValueError):
    """Malformed raw dataset files."""


@dataclass(frozen=True)
class DatasetSpec:
    """Paths to the raw files of one citation dataset."""

    content_path: str
    cites_path: str
    vocab_path: str | None = None
    class_names_path: str | None = None

    def __post_init__(self):
        if not self.content_path or not self.cites_path:
            raise ValueError("content_path and cites_path must be nonempty")


@dataclass(frozen=True)
class SplitMasks:
    """Boolean train/test partition over nodes."""

    train: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        train = np.asarray(self.train, dtype=bool)
        test = np.asarray(self.test, dtype=bool)
        if train.shape != test.shape:
            raise ValueError("train/test masks must have equal length")
        if (train & test).any():
            raise ValueError("train and test masks overlap")
        if not (train | test).all():
            raise ValueError("train and test masks must cover all nodes")
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "test", test)


def load_vocabulary(path: str | None, feature_dim: int) -> list[str]:
    """Read one word per line; synthesize ``word_<i>`` tokens when path is None."""
    if path is None:
        return [f"word_{i}" for i in range(feature_dim)]
    words = [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]
    words = [w for w in words if w != ""]
    if len(words) != feature_dim:
        raise DatasetError(
            f"vocabulary file {path} has {len(words)} words, expected {feature_dim}"
        )
    if len(set(words)) != len(words):
        raise DatasetError(f"vocabulary file {path} contains duplicate words")
    return words


def load_citation_dataset(spec: DatasetSpec) -> Graph:
    """Load raw content/cites files into a :class:`Graph`.

    Nodes are numbered 0..n-1 in content-file order. Citation direction is
    discarded; cites lines naming unknown paper ids (and malformed or
    self-citation lines) are skipped and the skip count is logged.
    """
    ids: list[str] = []
    rows: list[np.ndarray] = []
    raw_labels: list[str] = []
    feature_dim = None

    with open(spec.content_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise DatasetError(
                    f"{spec.content_path}:{lineno}: expected id, features, label "
                    f"(got {len(parts)} fields)"
                )
            if feature_dim is None:
                feature_dim = len(parts) - 2
            elif len(parts) - 2 != feature_dim:
                raise DatasetError(
                    f"{spec.content_path}:{lineno}: {len(parts) - 2} features, "
                    f"expected {feature_dim}"
                )
            digits = parts[1:-1]
            if any(d not in ("0", "1") for d in digits):
                bad = next(d for d in digits if d not in ("0", "1"))
                raise DatasetError(
                    f"{spec.content_path}:{lineno}: non-binary feature value {bad!r}"
                )
            ids.append(parts[0])
            rows.append(np.array([int(d) for d in digits], dtype=np.float64))
            raw_labels.append(parts[-1])

    if not ids:
        raise DatasetError(f"{spec.content_path}: no nodes")
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{spec.content_path}: duplicate paper ids")

    if spec.class_names_path is not None:
        class_names = [
            line.strip()
            for line in Path(spec.class_names_path).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        unknown = sorted(set(raw_labels) - set(class_names))
        if unknown:
            raise DatasetError(f"labels not in class-names file: {unknown}")
    else:
        class_names = sorted(set(raw_labels))
    class_index = {name: i for i, name in enumerate(class_names)}
    labels = np.array([class_index[lbl] for lbl in raw_labels], dtype=np.int64)

    id_map = {pid: i for i, pid in enumerate(ids)}
    edges = set()
    skipped = 0
    with open(spec.cites_path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                if line.strip():
                    skipped += 1
                continue
            a, b = parts
            if a not in id_map or b not in id_map or a == b:
                skipped += 1
                continue
            edges.add(canonical_edge(id_map[a], id_map[b]))
    if skipped:
        log.warning("%s: skipped %d unusable cites lines", spec.cites_path, skipped)

    vocabulary = load_vocabulary(spec.vocab_path, feature_dim)
    return Graph(
        node_count=len(ids),
        edges=edges,
        features=np.vstack(rows),
        labels=labels,
        vocabulary=vocabulary,
        class_names=class_names,
    )


def save_citation_dataset(g: Graph, directory: str | Path, name: str = "graph") -> DatasetSpec:
    """Write a graph back out in the raw citation format (node index as paper id)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    content = directory / f"{name}.content"
    cites = directory / f"{name}.cites"
    vocab = directory / f"{name}.vocab"
    classes = directory / f"{name}.classes"

    with open(content, "w", encoding="utf-8") as fh:
        for v in range(g.node_count):
            digits = "\t".join(str(int(x)) for x in g.features[v])
            fh.write(f"{v}\t{digits}\t{g.class_names[g.labels[v]]}\n")
    with open(cites, "w", encoding="utf-8") as fh:
        for u, v in sorted(g.edges):
            fh.write(f"{u}\t{v}\n")
    vocab.write_text("".join(f"{w}\n" for w in g.vocabulary), encoding="utf-8")
    classes.write_text("".join(f"{c}\n" for c in g.class_names), encoding="utf-8")
    return DatasetSpec(
        content_path=str(content),
        cites_path=str(cites),
        vocab_path=str(vocab),
        class_names_path=str(classes),
    )


def words_for_node(g: Graph | GraphView, v: int) -> list[str]:
    """Vocabulary words present in node v's (possibly overridden) feature row."""
    row = feature_row(g, v)
    return [g.vocabulary[i] for i in np.flatnonzero(row)]


def make_split(g: Graph, train_fraction: float = 0.8, seed: int = 0) -> SplitMasks:
    """Seeded random train/test partition with |train| = round(fraction * n)."""
    n = g.node_count
    if n < 2:
        raise ValueError("need at least two nodes to split")
    train_n = int(round(train_fraction * n))
    if train_n <= 0 or train_n >= n:
        raise ValueError(
            f"train_fraction {train_fraction} leaves an empty train or test set for n={n}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    train = np.zeros(n, dtype=bool)
    train[perm[:train_n]] = True
    return SplitMasks(train=train, test=~train)


def two_community(n: int = 12, p_in: float = 0.8, p_out: float = 0.1, seed: int = 0) -> Graph:
    """Two dense blocks with sparse cross edges; labels are the block ids.

    Features: word 0 marks block 0 (present with prob 0.9 inside, 0.1
    outside), word 1 marks block 1 symmetrically, words 2-3 are uniform
    noise.
    """
    if n < 2:
        raise ValueError("two_community needs n >= 2")
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    block = np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64)
    edges = []
    for u in range(n):
        for v in range(u + 1, n):
            p = p_in if block[u] == block[v] else p_out
            if rng.random() < p:
                edges.append((u, v))
    feats = np.zeros((n, 4), dtype=np.float64)
    for v in range(n):
        own, other = block[v], 1 - block[v]
        feats[v, own] = 1.0 if rng.random() < 0.9 else 0.0
        feats[v, other] = 1.0 if rng.random() < 0.1 else 0.0
        feats[v, 2] = 1.0 if rng.random() < 0.5 else 0.0
        feats[v, 3] = 1.0 if rng.random() < 0.5 else 0.0
    return Graph(
        node_count=n,
        edges=edges,
        features=feats,
        labels=block,
        vocabulary=("alpha", "beta", "gamma", "delta"),
        class_names=("left", "right"),
    )


def barbell(m: int = 4) -> Graph:
    """Two m-cliques joined by a single bridge edge; deterministic features."""
    if m < 2:
        raise ValueError("barbell needs m >= 2")
    n = 2 * m
    edges = []
    for block in (range(m), range(m, n)):
        block = list(block)
        for i, u in enumerate(block):
            for v in block[i + 1:]:
                edges.append((u, v))
    edges.append((m - 1, m))  # the bridge
    labels = np.array([0] * m + [1] * m, dtype=np.int64)
    feats = np.zeros((n, 2), dtype=np.float64)
    feats[np.arange(n), labels] = 1.0
    return Graph(
        node_count=n,
        edges=edges,
        features=feats,
        labels=labels,
        vocabulary=("alpha", "beta"),
        class_names=("left", "right"),
    )


def random_er(n: int = 10, p: float = 0.3, seed: int = 0) -> Graph:
    """Erdős–Rényi graph; single class, featureless (one all-zero word column)."""
    if n < 1:
        raise ValueError("random_er needs n >= 1")
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return Graph(
        node_count=n,
        edges=edges,
        features=np.zeros((n, 1), dtype=np.float64),
        labels=np.zeros(n, dtype=np.int64),
        vocabulary=("alpha",),
        class_names=("only",),
    )


_SYNTHETIC_KINDS = {
    "two_community": two_community,
    "barbell": barbell,
    "random_er": random_er,
}


def make_synthetic(kind: str, params: dict | None = None, seed: int = 0) -> Graph:
    """Build a named synthetic fixture; see the per-kind helpers for params."""
    if kind not in _SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {sorted(_SYNTHETIC_KINDS)}")
    params = dict(params or {})
    if kind != "barbell":
        params.setdefault("seed", seed)
    return _SYNTHETIC_KINDS[kind](**params)
