"""Structured-record extraction from raw LLM text and exact-match scoring.

The response must populate a seven-field record (target node, both classes,
both neighborhoods, both word sets). Each of the six metrics is a binary
exact match between one extracted field and ground truth; an explanation
passes when at least five of the six score 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "RECORD_KEYS",
    "METRIC_NAMES",
    "ExtractionRecord",
    "GroundTruth",
    "MetricVector",
    "ParseError",
    "NoJsonError",
    "MissingKeyError",
    "BadValueError",
    "parse_extraction",
    "compute_metrics",
    "score_response",
    "select_for_human_eval",
    "aggregate",
    "render_report",
    "ReportRow",
]

RECORD_KEYS = (
    "target_node",
    "factual_class",
    "counterfactual_class",
    "factual_neighbors",
    "counterfactual_neighbors",
    "factual_features",
    "counterfactual_features",
)

METRIC_NAMES = ("tni", "tnnu", "cci", "ftnf", "cftnf", "cftnn")


class ParseError(ValueError):
    """Raw text did not yield a usable extraction record."""

    kind = "parse_error"


class NoJsonError(ParseError):
    kind = "no_json"


class MissingKeyError(ParseError):
    kind = "missing_key"

    def __init__(self, key):
        super().__init__(f"record is missing key {key!r}")
        self.key = key


class BadValueError(ParseError):
    kind = "bad_value"

    def __init__(self, key, value):
        super().__init__(f"cannot coerce {key} value {value!r}")
        self.key = key


@dataclass(frozen=True)
class ExtractionRecord:
    """The record the LLM must populate, in normalized form."""

    target_node: int
    factual_class: str
    counterfactual_class: str
    factual_neighbors: frozenset
    counterfactual_neighbors: frozenset
    factual_features: frozenset
    counterfactual_features: frozenset


@dataclass(frozen=True)
class GroundTruth:
    """The same seven fields computed from the graph and the counterfactual."""

    target_node: int
    factual_class: str
    counterfactual_class: str
    factual_neighbors: frozenset
    counterfactual_neighbors: frozenset
    factual_features: frozenset
    counterfactual_features: frozenset

    def to_json_dict(self) -> dict:
        return {
            "target_node": self.target_node,
            "factual_class": self.factual_class,
            "counterfactual_class": self.counterfactual_class,
            "factual_neighbors": sorted(self.factual_neighbors),
            "counterfactual_neighbors": sorted(self.counterfactual_neighbors),
            "factual_features": sorted(self.factual_features),
            "counterfactual_features": sorted(self.counterfactual_features),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            target_node=int(d["target_node"]),
            factual_class=str(d["factual_class"]),
            counterfactual_class=str(d["counterfactual_class"]),
            factual_neighbors=frozenset(int(x) for x in d["factual_neighbors"]),
            counterfactual_neighbors=frozenset(int(x) for x in d["counterfactual_neighbors"]),
            factual_features=frozenset(str(x) for x in d["factual_features"]),
            counterfactual_features=frozenset(str(x) for x in d["counterfactual_features"]),
        )


@dataclass(frozen=True)
class MetricVector:
    """Six binary outcomes; the pass flag is >= 5 of 6 by construction."""

    tni: int = 0
    tnnu: int = 0
    cci: int = 0
    ftnf: int = 0
    cftnf: int = 0
    cftnn: int = 0

    def __post_init__(self):
        for name in METRIC_NAMES:
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")

    @property
    def passed_5_of_6(self) -> bool:
        return self.total >= 5

    @property
    def total(self) -> int:
        return sum(getattr(self, name) for name in METRIC_NAMES)

    def to_json_dict(self) -> dict:
        d = {name: getattr(self, name) for name in METRIC_NAMES}
        d["passed_5_of_6"] = self.passed_5_of_6
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricVector":
        return cls(**{name: int(d[name]) for name in METRIC_NAMES})

    @classmethod
    def zeros(cls) -> "MetricVector":
        return cls()


_FENCE_RE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.DOTALL)


def _balanced_objects(text: str):
    """Top-level {...} candidate substrings, string- and escape-aware."""
    spans = []
    depth = 0
    start = None
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            if depth > 0:
                in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    spans.append(text[start : i + 1])
    return spans


def _last_json_object(raw: str) -> dict:
    candidates = [m.group(1).strip() for m in _FENCE_RE.finditer(raw)]
    for cand in reversed(candidates):
        try:
            obj = json.loads(cand)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    for cand in reversed(_balanced_objects(raw)):
        try:
            obj = json.loads(cand)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise NoJsonError("no JSON object found in response")


def _norm_key(key: str) -> str:
    return str(key).strip().lower().replace("-", "_").replace(" ", "_")


def _norm_class(value) -> str:
    return str(value).strip().lower()


def _coerce_int(key, value):
    if isinstance(value, bool):
        raise BadValueError(key, value)
    if isinstance(value, int):
        return int(value)
    if isinstance(value, str) and value.strip().isdigit():
        return int(value.strip())
    raise BadValueError(key, value)


def _coerce_class(key, value, class_names):
    if isinstance(value, bool) or value is None:
        raise BadValueError(key, value)
    if isinstance(value, int) or (isinstance(value, str) and value.strip().isdigit()):
        idx = int(value if isinstance(value, int) else value.strip())
        if class_names is not None and 0 <= idx < len(class_names):
            return _norm_class(class_names[idx])
        return str(idx)
    if isinstance(value, str):
        return _norm_class(value)
    raise BadValueError(key, value)


def _coerce_neighbors(key, value):
    if isinstance(value, bool):
        raise BadValueError(key, value)
    if isinstance(value, int):
        return frozenset([value])
    if isinstance(value, (list, tuple)):
        return frozenset(_coerce_int(key, item) for item in value)
    raise BadValueError(key, value)


def _coerce_words(key, value):
    if isinstance(value, str):
        items: Iterable = [value]
    elif isinstance(value, (list, tuple)):
        items = value
    else:
        raise BadValueError(key, value)
    out = set()
    for item in items:
        if isinstance(item, bool) or not isinstance(item, (str, int, float)):
            raise BadValueError(key, item)
        word = str(item).strip().lower()
        if word:
            out.add(word)
    return frozenset(out)


def parse_extraction(raw: str, class_names: Sequence[str] | None = None) -> ExtractionRecord:
    """Extract the seven-field record from raw response text.

    The last fenced code block holding a JSON object wins; failing that,
    the last balanced top-level JSON object anywhere in the text. Keys are
    matched case-insensitively with hyphens/spaces unified to underscores.
    Classes and words are trimmed and lowercased; neighbor entries may be
    integers or digit strings; integer classes map through `class_names`
    when given.

    Raises :class:`NoJsonError`, :class:`MissingKeyError`, or
    :class:`BadValueError` (all :class:`ParseError`).
    """
    obj = _last_json_object(raw)
    by_key = {_norm_key(k): v for k, v in obj.items()}
    for key in RECORD_KEYS:
        if key not in by_key:
            raise MissingKeyError(key)
    return ExtractionRecord(
        target_node=_coerce_int("target_node", by_key["target_node"]),
        factual_class=_coerce_class("factual_class", by_key["factual_class"], class_names),
        counterfactual_class=_coerce_class(
            "counterfactual_class", by_key["counterfactual_class"], class_names
        ),
        factual_neighbors=_coerce_neighbors("factual_neighbors", by_key["factual_neighbors"]),
        counterfactual_neighbors=_coerce_neighbors(
            "counterfactual_neighbors", by_key["counterfactual_neighbors"]
        ),
        factual_features=_coerce_words("factual_features", by_key["factual_features"]),
        counterfactual_features=_coerce_words(
            "counterfactual_features", by_key["counterfactual_features"]
        ),
    )


def _norm_words(ws):
    return frozenset(str(w).strip().lower() for w in ws)


def compute_metrics(rec: ExtractionRecord, truth: GroundTruth) -> MetricVector:
    """Exact-match comparison of every extracted field against ground truth."""
    norm_words = _norm_words
    return MetricVector(
        tni=int(rec.target_node == truth.target_node),
        tnnu=int(rec.factual_neighbors == frozenset(truth.factual_neighbors)),
        cci=int(_norm_class(rec.counterfactual_class) == _norm_class(truth.counterfactual_class)),
        ftnf=int(norm_words(rec.factual_features) == norm_words(truth.factual_features)),
        cftnf=int(norm_words(rec.counterfactual_features) == norm_words(truth.counterfactual_features)),
        cftnn=int(rec.counterfactual_neighbors == frozenset(truth.counterfactual_neighbors)),
    )


def score_response(
    raw: str, truth: GroundTruth, class_names: Sequence[str] | None = None
) -> tuple[ExtractionRecord | None, ParseError | None, MetricVector]:
    """Parse then score; a parse failure scores the all-zero vector."""
    try:
        rec = parse_extraction(raw, class_names=class_names)
    except ParseError as err:
        return None, err, MetricVector.zeros()
    return rec, None, compute_metrics(rec, truth)


def select_for_human_eval(records: Iterable[tuple]) -> list:
    """Ids of records passing the 5-of-6 rule, input order preserved."""
    return [rid for rid, vec in records if vec.passed_5_of_6]


@dataclass(frozen=True)
class ReportRow:
    group: dict
    means: dict
    parse_fail_rate: float
    count: int


def aggregate(
    records: Iterable[dict],
    group_keys: Sequence[str] = ("model_name", "dataset", "explainer"),
) -> list[ReportRow]:
    """Per-group means of each metric plus the parse-failure rate.

    Each record dict needs the group-key fields, a "metrics" MetricVector,
    and a boolean "parse_failed". Parse failures contribute zero vectors to
    the means and are counted separately.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        key = tuple(rec[k] for k in group_keys)
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        means = {
            name: sum(getattr(r["metrics"], name) for r in recs) / len(recs)
            for name in METRIC_NAMES
        }
        fail = sum(1 for r in recs if r["parse_failed"]) / len(recs)
        rows.append(
            ReportRow(
                group=dict(zip(group_keys, key)),
                means=means,
                parse_fail_rate=fail,
                count=len(recs),
            )
        )
    return rows


def render_report(rows: Sequence[ReportRow]) -> str:
    """Aligned markdown table, metric means rounded to 3 decimals."""
    if not rows:
        raise ValueError("no rows to render")
    group_keys = list(rows[0].group)
    header = group_keys + [m.upper() for m in METRIC_NAMES] + ["ParseFail", "N"]
    body = []
    for row in rows:
        cells = [str(row.group[k]) for k in group_keys]
        cells += [f"{row.means[m]:.3f}" for m in METRIC_NAMES]
        cells += [f"{row.parse_fail_rate:.3f}", str(row.count)]
        body.append(cells)
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = [
        "| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |",
        "|" + "|".join("-" * (w + 2) for w in widths) + "|",
    ]
    for cells in body:
        lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |")
    return "\n".join(lines) + "\n"
