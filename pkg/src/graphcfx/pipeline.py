"""End-to-end orchestration: train, explain, verbalize, query, score, report.

Runs are durable: every (target, explainer) attempt is appended to a JSONL
log as soon as it finishes, and re-running skips attempts already present,
so an interrupted batch resumes where it stopped. All stages are seeded and
deterministic; with the mock backend an interrupted-then-resumed run
produces the same records as an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import llm as llm_mod
from .datasets import DatasetSpec, load_citation_dataset, make_split, make_synthetic
from .explainers import (
    CounterfactualResult,
    ExplainerParams,
    explain_features,
    explain_structure,
)
from .gcn import (
    GcnModel,
    TrainConfig,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .graphs import Graph, feature_matrix, normalized_adjacency
from .llm import CorruptionSpec, LlmConfig, LlmError, complete, mock_complete
from .metrics import (
    GroundTruth,
    MetricVector,
    aggregate,
    render_report,
    score_response,
    select_for_human_eval,
)
from .verbalize import TEMPLATE_VERSION, build_cf_prompt

log = logging.getLogger(__name__)

__all__ = [
    "DatasetConfig",
    "RunConfig",
    "cmd_train",
    "cmd_explain",
    "cmd_run",
    "cmd_report",
    "sample_targets",
    "read_jsonl",
    "rescore_record",
]


@dataclass(frozen=True)
class DatasetConfig:
    """Where the graph comes from: raw citation files or a synthetic fixture."""

    kind: str = "synthetic"
    name: str | None = None
    # citation files
    content_path: str | None = None
    cites_path: str | None = None
    vocab_path: str | None = None
    class_names_path: str | None = None
    # synthetic fixture
    synthetic_kind: str = "two_community"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "citation"):
            raise ValueError("dataset kind must be 'synthetic' or 'citation'")
        if self.kind == "citation" and not (self.content_path and self.cites_path):
            raise ValueError("citation datasets need content_path and cites_path")

    def load(self) -> Graph:
        if self.kind == "citation":
            return load_citation_dataset(
                DatasetSpec(
                    content_path=self.content_path,
                    cites_path=self.cites_path,
                    vocab_path=self.vocab_path,
                    class_names_path=self.class_names_path,
                )
            )
        return make_synthetic(self.synthetic_kind, dict(self.params), seed=self.seed)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "citation":
            return Path(self.content_path).stem
        return self.synthetic_kind


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs; JSON-serializable."""

    dataset: DatasetConfig = DatasetConfig()
    explainer: str = "both"  # structure | feature | both
    sample_size: int = 100
    node_seed: int = 0
    train: TrainConfig = TrainConfig()
    train_fraction: float = 0.8
    split_seed: int = 0
    explainer_params: ExplainerParams = ExplainerParams()
    llm: LlmConfig = LlmConfig()
    backend: str = "mock"  # mock | live
    corruption: CorruptionSpec = CorruptionSpec()
    mock_seed: int = 0
    output_dir: str = "graphcfx_out"
    template_version: str = TEMPLATE_VERSION

    def __post_init__(self):
        if self.explainer not in ("structure", "feature", "both"):
            raise ValueError("explainer must be 'structure', 'feature', or 'both'")
        if self.backend not in ("mock", "live"):
            raise ValueError("backend must be 'mock' or 'live'")
        if self.backend == "live" and not self.llm.endpoint_url:
            raise ValueError("live backend requires llm.endpoint_url")
        if self.sample_size < 1:
            raise ValueError("sample_size must be positive")

    @property
    def explainer_kinds(self) -> list[str]:
        return ["structure", "feature"] if self.explainer == "both" else [self.explainer]

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        sections = {
            "dataset": DatasetConfig,
            "train": TrainConfig,
            "explainer_params": ExplainerParams,
            "llm": LlmConfig,
            "corruption": CorruptionSpec,
        }
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be an object")
                kwargs[key] = sections[key](**value)
            elif key in cls.__dataclass_fields__:
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)


def read_jsonl(path: str | Path) -> list[dict]:
    """All records of a JSONL file, skipping blank lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _append_jsonl(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def _prepare_model(config: RunConfig, g: Graph, out: Path):
    """Load the run's checkpoint if present, else train and persist one."""
    ckpt = out / "model.npz"
    masks = make_split(g, config.train_fraction, config.split_seed)
    if ckpt.exists():
        model, _ = load_checkpoint(ckpt)
        if model.feature_dim != g.feature_dim or model.class_count != g.class_count:
            raise ValueError(f"checkpoint {ckpt} does not match the dataset dimensions")
        return model, masks, ckpt
    model, history = train(g, masks, config.train)
    save_checkpoint(model, ckpt, cfg=config.train, extra={"dataset": config.dataset.label})
    (out / "history.json").write_text(
        json.dumps(
            {"train_loss": history.train_loss, "train_accuracy": history.train_accuracy}
        ),
        encoding="utf-8",
    )
    return model, masks, ckpt


def sample_targets(model: GcnModel, g: Graph, sample_size: int, seed: int) -> list[int]:
    """Seeded sample (without replacement) of correctly classified nodes."""
    probs = forward(model, normalized_adjacency(g), feature_matrix(g))
    eligible = np.flatnonzero(probs.argmax(axis=1) == g.labels)
    if eligible.size == 0:
        raise ValueError("no correctly classified nodes to explain")
    k = min(sample_size, eligible.size)
    if k < sample_size:
        log.warning("sample_size %d clamped to %d eligible nodes", sample_size, k)
    chosen = np.random.default_rng(seed).choice(eligible, size=k, replace=False)
    return sorted(int(v) for v in chosen)


def _explain_one(model, g, v, kind, params):
    if kind == "structure":
        return explain_structure(model, g, v, params)
    return explain_features(model, g, v, params)


def cmd_train(config: RunConfig) -> dict:
    """Train the oracle, persist checkpoint + history, report accuracies."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = config.dataset.load()
    masks = make_split(g, config.train_fraction, config.split_seed)
    started = time.monotonic()
    model, history = train(g, masks, config.train)
    elapsed = time.monotonic() - started
    ckpt = out / "model.npz"
    save_checkpoint(model, ckpt, cfg=config.train, extra={"dataset": config.dataset.label})
    (out / "history.json").write_text(
        json.dumps(
            {"train_loss": history.train_loss, "train_accuracy": history.train_accuracy}
        ),
        encoding="utf-8",
    )
    probs = forward(model, normalized_adjacency(g), g.features)
    correct = probs.argmax(axis=1) == g.labels
    summary = {
        "checkpoint": str(ckpt),
        "train_accuracy": float(correct[masks.train].mean()),
        "test_accuracy": float(correct[masks.test].mean()),
        "final_train_loss": history.train_loss[-1] if history.train_loss else None,
        "seconds": elapsed,
    }
    print(
        f"trained {config.dataset.label}: train acc {summary['train_accuracy']:.3f}, "
        f"test acc {summary['test_accuracy']:.3f} ({elapsed:.1f}s) -> {ckpt}"
    )
    return summary


def cmd_explain(config: RunConfig, checkpoint: str | Path | None = None) -> dict:
    """Run the configured explainer(s) over a sampled node set; log JSONL."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = config.dataset.load()
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
        if model.feature_dim != g.feature_dim or model.class_count != g.class_count:
            raise ValueError("checkpoint does not match the dataset dimensions")
    else:
        model, _, _ = _prepare_model(config, g, out)
    targets = sample_targets(model, g, config.sample_size, config.node_seed)

    log_path = out / "counterfactuals.jsonl"
    attempts = 0
    found = 0
    with open(log_path, "w", encoding="utf-8") as fh:
        for v in targets:
            for kind in config.explainer_kinds:
                started = time.monotonic()
                result = _explain_one(model, g, v, kind, config.explainer_params)
                ms = (time.monotonic() - started) * 1000.0
                attempts += 1
                record = {
                    "target": v,
                    "explainer": kind,
                    "found": result is not None,
                    "counterfactual": result.to_json_dict() if result else None,
                    "explain_ms": ms,
                }
                if result is not None:
                    found += 1
                _append_jsonl(fh, record)
    rate = found / attempts if attempts else 0.0
    print(f"explained {len(targets)} nodes, {attempts} attempts, found rate {rate:.3f} -> {log_path}")
    return {"log": str(log_path), "attempts": attempts, "found": found, "found_rate": rate}


def _query_backend(config: RunConfig, bundle):
    if config.backend == "mock":
        return mock_complete(bundle, config.corruption, seed=config.mock_seed)
    return complete(bundle, config.llm)


def _build_record(config: RunConfig, model: GcnModel, g: Graph, v: int, kind: str) -> dict:
    """Explain, prompt, query, parse, and score one (target, explainer) attempt."""
    t0 = time.monotonic()
    result = _explain_one(model, g, v, kind, config.explainer_params)
    explain_ms = (time.monotonic() - t0) * 1000.0
    record = {
        "target": v,
        "explainer": kind,
        "dataset": config.dataset.label,
        "model_name": config.llm.model_name,
        "backend": config.backend,
        "template_version": config.template_version,
        "found": result is not None,
        "counterfactual": result.to_json_dict() if result else None,
        "prompt_sha256": None,
        "user_text": None,
        "ground_truth": None,
        "raw_text": None,
        "llm_error": None,
        "parse_error": None,
        "metrics": None,
        "timings": {"explain_ms": explain_ms, "llm_ms": None,
                    "total_ms": (time.monotonic() - t0) * 1000.0},
    }
    if result is None:
        return record

    bundle = build_cf_prompt(g, result, khop=config.explainer_params.khop)
    record["prompt_sha256"] = hashlib.sha256(
        (bundle.system_text + "\x00" + bundle.user_text).encode("utf-8")
    ).hexdigest()
    record["user_text"] = bundle.user_text
    record["ground_truth"] = bundle.ground_truth.to_json_dict()

    t1 = time.monotonic()
    try:
        response = _query_backend(config, bundle)
    except LlmError as err:
        record["llm_error"] = f"{type(err).__name__}: {err}"
        record["timings"]["llm_ms"] = (time.monotonic() - t1) * 1000.0
        record["timings"]["total_ms"] = (time.monotonic() - t0) * 1000.0
        return record
    record["timings"]["llm_ms"] = (time.monotonic() - t1) * 1000.0
    record["raw_text"] = response.raw_text

    _, parse_err, vec = score_response(
        response.raw_text, bundle.ground_truth, class_names=g.class_names
    )
    record["parse_error"] = parse_err.kind if parse_err else None
    record["metrics"] = vec.to_json_dict()
    record["timings"]["total_ms"] = (time.monotonic() - t0) * 1000.0
    return record


def cmd_run(config: RunConfig, limit: int | None = None) -> dict:
    """The full pipeline with durable, resumable logging.

    Appends one RunRecord JSON line per (target, explainer) attempt; a
    rerun skips attempts already in the log. `limit` caps how many new
    records this invocation produces (useful for budgeted batches).
    """
    if config.template_version != TEMPLATE_VERSION:
        raise ValueError(
            f"config pins template_version {config.template_version!r} but the "
            f"installed templates are version {TEMPLATE_VERSION!r}"
        )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "run_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("template_version") != config.template_version:
            raise ValueError(
                f"existing log in {out} was written with template_version "
                f"{meta.get('template_version')!r}; refusing to mix versions"
            )
    else:
        meta = {"template_version": config.template_version, "config": config.to_dict()}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    g = config.dataset.load()
    model, _, _ = _prepare_model(config, g, out)
    targets = sample_targets(model, g, config.sample_size, config.node_seed)

    records_path = out / "records.jsonl"
    done = set()
    if records_path.exists():
        for rec in read_jsonl(records_path):
            done.add((rec["target"], rec["explainer"]))

    pending = [
        (v, kind)
        for v in targets
        for kind in config.explainer_kinds
        if (v, kind) not in done
    ]
    if limit is not None:
        pending = pending[:limit]

    _build_record.model = model  # shared read-only state for workers
    new_records = 0
    with open(records_path, "a", encoding="utf-8") as fh:
        with ThreadPoolExecutor(max_workers=config.llm.max_in_flight) as pool:
            window: deque = deque()
            for v, kind in pending:
                window.append(pool.submit(_build_record, config, g, v, kind))
                if len(window) >= config.llm.max_in_flight:
                    _append_jsonl(fh, window.popleft().result())
                    new_records += 1
            while window:
                _append_jsonl(fh, window.popleft().result())
                new_records += 1

    all_records = read_jsonl(records_path) if records_path.exists() else []
    report_text, rows = _render_from_records(all_records)
    report_path = out / "report.md"
    report_path.write_text(report_text, encoding="utf-8")
    print(report_text)

    scored = [r for r in all_records if r["metrics"] is not None]
    summary = {
        "records": len(all_records),
        "new_records": new_records,
        "found": sum(1 for r in all_records if r["found"]),
        "llm_errors": sum(1 for r in all_records if r["llm_error"]),
        "scored": len(scored),
        "report": str(report_path),
        "log": str(records_path),
    }
    print(
        f"{summary['records']} records ({summary['new_records']} new), "
        f"{summary['found']} counterfactuals found, "
        f"{summary['llm_errors']} endpoint errors -> {records_path}"
    )
    return summary


def _render_from_records(records: list[dict], group_keys=("model_name", "dataset", "explainer")):
    scored = [
        {
            **{k: rec[k] for k in group_keys},
            "metrics": MetricVector.from_json_dict(rec["metrics"]),
            "parse_failed": rec["parse_error"] is not None,
        }
        for rec in records
        if rec.get("metrics") is not None
    ]
    if not scored:
        return "no scored records\n", []
    rows = aggregate(scored, group_keys=group_keys)
    return render_report(rows), rows


def rescore_record(record: dict, class_names) -> MetricVector:
    """Recompute a stored record's metrics from its raw text and ground truth."""
    truth = GroundTruth.from_json_dict(record["ground_truth"])
    _, _, vec = score_response(record["raw_text"], truth, class_names=class_names)
    return vec


def cmd_report(
    log_path: str | Path,
    group_keys=("model_name", "dataset", "explainer"),
    out_dir: str | Path | None = None,
) -> dict:
    """Aggregate a records log into a table and export 5-of-6 passers.

    Writes report.md plus a human_eval/ directory with one plain-text file
    per passing explanation (its prompt serializations and the model's
    explanation), ready for an external questionnaire.
    """
    log_path = Path(log_path)
    records = read_jsonl(log_path)
    if not records:
        raise ValueError(f"{log_path} holds no records")
    out = Path(out_dir) if out_dir is not None else log_path.parent
    out.mkdir(parents=True, exist_ok=True)

    report_text, rows = _render_from_records(records, group_keys=tuple(group_keys))
    report_path = out / "report.md"
    report_path.write_text(report_text, encoding="utf-8")
    print(report_text)

    ids = []
    by_id = {}
    for rec in records:
        if rec.get("metrics") is None:
            continue
        rid = (rec["dataset"], rec["explainer"], rec["target"])
        ids.append((rid, MetricVector.from_json_dict(rec["metrics"])))
        by_id[rid] = rec
    selected = select_for_human_eval(ids)

    export_dir = out / "human_eval"
    export_dir.mkdir(parents=True, exist_ok=True)
    for old in export_dir.glob("*.txt"):
        old.unlink()
    for rid in selected:
        rec = by_id[rid]
        name = f"{rec['dataset']}_{rec['explainer']}_node{rec['target']}.txt"
        body = (
            f"{rec['user_text']}\n\n"
            "--- model explanation ---\n\n"
            f"{rec['raw_text']}\n"
        )
        (export_dir / name).write_text(body, encoding="utf-8")
    print(f"exported {len(selected)} explanations for human evaluation -> {export_dir}")
    return {
        "report": str(report_path),
        "rows": rows,
        "selected": len(selected),
        "export_dir": str(export_dir),
    }
