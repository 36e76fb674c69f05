"""Multi-round evaluation measures and report emission.

Definitions (all values are percentages in [0, 100]):

* Hits@K at round r: fraction of sessions whose target ranked <= K in any
  round up to r (cumulative).
* Recall@K at round r: fraction whose target rank at exactly round r is
  <= K (per-round snapshot). At round 1 the two coincide.
* mAP@K at round r: mean over sessions of AP@K of that round's ranking,
  with multi-ground-truth normalization min(K, |targets|).
* Rank stats at round r: mean and median target rank; narrowed-pool
  sentinel ranks participate and are counted separately.

Sessions that terminated early keep their final state: the last executed
round carries forward to later report rounds. Sentinel rounds (target
absent from the eligible pool) can never count as hits or recall.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MetricsError
from .session import EvalRun, RoundRecord, SessionTrace, traces_digest

REPORT_SCHEMA = "eval_report@1"
MAP_FORMULA_NOTE = "standard multi-ground-truth AP@K with min(K, |targets|) normalization"


def _round_record(trace: SessionTrace, round_no: int) -> RoundRecord:
    if not trace.rounds:
        raise MetricsError(f"trace {trace.triplet_id} has no rounds")
    return trace.rounds[min(round_no, len(trace.rounds)) - 1]


def hits_at_k(traces: list[SessionTrace], k: int, round_no: int) -> float:
    """Cumulative success rate: target in the top-K of any round up to round_no."""
    if k < 1 or round_no < 1:
        raise MetricsError("k and round must be >= 1")
    if not traces:
        return 0.0
    hits = 0
    for trace in traces:
        upto = min(round_no, len(trace.rounds))
        if any(
            r.target_in_pool and r.target_rank <= k for r in trace.rounds[:upto]
        ):
            hits += 1
    return 100.0 * hits / len(traces)


def recall_at_k(traces: list[SessionTrace], k: int, round_no: int) -> float:
    """Per-round snapshot: target rank at exactly round_no is <= K."""
    if k < 1 or round_no < 1:
        raise MetricsError("k and round must be >= 1")
    if not traces:
        return 0.0
    count = 0
    for trace in traces:
        record = _round_record(trace, round_no)
        if record.target_in_pool and record.target_rank <= k:
            count += 1
    return 100.0 * count / len(traces)


def _ap_at_k(record: RoundRecord, target_ids: tuple[str, ...], k: int, config_m: int) -> float:
    top = record.top_m
    if len(top) < k and len(top) >= config_m:
        raise MetricsError(
            f"AP@{k} needs top-{k} lists but traces were run with m={config_m}"
        )
    targets = set(target_ids)
    found = 0
    precision_sum = 0.0
    for i, (image_id, _) in enumerate(top[:k], start=1):
        if image_id in targets:
            found += 1
            precision_sum += found / i
    return 100.0 * precision_sum / min(k, len(targets))


def map_at_k(traces: list[SessionTrace], k: int, round_no: int) -> float:
    """Mean AP@K over traces at one round's ranking (multi-GT normalization)."""
    if k < 1 or round_no < 1:
        raise MetricsError("k and round must be >= 1")
    if not traces:
        return 0.0
    total = 0.0
    for trace in traces:
        record = _round_record(trace, round_no)
        total += _ap_at_k(record, trace.target_ids, k, int(trace.config.get("m", len(record.top_m))))
    return total / len(traces)


def rank_stats(traces: list[SessionTrace], round_no: int) -> dict:
    """Mean/median target rank at a round; sentinel ranks included and counted."""
    if round_no < 1:
        raise MetricsError("round must be >= 1")
    if not traces:
        return {"mean": 0.0, "median": 0.0, "sentinel_count": 0}
    ranks = []
    sentinels = 0
    for trace in traces:
        record = _round_record(trace, round_no)
        ranks.append(record.target_rank)
        if not record.target_in_pool:
            sentinels += 1
    arr = np.asarray(ranks, dtype=np.float64)
    return {
        "mean": float(np.mean(arr)),
        "median": float(np.median(arr)),
        "sentinel_count": sentinels,
    }


@dataclass
class EvalReport:
    """Aggregated metric cells plus provenance for one evaluation run."""

    dataset: str
    ks: list[int]
    rounds: list[int]
    cells: dict  # metric -> str(k) -> str(round) -> value
    map_best: dict  # str(k) -> best-over-report-rounds value
    rank_stats: dict  # str(round) -> {mean, median, sentinel_count}
    per_category: dict  # category -> metric -> str(k) -> str(round) -> value
    config: dict
    trace_digest: str
    failure_count: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "dataset": self.dataset,
            "ks": self.ks,
            "rounds": self.rounds,
            "cells": self.cells,
            "map_best": self.map_best,
            "rank_stats": self.rank_stats,
            "per_category": self.per_category,
            "config": self.config,
            "trace_digest": self.trace_digest,
            "failure_count": self.failure_count,
            "warnings": self.warnings,
            "map_formula": MAP_FORMULA_NOTE,
        }


def _metric_cells(traces: list[SessionTrace], ks: list[int], rounds: list[int]) -> dict:
    return {
        "hits": {str(k): {str(r): hits_at_k(traces, k, r) for r in rounds} for k in ks},
        "recall": {str(k): {str(r): recall_at_k(traces, k, r) for r in rounds} for k in ks},
        "map": {str(k): {str(r): map_at_k(traces, k, r) for r in rounds} for k in ks},
    }


def _assert_report_invariants(cells: dict, ks: list[int], rounds: list[int]) -> None:
    hits = cells["hits"]
    recall = cells["recall"]
    sorted_rounds = sorted(rounds)
    sorted_ks = sorted(ks)
    for k in ks:
        for lo, hi in zip(sorted_rounds, sorted_rounds[1:]):
            if hits[str(k)][str(lo)] > hits[str(k)][str(hi)] + 1e-9:
                raise MetricsError(f"Hits@{k} decreased from round {lo} to {hi}")
    for r in rounds:
        for lo, hi in zip(sorted_ks, sorted_ks[1:]):
            if hits[str(lo)][str(r)] > hits[str(hi)][str(r)] + 1e-9:
                raise MetricsError(f"Hits at round {r} decreased from K={lo} to K={hi}")
    if 1 in rounds:
        for k in ks:
            if hits[str(k)]["1"] != recall[str(k)]["1"]:
                raise MetricsError(f"round-1 Hits@{k} != round-1 Recall@{k}")
    for metric in ("hits", "recall", "map"):
        for per_k in cells[metric].values():
            for value in per_k.values():
                if not 0.0 <= value <= 100.0:
                    raise MetricsError(f"{metric} value {value} outside [0, 100]")


def make_report(
    run: EvalRun | list[SessionTrace],
    ks: list[int],
    rounds: list[int],
    dataset: str = "run",
) -> EvalReport:
    """Aggregate a run into a report; invariants are asserted before emission."""
    if isinstance(run, EvalRun):
        traces = run.traces
        failure_count = run.failure_count
    else:
        traces = run
        failure_count = 0
    if not ks or not rounds:
        raise MetricsError("ks and rounds must be non-empty")

    warnings: list[str] = []
    if not traces:
        warnings.append("empty_run")
    cells = _metric_cells(traces, ks, rounds)
    _assert_report_invariants(cells, ks, rounds)

    stats = {str(r): rank_stats(traces, r) for r in rounds}
    map_best = {
        str(k): max(cells["map"][str(k)][str(r)] for r in rounds) for k in ks
    }

    categories = sorted({t.category for t in traces if t.category is not None})
    per_category: dict = {}
    if categories:
        for category in categories:
            cat_traces = [t for t in traces if t.category == category]
            cat_cells = _metric_cells(cat_traces, ks, rounds)
            _assert_report_invariants(cat_cells, ks, rounds)
            per_category[category] = cat_cells
        per_category["average"] = {
            metric: {
                str(k): {
                    str(r): float(
                        np.mean([per_category[c][metric][str(k)][str(r)] for c in categories])
                    )
                    for r in rounds
                }
                for k in ks
            }
            for metric in ("hits", "recall", "map")
        }

    config = traces[0].config if traces else {}
    return EvalReport(
        dataset=dataset,
        ks=list(ks),
        rounds=list(rounds),
        cells=cells,
        map_best=map_best,
        rank_stats=stats,
        per_category=per_category,
        config=config,
        trace_digest=traces_digest(traces),
        failure_count=failure_count,
        warnings=warnings,
    )


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_report_json(path: str | Path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("schema") != REPORT_SCHEMA:
        raise MetricsError(f"unsupported report schema {obj.get('schema')!r}")
    return obj


def flatten_cells(report: dict) -> dict[tuple, float]:
    """All numeric metric cells of a report dict, keyed by their path.

    Config echo, digests, and warnings are not cells: two runs may differ
    in those while being metrically identical.
    """
    flat: dict[tuple, float] = {}
    for metric, per_k in report["cells"].items():
        for k, per_round in per_k.items():
            for r, value in per_round.items():
                flat[("", metric, k, r)] = float(value)
    for k, value in report["map_best"].items():
        flat[("", "map_best", k, "best")] = float(value)
    for r, stats in report["rank_stats"].items():
        flat[("", "rank_mean", "", r)] = float(stats["mean"])
        flat[("", "rank_median", "", r)] = float(stats["median"])
        flat[("", "rank_sentinels", "", r)] = float(stats["sentinel_count"])
    for category, metrics_ in report.get("per_category", {}).items():
        for metric, per_k in metrics_.items():
            for k, per_round in per_k.items():
                for r, value in per_round.items():
                    flat[(category, metric, k, r)] = float(value)
    return flat


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """One row per cell: full-precision value plus a 2-decimal display column."""
    flat = flatten_cells(report.to_dict())
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "category", "metric", "k", "round", "value", "display"])
        for (category, metric, k, r), value in sorted(flat.items()):
            writer.writerow(
                [report.dataset, category, metric, k, r, json.dumps(value), f"{value:.2f}"]
            )


def read_report_csv(path: str | Path) -> dict[tuple, float]:
    flat: dict[tuple, float] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["category"], row["metric"], row["k"], row["round"])
            flat[key] = json.loads(row["value"])
    return flat


def compare_reports(a: dict, b: dict, tolerance: float = 0.0) -> list[tuple]:
    """Cell-wise diff of two report dicts: [(path, value_a, value_b), ...]."""
    flat_a = flatten_cells(a)
    flat_b = flatten_cells(b)
    diffs = []
    for key in sorted(set(flat_a) | set(flat_b)):
        va = flat_a.get(key)
        vb = flat_b.get(key)
        if va is None or vb is None or abs(va - vb) > tolerance:
            diffs.append((key, va, vb))
    return diffs
