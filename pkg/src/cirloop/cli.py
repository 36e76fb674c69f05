"""Operator entry point: run evaluations, forge benchmarks, diff reports, serve.

Exit codes: 0 success; 1 fatal error (bad config, missing data, bind
failure); 2 partial failure (some sessions failed but the run completed);
3 report diff beyond tolerance. Every flag has a config-file equivalent
and flags win; the effective configuration is echoed into run_meta.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import forge
from .compose import build_composer
from .errors import CirLoopError, ConfigError
from .feedback import build_simulator
from .metrics import (
    compare_reports,
    load_report_json,
    make_report,
    write_report_csv,
    write_report_json,
)
from .runconfig import (
    apply_overrides,
    build_composer_binding,
    build_eval_config,
    build_galleries,
    build_profile,
    build_simulator_binding,
    load_run_config,
)
from .session import load_triplets_jsonl, run_batch, write_traces_jsonl


def _echo_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "_base_dir"}


def cmd_eval(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    eval_config = build_eval_config(cfg)
    galleries = build_galleries(cfg)
    triplets = load_triplets_jsonl(
        Path(cfg["_base_dir"]) / cfg["triplets"]
        if not Path(cfg["triplets"]).is_absolute()
        else cfg["triplets"]
    )
    composer_binding = build_composer_binding(cfg)
    simulator_binding = build_simulator_binding(cfg)
    simulator = build_simulator(simulator_binding) if simulator_binding else None
    profile = build_profile(cfg)
    if simulator is None and eval_config.feedback_mode == "fresh" and eval_config.r_max > 1:
        raise ConfigError("multi-round fresh-feedback runs need a simulator binding")

    gallery_map = galleries if len(galleries) > 1 else {"default": next(iter(galleries.values()))}
    run = run_batch(
        triplets,
        gallery_map,
        eval_config,
        composer_factory=lambda g: build_composer(composer_binding, g),
        simulator=simulator,
        profile=profile,
        workers=int(cfg.get("workers", 1)),
    )

    report_cfg = cfg.get("report", {})
    ks = [int(k) for k in report_cfg.get("ks", [1, 5, 10, 50])]
    rounds = [int(r) for r in report_cfg.get("rounds", list(range(1, eval_config.r_max + 1)))]
    report = make_report(run, ks, rounds, dataset=cfg.get("dataset", "run"))

    out_dir = Path(cfg.get("out_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_traces_jsonl(run.traces, out_dir / "traces.jsonl")
    write_report_json(report, out_dir / "report.json")
    write_report_csv(report, out_dir / "report.csv")
    (out_dir / "run_meta.json").write_text(
        json.dumps(
            {
                "schema": "eval_run@1",
                "config": _echo_config(cfg),
                "config_hash": run.config_hash,
                "wall_time_s": run.wall_time_s,
                "n_traces": len(run.traces),
                "failure_count": run.failure_count,
                "failures": run.failures,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"traces: {len(run.traces)}  failures: {run.failure_count}  out: {out_dir}")
    return 2 if run.failure_count else 0


def cmd_forge_prompts(args) -> int:
    nouns = None
    if args.nouns:
        nouns = [n.strip() for n in Path(args.nouns).read_text("utf-8").splitlines() if n.strip()]
    out_rows = []
    with Path(args.input).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            category = row.get("category")
            if category in forge.LLM_PROMPT_CATEGORIES:
                job = forge.render_caption_prompt(
                    category, row["reference_caption"], row.get("source_dataset", "")
                )
                out_rows.append(
                    {
                        "kind": "llm_caption",
                        "category": job.category,
                        "reference_caption": job.reference_caption,
                        "rendered_prompt": job.rendered_prompt,
                        "source_dataset": job.source_dataset,
                    }
                )
            elif category == "cardinality":
                caption = forge.render_cardinality_caption(int(row["num"]), row["noun"], nouns)
                out = {"kind": "cardinality_caption", "category": category, "caption": caption}
                if "to_num" in row:
                    out["relative_caption"] = forge.render_cardinality_relative(
                        row.get("template_id", "cardinality_relative_change"),
                        int(row["num"]),
                        int(row["to_num"]),
                    )
                out_rows.append(out)
            elif category == "complex":
                kept = forge.filter_complex_sources([row])
                if kept:
                    out_rows.append({"kind": "complex_source", "category": category, **row})
            else:
                raise ConfigError(f"{args.input}:{lineno}: unknown category {category!r}")
    with Path(args.out).open("w", encoding="utf-8") as fh:
        for row in out_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {len(out_rows)} prompt rows to {args.out}")
    return 0


def cmd_forge_manifest(args) -> int:
    rows = []
    with Path(args.input).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    manifest = forge.make_generation_manifest(rows, args.seed, args.model_id)
    forge.write_generation_manifest(manifest, args.out)
    print(f"wrote {len(manifest.records)} generation jobs to {args.out}")
    return 0


def cmd_forge_validate(args) -> int:
    rows = forge.load_manifest_rows(args.triplets)
    galleries = None
    if args.config:
        galleries = build_galleries(load_run_config(args.config))
    generation = forge.read_generation_manifest(args.generation) if args.generation else None
    report = forge.validate_benchmark(rows, galleries, generation)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    for violation in report.violations:
        print(f"violation: {violation}", file=sys.stderr)
    print("pass" if report.passed else f"fail ({len(report.violations)} violations)")
    return 0 if report.passed else 1


def cmd_report_diff(args) -> int:
    a = load_report_json(args.report_a)
    b = load_report_json(args.report_b)
    diffs = compare_reports(a, b, tolerance=args.tolerance)
    for (category, metric, k, r), va, vb in diffs:
        cat = category or "-"
        print(f"{cat}/{metric}@{k} round {r}: {va} != {vb}")
    if diffs:
        print(f"{len(diffs)} differing cell(s)")
        return 3
    print("reports identical within tolerance")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = load_run_config(args.config)
    service_cfg = cfg.get("service", {})
    galleries = build_galleries(cfg)
    triplets = {}
    if cfg.get("triplets"):
        path = Path(cfg["triplets"])
        if not path.is_absolute():
            path = Path(cfg["_base_dir"]) / path
        triplets = {t.triplet_id: t for t in load_triplets_jsonl(path)}
    store_path = service_cfg.get("store_path", "sessions.db")
    if not Path(store_path).is_absolute():
        store_path = str(Path(cfg["_base_dir"]) / store_path)
    config = ServiceConfig(
        galleries=galleries,
        store_path=store_path,
        triplets=triplets,
        eval_config=build_eval_config(cfg),
        composer_binding=build_composer_binding(cfg),
        simulator_binding=build_simulator_binding(cfg),
        profile=build_profile(cfg),
        default_mode=service_cfg.get("mode", "study"),
        ttl_s=float(service_cfg.get("ttl_s", 24 * 3600)),
        auth_token=os.environ.get("CIRLOOP_AUTH_TOKEN", service_cfg.get("auth_token")),
        cors_origin=service_cfg.get("cors_origin", "*"),
    )
    port = args.port if args.port is not None else int(service_cfg.get("port", 8008))
    try:
        uvicorn.run(create_app(config), host=args.host, port=port, log_level="warning")
    except (OSError, SystemExit) as exc:
        print(f"serve failed: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cirloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="run a multi-round evaluation batch")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--rmax", type=int)
    p_eval.add_argument("--topm", type=int)
    p_eval.add_argument("--stop-k", dest="stop_k", type=int)
    p_eval.add_argument("--history", choices=["mean", "last"])
    p_eval.add_argument("--feedback", choices=["fresh", "frozen"])
    p_eval.add_argument("--next-ref", dest="next_ref")
    p_eval.add_argument("--pool-narrow", dest="pool_narrow", type=int)
    p_eval.add_argument("--exclude", choices=["none", "current", "all"])
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--workers", type=int)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=cmd_eval)

    p_forge = sub.add_parser("forge", help="benchmark construction pipeline")
    forge_sub = p_forge.add_subparsers(dest="forge_command", required=True)

    p_prompts = forge_sub.add_parser("prompts", help="render caption-generation prompts")
    p_prompts.add_argument("--input", required=True)
    p_prompts.add_argument("--out", required=True)
    p_prompts.add_argument("--nouns")
    p_prompts.set_defaults(func=cmd_forge_prompts)

    p_manifest = forge_sub.add_parser("manifest", help="emit seed-locked generation jobs")
    p_manifest.add_argument("--input", required=True)
    p_manifest.add_argument("--out", required=True)
    p_manifest.add_argument("--seed", type=int, default=0)
    p_manifest.add_argument("--model-id", dest="model_id", default="sdxl-base-1.0")
    p_manifest.set_defaults(func=cmd_forge_manifest)

    p_validate = forge_sub.add_parser("validate", help="validate a benchmark manifest")
    p_validate.add_argument("--triplets", required=True)
    p_validate.add_argument("--config", help="run config providing the subset galleries")
    p_validate.add_argument("--generation", help="generation manifest to check seed sharing")
    p_validate.add_argument("--out", help="write the validation report JSON here")
    p_validate.set_defaults(func=cmd_forge_validate)

    p_report = sub.add_parser("report", help="report utilities")
    report_sub = p_report.add_subparsers(dest="report_command", required=True)
    p_diff = report_sub.add_parser("diff", help="cell-wise comparison of two reports")
    p_diff.add_argument("report_a")
    p_diff.add_argument("report_b")
    p_diff.add_argument("--tolerance", type=float, default=0.0)
    p_diff.set_defaults(func=cmd_report_diff)

    p_serve = sub.add_parser("serve", help="run the interactive session service")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--port", type=int)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CirLoopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
