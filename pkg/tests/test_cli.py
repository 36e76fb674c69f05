"""CLI: eval/forge/report/serve subcommands, exit codes, overrides."""

from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest
import requests

from cirloop.cli import main
from cirloop.gallery import write_gallery
from cirloop.session import write_triplets_jsonl
from cirloop.synthetic import make_random_gallery, make_synthetic_triplets


def build_workspace(tmp_path: Path, n_triplets: int = 8, broken: bool = False) -> Path:
    gallery = make_random_gallery(40, 8, seed=2, gallery_id="main")
    write_gallery(gallery, tmp_path / "main.cirv")
    triplets = make_synthetic_triplets(gallery, n_triplets, seed=3)
    rows_path = tmp_path / "triplets.jsonl"
    write_triplets_jsonl(triplets, rows_path)
    if broken:
        with rows_path.open("a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {
                        "triplet_id": "zz-broken",
                        "reference_id": "ghost",
                        "target_ids": ["img0001"],
                        "relative_caption": "whatever",
                    }
                )
                + "\n"
            )
    config = {
        "dataset": "toy",
        "galleries": {"default": {"path": "main.cirv", "format": "binary"}},
        "triplets": "triplets.jsonl",
        "out_dir": str(tmp_path / "out"),
        "eval": {"r_max": 3, "m": 20, "history_mode": "last_only", "seed": 0},
        "composer": {"kind": "toy", "toy_beta": 0.4, "toy_seed": 0},
        "simulator": {"kind": "oracle", "alpha": 1.0},
        "report": {"ks": [1, 5, 10], "rounds": [1, 2, 3]},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config, indent=2))
    return config_path


def test_eval_happy_path(tmp_path):
    config_path = build_workspace(tmp_path)
    assert main(["eval", "--config", str(config_path)]) == 0
    out = tmp_path / "out"
    assert (out / "traces.jsonl").exists()
    assert (out / "report.json").exists()
    assert (out / "report.csv").exists()
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["failure_count"] == 0
    assert meta["config"]["dataset"] == "toy"


def test_eval_missing_gallery_is_fatal(tmp_path):
    config_path = build_workspace(tmp_path)
    cfg = json.loads(config_path.read_text())
    cfg["galleries"]["default"]["path"] = "missing.cirv"
    config_path.write_text(json.dumps(cfg))
    assert main(["eval", "--config", str(config_path)]) == 1


def test_eval_partial_failure_exit_2(tmp_path):
    config_path = build_workspace(tmp_path, broken=True)
    assert main(["eval", "--config", str(config_path)]) == 2
    meta = json.loads((tmp_path / "out" / "run_meta.json").read_text())
    assert meta["failure_count"] == 1
    assert meta["failures"][0]["triplet_id"] == "zz-broken"


def test_eval_unknown_config_key_rejected(tmp_path):
    config_path = build_workspace(tmp_path)
    cfg = json.loads(config_path.read_text())
    cfg["eval"]["typo_knob"] = 1
    config_path.write_text(json.dumps(cfg))
    assert main(["eval", "--config", str(config_path)]) == 1


def test_eval_flag_overrides_echoed(tmp_path):
    config_path = build_workspace(tmp_path)
    out2 = tmp_path / "other_out"
    code = main(
        [
            "eval", "--config", str(config_path),
            "--rmax", "2", "--history", "mean", "--seed", "9",
            "--out", str(out2),
        ]
    )
    assert code == 0
    meta = json.loads((out2 / "run_meta.json").read_text())
    assert meta["config"]["eval"]["r_max"] == 2
    assert meta["config"]["eval"]["history_mode"] == "mean"
    assert meta["config"]["eval"]["seed"] == 9
    traces = (out2 / "traces.jsonl").read_text().strip().splitlines()
    assert json.loads(traces[0])["config"]["r_max"] == 2


def test_forge_prompts_deterministic(tmp_path):
    rows = [
        {"category": "addition", "reference_caption": "a dog on grass"},
        {"category": "cardinality", "num": 3, "noun": "dogs", "to_num": 5},
        {"category": "complex", "caption": " ".join(["w"] * 30)},
        {"category": "complex", "caption": "too short"},
    ]
    inp = tmp_path / "refs.jsonl"
    inp.write_text("".join(json.dumps(r) + "\n" for r in rows))
    out1 = tmp_path / "jobs1.jsonl"
    out2 = tmp_path / "jobs2.jsonl"
    assert main(["forge", "prompts", "--input", str(inp), "--out", str(out1)]) == 0
    assert main(["forge", "prompts", "--input", str(inp), "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = [json.loads(line) for line in out1.read_text().splitlines()]
    assert len(lines) == 3  # the short complex row was filtered out
    assert lines[0]["kind"] == "llm_caption"
    assert lines[1]["caption"] == "a real-life image of 3 dogs."
    assert "5" in lines[1]["relative_caption"]


def test_forge_manifest_and_validate_roundtrip(tmp_path):
    from cirloop.synthetic import make_synthetic_benchmark

    triplets, galleries = make_synthetic_benchmark(d=4, seed=5)
    bench_path = tmp_path / "bench.jsonl"
    write_triplets_jsonl(triplets, bench_path)
    for category, gallery in galleries.items():
        write_gallery(gallery, tmp_path / f"{category}.cirv")
    config = {
        "galleries": {
            category: {"path": f"{category}.cirv", "format": "binary"}
            for category in galleries
        }
    }
    config_path = tmp_path / "galleries.json"
    config_path.write_text(json.dumps(config))

    gen_in = tmp_path / "captions.jsonl"
    gen_in.write_text(
        "".join(
            json.dumps({"triplet_id": t.triplet_id, "ref_prompt": "r", "tgt_prompt": "t"}) + "\n"
            for t in triplets
        )
    )
    gen_out = tmp_path / "gen.jsonl"
    assert main(
        ["forge", "manifest", "--input", str(gen_in), "--out", str(gen_out), "--seed", "4"]
    ) == 0

    report_path = tmp_path / "validation.json"
    code = main(
        [
            "forge", "validate",
            "--triplets", str(bench_path),
            "--config", str(config_path),
            "--generation", str(gen_out),
            "--out", str(report_path),
        ]
    )
    assert code == 0
    assert json.loads(report_path.read_text())["passed"] is True


def test_forge_validate_fails_on_violation(tmp_path):
    from cirloop.synthetic import make_synthetic_benchmark

    triplets, _ = make_synthetic_benchmark(d=4, seed=5)
    bench_path = tmp_path / "bench.jsonl"
    write_triplets_jsonl(triplets[:-1], bench_path)  # 199 in the last category
    assert main(["forge", "validate", "--triplets", str(bench_path)]) == 1


def test_report_diff_self_and_seeds(tmp_path):
    config_path = build_workspace(tmp_path)
    assert main(["eval", "--config", str(config_path)]) == 0
    report_a = tmp_path / "out" / "report.json"
    assert main(["report", "diff", str(report_a), str(report_a)]) == 0

    # top1 policy plus oracle feedback: the seed is inert, reports match
    out_b = tmp_path / "out_b"
    assert main(["eval", "--config", str(config_path), "--seed", "777", "--out", str(out_b)]) == 0
    assert main(["report", "diff", str(report_a), str(out_b / "report.json")]) == 0


def test_report_diff_detects_edit(tmp_path):
    config_path = build_workspace(tmp_path)
    assert main(["eval", "--config", str(config_path)]) == 0
    report_a = tmp_path / "out" / "report.json"
    edited = json.loads(report_a.read_text())
    edited["cells"]["hits"]["1"]["1"] += 0.5
    report_b = tmp_path / "edited.json"
    report_b.write_text(json.dumps(edited))
    assert main(["report", "diff", str(report_a), str(report_b), "--tolerance", "0.01"]) == 3
    assert main(["report", "diff", str(report_a), str(report_b), "--tolerance", "0.6"]) == 0


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_for(url: str, timeout: float = 10.0) -> None:
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            requests.get(url, timeout=0.5)
            return
        except requests.RequestException:
            time.sleep(0.1)
    raise TimeoutError(f"service at {url} never came up")


def serve_proc(config_path: Path, port: int) -> subprocess.Popen:
    return subprocess.Popen(
        [sys.executable, "-m", "cirloop.cli", "serve", "--config", str(config_path),
         "--port", str(port)],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )


@pytest.mark.slow
def test_serve_end_to_end_with_restart(tmp_path):
    config_path = build_workspace(tmp_path)
    cfg = json.loads(config_path.read_text())
    cfg["service"] = {"store_path": "sessions.db", "mode": "study"}
    config_path.write_text(json.dumps(cfg))
    port = free_port()
    proc = serve_proc(config_path, port)
    try:
        base = f"http://127.0.0.1:{port}"
        wait_for(f"{base}/v1/galleries")
        assert requests.get(f"{base}/v1/galleries").status_code == 200
        triplet_id = json.loads(
            (tmp_path / "triplets.jsonl").read_text().splitlines()[0]
        )["triplet_id"]
        created = requests.post(
            f"{base}/v1/sessions", json={"triplet_id": triplet_id, "gallery_id": "default"}
        )
        assert created.status_code == 201
        sid = created.json()["session_id"]
        requests.post(f"{base}/v1/sessions/{sid}/feedback", json={"caption": "warmer colors"})
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=10)
    finally:
        if proc.poll() is None:
            proc.kill()

    proc2 = serve_proc(config_path, port)
    try:
        base = f"http://127.0.0.1:{port}"
        wait_for(f"{base}/v1/galleries")
        state = requests.get(f"{base}/v1/sessions/{sid}")
        assert state.status_code == 200
        assert state.json()["round"] == 2
    finally:
        proc2.send_signal(signal.SIGTERM)
        try:
            proc2.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc2.kill()


@pytest.mark.slow
def test_serve_busy_port_exit_1(tmp_path):
    config_path = build_workspace(tmp_path)
    port = free_port()
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", port))
    blocker.listen(1)
    try:
        proc = serve_proc(config_path, port)
        assert proc.wait(timeout=15) == 1
    finally:
        blocker.close()
