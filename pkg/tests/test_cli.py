import json
from pathlib import Path

import pytest

from mmsi_harness.cli import bundled_fixture_dir, main
from mmsi_harness.core import dump_annotations, dump_transcript
from mmsi_harness.synthetic import synth_session, write_frames


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    for d in ("transcripts", "annotations", "anchors", "frames"):
        (root / d).mkdir()
    for sid, pc in (("g1", 4), ("g2", 5)):
        s = synth_session(sid, 25, pc, seed=9, fps=0.5)
        dump_transcript(s.transcript, root / "transcripts" / f"{sid}.jsonl")
        dump_annotations(s.track, root / "annotations" / f"{sid}.json")
        (root / "anchors" / f"{sid}.jsonl").write_text("".join(json.dumps(a.to_dict()) + "\n" for a in s.anchors))
        write_frames(s.track, root / "frames")
    return root


def _build(corpus, out, *extra):
    return main([
        "--deterministic", "build-dataset",
        "--transcripts", str(corpus / "transcripts"),
        "--annotations", str(corpus / "annotations"),
        "--anchors", str(corpus / "anchors"),
        "--out", str(out), *extra,
    ])  # fmt: skip


def test_build_dataset_defaults_and_manifest(corpus, tmp_path):
    assert _build(corpus, tmp_path / "ds", "--sft") == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["settings"]["d"] == 10 and manifest["settings"]["k"] == 4
    assert manifest["started_at"] == manifest["finished_at"] == "1970-01-01T00:00:00Z"
    assert set(manifest["input_digests"]) == {"transcripts", "annotations", "anchors"}
    samples = (tmp_path / "ds" / "samples.jsonl").read_text().splitlines()
    sft = (tmp_path / "ds" / "sft.jsonl").read_text().splitlines()
    assert len(sft) == len(samples) + 1


def test_task_filter(corpus, tmp_path):
    assert _build(corpus, tmp_path / "ds", "--task", "MentionedPlayer") == 0
    rows = [json.loads(x) for x in (tmp_path / "ds" / "samples.jsonl").read_text().splitlines()]
    assert rows and all(r["task"] == "MentionedPlayer" for r in rows)


def test_full_pipeline_is_byte_identical(corpus, tmp_path):
    outs = []
    for run in ("a", "b"):
        base = tmp_path / run
        assert _build(corpus, base / "ds") == 0
        assert main([
            "render", "--samples", str(base / "ds" / "samples.jsonl"), "--frames-dir", str(corpus / "frames"),
            "--prompt-text", "--prompt-rect", "--prompt-point", "--mode", "grid6", "--resolution", "160x90",
            "--out", str(base / "rendered"), "--deterministic",
        ]) == 0  # fmt: skip
        grid = json.dumps({"forecast_k": [2, 4], "modality": ["L", "L+V"]})
        code = main([
            "eval", "--prompts", str(base / "rendered" / "prompts.jsonl"), "--backend", "baseline",
            "--ablation", grid, "--jobs", "3", "--out", str(base / "eval"), "--deterministic",
        ])  # fmt: skip
        assert code == 0
        outs.append(base)
    for rel in ("ds/samples.jsonl", "rendered/prompts.jsonl", "eval/report.json", "eval/report.tsv", "eval/manifest.json"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
    report = json.loads((outs[0] / "eval" / "report.json").read_text())
    assert len(report["rows"]) == 4
    render = json.loads((outs[0] / "rendered" / "render.json").read_text())
    assert render["mode"] == "grid6" and render["overlay"] == "text+rect+point"


def test_report_subcommand(tmp_path, capsys):
    assert main(["--deterministic", "eval", "--backend", "replay", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    for fmt in ("table", "json", "tsv"):
        assert main(["report", "--in", str(tmp_path / "report.json"), "--format", fmt]) == 0
    out = capsys.readouterr().out
    assert "Speaking Target" in out


def test_replay_misses_give_exit_one(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    code = main(["eval", "--backend", "replay", "--fixture", str(empty), "--out", str(tmp_path / "o"),
                 "--prompts", str(bundled_fixture_dir() / "prompts.jsonl")])  # fmt: skip
    assert code == 1
    data = json.loads((tmp_path / "o" / "report.json").read_text())
    assert data["rows"][0]["errors"] == 50


def test_usage_and_io_exit_codes(tmp_path, capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["gap-check", "--p-offline", "0.2", "--p-online", "0.5", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--backend", "baseline", "--out", str(tmp_path)]) == 2
    missing = tmp_path / "nope"
    code = main(["build-dataset", "--transcripts", str(missing), "--annotations", str(missing),
                 "--anchors", str(missing), "--out", str(tmp_path / "x")])  # fmt: skip
    assert code == 3
    bad_cfg = tmp_path / "c.ini"
    bad_cfg.write_text("[backend]\nmystery = 1\n")
    assert main(["eval", "--backend", "replay", "--config", str(bad_cfg), "--out", str(tmp_path / "y")]) == 2


def test_gap_check_command(tmp_path, capsys):
    code = main(["--deterministic", "gap-check", "--p-offline", "1", "--p-online", "0", "--n", "200", "--out", str(tmp_path)])
    assert code == 0
    data = json.loads((tmp_path / "gap.json").read_text())
    assert data["measured_gap_points"] == 100.0
    assert Path(tmp_path / "manifest.json").exists()
    assert "100.0 → 0.0" in capsys.readouterr().out
