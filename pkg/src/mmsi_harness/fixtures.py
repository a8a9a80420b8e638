"""Regenerates the bundled 50-sample replay fixture.

The fixture is built entirely from seeded synthetic sessions and answered
by the heuristic baseline, so it can be rebuilt bit-for-bit::

    python -m mmsi_harness.fixtures src/mmsi_harness/data/replay50
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from mmsi_harness.backends import RecordingBackend
from mmsi_harness.baseline import BaselineBackend
from mmsi_harness.core import TaskKind
from mmsi_harness.dataset import OnlineSample, WindowConfig, build_online_samples, write_samples
from mmsi_harness.evaluation import AblationConfig, report_to_dict, run_grid
from mmsi_harness.pipeline import PrerenderedPrompts, render_sample_images, write_prompts
from mmsi_harness.prompts import assemble
from mmsi_harness.render import Grid6, OverlayOptions, assign_colors
from mmsi_harness.synthetic import synth_session, write_frames

FIXTURE_SIZE = 50
FIXTURE_RESOLUTION = (160, 90)
FIXTURE_ABLATION = {"modality": "L+V", "forecast": "both", "forecast_k": 4}
_SESSIONS = (("s01", 5), ("s02", 6), ("s03", 4), ("s04", 5))


def fixture_samples(frames_dir: Path, n: int = FIXTURE_SIZE, seed: int = 0) -> list[OnlineSample]:
    """Balanced samples across tasks, with frames written under ``frames_dir``."""
    per_task: dict[TaskKind, list[OnlineSample]] = {t: [] for t in TaskKind}
    for sid, pc in _SESSIONS:
        s = synth_session(sid, 40, pc, seed, fps=0.25, anchor_rate=0.6)
        write_frames(s.track, frames_dir)
        for sample in build_online_samples(s.transcript, s.track, s.anchors, WindowConfig()):
            per_task[sample.task].append(sample)
    chosen: list[OnlineSample] = []
    while len(chosen) < n and any(per_task.values()):
        for t in TaskKind:
            if per_task[t] and len(chosen) < n:
                chosen.append(per_task[t].pop(0))
    if len(chosen) < n:
        raise RuntimeError(f"synthetic sessions produced only {len(chosen)} samples")
    return chosen


def build_replay_fixture(out_dir: str | Path, seed: int = 0) -> dict:
    """Write samples, rendered prompts, replay table and expected report into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overlay = OverlayOptions(True, True, True)
    mode = Grid6()
    with tempfile.TemporaryDirectory() as tmp:
        samples = fixture_samples(Path(tmp), seed=seed)
        prompts = []
        for s in samples:
            refs = render_sample_images(s, tmp, out / "images", overlay, mode, FIXTURE_RESOLUTION, ref_base=out)
            prompts.append(assemble(s, refs, assign_colors(s.player_count) if refs else None))
    write_samples(samples, out / "samples.jsonl")
    write_prompts(prompts, out / "prompts.jsonl")
    render = {
        "overlay": overlay.label,
        "keypoint_confidence_threshold": overlay.keypoint_confidence_threshold,
        "mode": mode.label,
        "resolution": list(FIXTURE_RESOLUTION),
        "highlight_pronoun": True,
    }
    (out / "render.json").write_text(json.dumps(render, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(FIXTURE_ABLATION, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    source = PrerenderedPrompts.from_file(out / "prompts.jsonl")
    base = AblationConfig(overlay=overlay, mode=mode)
    grid = [AblationConfig.from_dict({**base.to_dict(), **FIXTURE_ABLATION}).normalized()]
    recorder = RecordingBackend(BaselineBackend(seed))
    report = run_grid(samples, recorder, grid, source, jobs=1, model="replay", deterministic=True)
    recorder.save(out / "replay.json")
    summary = report_to_dict(report, include_records=False)
    expected = {"n": len(report.rows[0].records), "accuracy": summary["rows"][0]["accuracy"]}
    (out / "expected.json").write_text(json.dumps(expected, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return expected


if __name__ == "__main__":  # pragma: no cover
    print(json.dumps(build_replay_fixture(sys.argv[1] if len(sys.argv) > 1 else "replay50"), indent=1))
