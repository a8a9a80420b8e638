"""The ten acceptance criteria, one test each.

Every test carries ``@pytest.mark.acceptance(n, title)``; conftest prints a
PASS/FAIL line per criterion at the end of the run. Run just these with
``pytest tests/test_acceptance.py -v``.
"""

import json
import random
import time
from decimal import ROUND_HALF_UP, Decimal, localcontext

import pytest

from conftest import random_transcript, sparse_track
from mmsi_harness.backends import ChatRequest, EndpointBackend, run_batch
from mmsi_harness.baseline import BaselineBackend
from mmsi_harness.cli import bundled_fixture_dir, main
from mmsi_harness.core import AnnotationTrack, FrameAnnotation, TaskKind, Transcript, Turn
from mmsi_harness.dataset import QueryAnchor, WindowConfig, build_forecast_target, build_online_samples
from mmsi_harness.evaluation import EvalRecord, aggregate_accuracy, expand_grid, report_columns, report_to_dict, run_grid
from mmsi_harness.forecasting import (
    ForecastTarget,
    ParseStatus,
    markov_speaker_baseline,
    parse_speaker_turns,
    parse_utterances,
    serialize_forecast,
)
from mmsi_harness.gap import offline_online_gap_check, synth_corpus
from mmsi_harness.pipeline import FrameRenderer
from mmsi_harness.render import OverlayOptions, assign_colors, compose_grid, grid6_indices, render_overlay
from mmsi_harness.synthetic import markov_speakers, synth_session, transition_matrix, write_frames
from stub_server import StubServer
from test_forecasting import EXAMPLE_COARSE, EXAMPLE_FINE
from test_render import GOLDEN_CASES, _check_golden, background, golden_scene

acceptance = pytest.mark.acceptance


# -- shared randomized corpus (criteria 1 and 2) --------------------------------

N_TRANSCRIPTS = 1000


def _task_anchors(rng, tr):
    out = []
    for i in range(len(tr.turns)):
        pronoun = rng.random() < 0.5
        task = TaskKind.PRONOUN_COREFERENCE if pronoun else TaskKind.SPEAKING_TARGET
        out.append(QueryAnchor(i, task, rng.randrange(tr.player_count), (0, 1) if pronoun else None))
    return out


@pytest.fixture(scope="module")
def causal_corpus():
    """(transcript, track, anchors, cfg) plus the samples built from them and the wall time spent."""
    start = time.perf_counter()
    rng = random.Random(2024)
    cases = []
    for k in range(N_TRANSCRIPTS):
        tr = random_transcript(rng, f"c{k:04d}", rng.randint(1, 200), rng.randint(2, 6), overlap=0.15)
        cfg = WindowConfig(rng.choice((1, 5, 10)), rng.choice((0, 2, 4, 8)))
        cases.append((tr, sparse_track(rng, tr), _task_anchors(rng, tr), cfg))
    built = [build_online_samples(tr, track, anchors, cfg) for tr, track, anchors, cfg in cases]
    return cases, built, time.perf_counter() - start


@acceptance(1, "causality suite")
def test_causality_suite(request, causal_corpus):
    cases, built, build_s = causal_corpus
    start = time.perf_counter()
    n_samples = violations = 0
    for samples in built:
        for s in samples:
            n_samples += 1
            if max(t.end for t in s.dialogue_window) > s.query_time_t:
                violations += 1
            if s.frame_window and max(f.timestamp for f in s.frame_window) > s.query_time_t:
                violations += 1
    elapsed = build_s + time.perf_counter() - start
    covered = {(cfg.d_turns, cfg.k_forecast) for _, _, _, cfg in cases}
    request.node.acceptance_detail = (
        f"{len(cases)} transcripts, {n_samples} samples, {violations} violations, {elapsed:.2f}s"
    )
    assert len(cases) >= 1000
    assert covered == {(d, k) for d in (1, 5, 10) for k in (0, 2, 4, 8)}
    assert violations == 0
    assert elapsed < 10.0


def _oracle(tr, track, anchor_index, d, k):
    """Plain index arithmetic: window, future speakers, query time, frames."""
    first = anchor_index - d + 1
    if first < 0:
        first = 0
    window_ids = list(range(first, anchor_index + 1))
    future_ids = [j for j in range(anchor_index + 1, anchor_index + 1 + k) if j < len(tr.turns)]
    t = tr.turns[window_ids[0]].end
    for j in window_ids:
        if tr.turns[j].end > t:
            t = tr.turns[j].end
    lo = tr.turns[window_ids[0]].start
    frame_ids = [n for n, f in enumerate(track.frames) if lo <= f.timestamp and f.timestamp <= t]
    return window_ids, future_ids, t, frame_ids


@acceptance(2, "window/forecast oracle")
def test_window_forecast_oracle(request, causal_corpus):
    cases, built, _ = causal_corpus
    checked = mismatches = 0
    for (tr, track, anchors, cfg), samples in zip(cases, built):
        assert len(samples) == len(anchors)
        for a, s in zip(anchors, samples):
            checked += 1
            w, fut, t, frames = _oracle(tr, track, a.turn_index, cfg.d_turns, cfg.k_forecast)
            target = build_forecast_target(tr, a.turn_index, cfg.k_forecast)
            ok = (
                s.dialogue_window == tuple(tr.turns[j] for j in w)
                and s.forecast_target.speakers == tuple(tr.turns[j].speaker for j in fut)
                and s.forecast_target.utterances == tuple((tr.turns[j].speaker, tr.turns[j].utterance) for j in fut)
                and target == s.forecast_target
                and s.query_time_t == t
                and s.frame_window == tuple(track.frames[n] for n in frames)
            )
            mismatches += not ok
    request.node.acceptance_detail = f"{checked - mismatches}/{checked} samples agree"
    assert mismatches == 0


# -- criterion 3 ------------------------------------------------------------------

_ALPHABET = "abcdefghijklmnopqrstuvwxyzABCXYZ0123456789.,!?'-:*()<> "


def _random_target(rng):
    k = rng.randint(0, 8)
    pairs = []
    for _ in range(k):
        words = ["".join(rng.choice(_ALPHABET.strip()) for _ in range(rng.randint(1, 10))) for _ in range(rng.randint(1, 8))]
        pairs.append((rng.randrange(6), " ".join(words)))
    return ForecastTarget.from_utterances(pairs)


@acceptance(3, "grammar round-trip")
def test_grammar_round_trip(request):
    rng = random.Random(3)
    ok = 0
    for _ in range(500):
        target = _random_target(rng)
        coarse, fine = serialize_forecast(target)
        speakers, s1 = parse_speaker_turns(coarse)
        if target.utterances:
            pairs, s2 = parse_utterances(fine)
            recovered = ForecastTarget.from_utterances(pairs)
        else:
            s2, recovered = ParseStatus.OK, ForecastTarget(tuple(speakers))
        ok += s1 is ParseStatus.OK and s2 is ParseStatus.OK and recovered == target and speakers == list(target.speakers)
    ref_speakers, ps = parse_speaker_turns(EXAMPLE_COARSE)
    ref_pairs, pu = parse_utterances(EXAMPLE_FINE)
    request.node.acceptance_detail = f"{ok}/500 round trips ok, reference strings -> {ref_speakers}"
    assert ok == 500
    assert (ref_speakers, ps) == ([0, 4, 0, 3], ParseStatus.OK)
    assert pu is ParseStatus.OK and [p for p, _ in ref_pairs] == [0, 4, 0, 3] and len(ref_pairs) == 4


# -- criterion 4 ------------------------------------------------------------------


@acceptance(4, "render determinism")
def test_render_determinism(request):
    scene, colors = golden_scene(), assign_colors(6)
    for name, opts in sorted(GOLDEN_CASES.items()):
        a = render_overlay(background(), scene, colors, opts)
        b = render_overlay(background(), scene, colors, opts)
        assert a.tobytes() == b.tobytes(), name
        _check_golden(name, a)
    tiles = [background(213, 120, s) for s in range(6)]
    g1, g2 = compose_grid(tiles), compose_grid([t.copy() for t in tiles])
    assert g1.tobytes() == g2.tobytes()
    _check_golden("grid6", g1)
    img = background(seed=7)
    for n in range(1, 7):
        blank = render_overlay(img, FrameAnnotation(0.0, "x", ()), assign_colors(n), OverlayOptions())
        assert blank.tobytes() == img.tobytes()
    picks = grid6_indices(30)
    request.node.acceptance_detail = f"{len(GOLDEN_CASES) + 1} goldens pixel-exact, grid6(30) = {picks}"
    assert picks == [0, 6, 12, 17, 23, 29]


# -- criterion 5 ------------------------------------------------------------------


def _decimal_accuracy(correct, total):
    with localcontext() as ctx:
        ctx.prec = 60
        return (Decimal(correct) / Decimal(total)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)


@acceptance(5, "metric oracle")
def test_metric_oracle(request):
    rng = random.Random(5)
    recs = []
    for i in range(10_000):
        gt = rng.randrange(6)
        raw = rng.choice((f"Player{gt}", f"Player{rng.randrange(6)}", "I cannot tell"))
        recs.append(EvalRecord.scored(f"r{i}", rng.choice(list(TaskKind)), raw, gt))
    got = aggregate_accuracy(recs)
    for task in TaskKind:
        mine = [r for r in recs if r.task is task]
        correct = sum(1 for r in mine if r.predicted is not None and r.predicted == r.ground_truth)
        assert got[task] == _decimal_accuracy(correct, len(mine)), task
    for _ in range(100):
        rng.shuffle(recs)
        assert aggregate_accuracy(recs) == got
    fixed = [EvalRecord.scored(f"f{i}", TaskKind.SPEAKING_TARGET, "Player1" if i < 647 else "Player2", 1) for i in range(1000)]
    shown = str(aggregate_accuracy(fixed)[TaskKind.SPEAKING_TARGET])
    request.node.acceptance_detail = f"10000 records match recount, 100 shuffles stable, 647/1000 -> {shown}"
    assert shown == "0.6470"


# -- criterion 6 ------------------------------------------------------------------


@acceptance(6, "end-to-end replay")
def test_end_to_end_replay(request, tmp_path):
    expected = json.loads((bundled_fixture_dir() / "expected.json").read_text())
    outputs = []
    for run in ("a", "b"):
        code = main(["--deterministic", "eval", "--backend", "replay", "--out", str(tmp_path / run)])
        assert code == 0
        outputs.append((tmp_path / run / "report.json").read_bytes())
    assert outputs[0] == outputs[1]
    (row,) = json.loads(outputs[0])["rows"]
    records = row["records"]
    request.node.acceptance_detail = f"exit 0, {len(records)} records, accuracy {row['accuracy']}"
    assert len(records) == expected["n"] == 50
    assert len({r["sample_id"] for r in records}) == 50
    assert all(r["error"] is None for r in records)
    assert row["accuracy"] == expected["accuracy"]


# -- criterion 7 ------------------------------------------------------------------


@acceptance(7, "offline to online gap")
def test_offline_online_gap(request):
    corpus = synth_corpus(5000, seed=0)
    table = offline_online_gap_check(corpus, 0.727, 0.591, n=5000, seed=0)
    extreme = offline_online_gap_check(corpus, 1.0, 0.0, n=5000, seed=0)
    request.node.acceptance_detail = (
        f"configured {table.arrow('configured')}, measured {table.arrow()} "
        f"(gap {table.measured_gap_points:.2f}), extremes gap {extreme.measured_gap_points}"
    )
    assert table.arrow("configured") == "72.7 → 59.1"
    assert abs(table.measured_gap_points - 13.6) <= 2.0
    assert extreme.measured_gap_points == 100.0


# -- criterion 8 ------------------------------------------------------------------

# A 0.7 hand-over peak caps even a predictor that knows the true matrix at
# about 1.49x chance over four positions for three players, so the chain
# here is sharper; the claim under test is the baseline, not the generator.
MARKOV_PEAK = 0.85


@acceptance(8, "baseline signal")
def test_markov_baseline_signal(request):
    cfg = WindowConfig()
    ratios = {}
    for pc in range(2, 7):
        rng = random.Random(800 + pc)
        hits, totals = [0] * cfg.k_forecast, [0] * cfg.k_forecast
        for s in range(20):
            speakers = markov_speakers(200, transition_matrix(pc, rng, MARKOV_PEAK), rng)
            tr = Transcript(f"mk{pc}-{s}", pc, tuple(Turn(p, "ok", 2.0 * i, 2.0 * i + 1.5) for i, p in enumerate(speakers)))
            anchors = [QueryAnchor(i, TaskKind.SPEAKING_TARGET, 0) for i in range(len(speakers))]
            for sample in build_online_samples(tr, AnnotationTrack(tr.session_id, ()), anchors, cfg):
                pred = markov_speaker_baseline(sample.dialogue_window, cfg.k_forecast, player_count=pc)
                for j, gold in enumerate(sample.forecast_target.speakers):
                    totals[j] += 1
                    hits[j] += pred[j] == gold
        per_position = [h / t for h, t in zip(hits, totals)]
        ratios[pc] = (sum(hits) / sum(totals) * pc, [round(a * pc, 2) for a in per_position])
    request.node.acceptance_detail = "x chance by players: " + ", ".join(
        f"{pc}p {mean:.2f} {pos}" for pc, (mean, pos) in ratios.items()
    )
    assert all(mean >= 1.5 for mean, _ in ratios.values())


# -- criterion 9 ------------------------------------------------------------------


@acceptance(9, "ablation grid shape")
def test_ablation_grid_shape(request, tmp_path):
    frames = tmp_path / "frames"
    s = synth_session("grid", 14, 4, seed=2, fps=0.5, resolution=(160, 90), anchor_rate=1.0)
    write_frames(s.track, frames)
    samples = build_online_samples(s.transcript, s.track, s.anchors[:4])
    configs = expand_grid({"forecast_k": [2, 4, 8], "overlay": ["text", "text+rect", "text+rect+point"]})
    report = run_grid(samples, BaselineBackend(), configs, FrameRenderer(frames, tmp_path / "img", (160, 90)),
                      model="Qwen", dataset="YouTube", deterministic=True)  # fmt: skip
    columns = report_columns(report)
    rows = report_to_dict(report, include_records=False)["rows"]
    shape = {(r["cells"]["Length"], r["cells"]["Text"], r["cells"]["Rect"], r["cells"]["Point"]) for r in rows}
    request.node.acceptance_detail = f"{len(rows)} rows; Length/Text/Rect/Point in columns"
    assert len(rows) == 9
    assert {"Length", "Text", "Rect", "Point"} <= set(columns)
    assert shape == {(k, "✓", r, p) for k in ("2", "4", "8") for r, p in (("-", "-"), ("✓", "-"), ("✓", "✓"))}


# -- criterion 10 -----------------------------------------------------------------


@acceptance(10, "concurrency contract")
def test_concurrency_contract(request):
    seen = []
    for limit in (1, 3, 8):
        with StubServer(delay_s=0.005) as srv:
            srv.state.scripts["FAIL"] = [500]
            backend = EndpointBackend(srv.base_url, "m", max_retries=1, sleep=lambda _s: None)
            reqs = [ChatRequest("", f"req {i} {'FAIL' if i % 10 == 0 else ''}") for i in range(100)]
            results = run_batch(backend, reqs, limit)
            backend.close()
        failures = sum(isinstance(r, Exception) for _, r in results)
        seen.append(f"limit {limit}: peak {srv.state.peak}, {len(results)} results, {failures} failed")
        assert len(results) == len(reqs)
        assert [i for i, _ in results] == list(range(100))
        assert failures == 10
        assert srv.state.peak <= limit
    request.node.acceptance_detail = "; ".join(seen)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
