"""Seeded synthetic sessions: transcripts, annotation tracks, anchors and frames.

Speakers follow a first-order Markov chain. Each turn's referent is the
next different speaker, so future context really does reveal the answer.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mmsi_harness.core import AnnotationTrack, FrameAnnotation, PersonAnnotation, TaskKind, Transcript, Turn
from mmsi_harness.dataset import QueryAnchor
from mmsi_harness.render import save_png

# Unit-box joint positions (x, y) in COCO-17 order.
_POSE = (
    (0.50, 0.10), (0.45, 0.08), (0.55, 0.08), (0.40, 0.10), (0.60, 0.10),
    (0.30, 0.25), (0.70, 0.25), (0.20, 0.42), (0.80, 0.42), (0.15, 0.58),
    (0.85, 0.58), (0.38, 0.60), (0.62, 0.60), (0.37, 0.80), (0.63, 0.80),
    (0.36, 0.97), (0.64, 0.97),
)  # fmt: skip

_MENTION = ("I think {p} is the werewolf.", "{p}, what did you see?", "Did {p} swap cards with me?", "I trust {p}.")
_PRONOUN = ("I robbed with you.", "Did you swap my card?", "So you were the Seer?", "I saw you move.")
_NEUTRAL = ("I was the Troublemaker.", "I didn't look at anything.", "Yes.", "That makes sense.", "Hmm, not sure.")


def transition_matrix(player_count: int, rng: random.Random, peak: float = 0.7) -> list[list[float]]:
    """Each speaker hands over to one favored successor with probability ``peak``."""
    if player_count < 2:
        return [[1.0]]
    succ = list(range(player_count))
    while any(succ[a] == a for a in range(player_count)):
        rng.shuffle(succ)
    rest = (1.0 - peak) / (player_count - 2) if player_count > 2 else 0.0
    rows = []
    for a in range(player_count):
        row = [0.0 if b == a else rest for b in range(player_count)]
        row[succ[a]] = peak if player_count > 2 else 1.0
        rows.append(row)
    return rows


def markov_speakers(n: int, matrix: Sequence[Sequence[float]], rng: random.Random) -> list[int]:
    pc = len(matrix)
    cur = rng.randrange(pc)
    out = [cur]
    for _ in range(n - 1):
        cur = rng.choices(range(pc), weights=matrix[cur])[0]
        out.append(cur)
    return out


def _referent(speakers: Sequence[int], i: int, player_count: int) -> int:
    me = speakers[i]
    for s in speakers[i + 1 :]:
        if s != me:
            return s
    for s in reversed(speakers[:i]):
        if s != me:
            return s
    return (me + 1) % player_count


@dataclass(frozen=True)
class SyntheticSession:
    transcript: Transcript
    track: AnnotationTrack
    anchors: tuple[QueryAnchor, ...]
    matrix: tuple[tuple[float, ...], ...]


def synth_session(
    session_id: str,
    n_turns: int,
    player_count: int,
    seed: int,
    fps: float = 2.0,
    resolution: tuple[int, int] = (640, 360),
    matrix: Sequence[Sequence[float]] | None = None,
    anchor_rate: float = 0.5,
) -> SyntheticSession:
    rng = random.Random(f"{session_id}:{seed}")
    if matrix is None:
        matrix = transition_matrix(player_count, rng)
    speakers = markov_speakers(n_turns, matrix, rng)
    turns, anchors = [], []
    t = rng.uniform(0.0, 1.0)
    for i, sp in enumerate(speakers):
        ref = _referent(speakers, i, player_count) if player_count > 1 else 0
        kind = rng.random()
        if kind < 0.3 and player_count > 1:
            template = rng.choice(_MENTION)
            name = f"Player{ref}"
            text = template.format(p=name)
            s = template.index("{p}")
            span = (s, s + len(name))
            task = TaskKind.MENTIONED_PLAYER
        elif kind < 0.6 and player_count > 1:
            text = rng.choice(_PRONOUN)
            s = text.lower().index("you")
            span = (s, s + 3)
            task = TaskKind.PRONOUN_COREFERENCE
        else:
            text, span, task = rng.choice(_NEUTRAL), None, TaskKind.SPEAKING_TARGET
        dur = rng.uniform(1.0, 4.6)
        turns.append(Turn(sp, text, round(t, 3), round(t + dur, 3)))
        t += dur + rng.uniform(0.05, 0.3)
        if player_count > 1 and rng.random() < anchor_rate:
            anchors.append(QueryAnchor(i, task, ref, span))
    transcript = Transcript(session_id, player_count, tuple(turns))
    track = synth_track(transcript, fps, resolution, rng)
    return SyntheticSession(transcript, track, tuple(anchors), tuple(tuple(r) for r in matrix))


def synth_person(player: int, player_count: int, resolution: tuple[int, int], rng: random.Random) -> PersonAnnotation:
    w, h = resolution
    cell = w / player_count
    bw, bh = cell * 0.6, h * 0.7
    x = cell * player + cell * 0.2 + rng.uniform(-2, 2)
    y = h * 0.2 + rng.uniform(-2, 2)
    kps = []
    for j, (ux, uy) in enumerate(_POSE):
        conf = 0.0 if rng.random() < 0.08 else round(rng.uniform(0.35, 1.0), 3)
        kps.append((round(x + ux * bw, 2), round(y + uy * bh, 2), conf))
    return PersonAnnotation(player, (round(x, 2), round(y, 2), round(bw, 2), round(bh, 2)), tuple(kps))


def synth_track(
    transcript: Transcript, fps: float, resolution: tuple[int, int], rng: random.Random
) -> AnnotationTrack:
    end = transcript.turns[-1].end if transcript.turns else 0.0
    frames = []
    n = int(end * fps) + 1
    for k in range(n):
        ts = round(k / fps, 3)
        persons = tuple(synth_person(p, transcript.player_count, resolution, rng) for p in range(transcript.player_count))
        frames.append(FrameAnnotation(ts, f"{transcript.session_id}/{k:05d}.png", persons))
    return AnnotationTrack(transcript.session_id, tuple(frames), resolution)


def synth_frame_image(resolution: tuple[int, int], index: int) -> np.ndarray:
    """Deterministic smooth background that varies with ``index``."""
    w, h = resolution
    ys = np.linspace(0, 1, h, dtype=np.float64)[:, None]
    xs = np.linspace(0, 1, w, dtype=np.float64)[None, :]
    phase = (index % 17) / 17.0
    r = 60 + 60 * ys + 20 * phase + 0 * xs
    g = 70 + 50 * xs + 0 * ys
    b = 90 + 40 * (1 - ys) + 30 * phase + 0 * xs
    return np.stack([r, g, b], axis=-1).round().astype(np.uint8)


def write_frames(track: AnnotationTrack, frames_dir: str | Path) -> None:
    root = Path(frames_dir)
    for k, f in enumerate(track.frames):
        p = root / f.frame_ref
        p.parent.mkdir(parents=True, exist_ok=True)
        save_png(synth_frame_image(track.source_resolution, k), p)
