import random
from pathlib import Path

import pytest

from mmsi_harness.core import AnnotationTrack, FrameAnnotation, PersonAnnotation, TaskKind, Transcript, Turn
from mmsi_harness.dataset import QueryAnchor

GOLDEN_DIR = Path(__file__).parent / "golden"

WORDS = ("I", "was", "the", "Seer", "you", "robbed", "me", "swap", "werewolf", "card", "maybe", "no", "yes")


def random_transcript(rng: random.Random, session_id: str, n_turns: int, player_count: int, overlap: float = 0.1):
    """Turns with strictly increasing starts; some overlap or nest inside the previous one."""
    turns, t = [], rng.uniform(0, 2)
    for _ in range(n_turns):
        dur = rng.uniform(0.2, 6.0)
        speaker = rng.randrange(player_count)
        text = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 8)))
        turns.append(Turn(speaker, text, round(t, 3), round(t + dur, 3)))
        if rng.random() < overlap:
            t += rng.uniform(0.01, dur)  # next turn starts before this one ends
        else:
            t += dur + rng.uniform(0.0, 1.0)
    return Transcript(session_id, player_count, tuple(turns))


def sparse_track(rng: random.Random, transcript: Transcript, fps: float | None = None, with_people: bool = False):
    """Frames across (and a little past) the transcript, optionally with people in them."""
    end = max((t.end for t in transcript.turns), default=0.0) + 3.0
    fps = fps or rng.choice((0.5, 1.0, 2.0, 3.0))
    frames, k = [], 0
    offset = rng.uniform(0, 1 / fps)
    while offset + k / fps <= end:
        persons = ()
        if with_people:
            persons = tuple(random_person(rng, p) for p in range(transcript.player_count))
        frames.append(FrameAnnotation(round(offset + k / fps, 4), f"{transcript.session_id}/{k:05d}.png", persons))
        k += 1
    return AnnotationTrack(transcript.session_id, tuple(frames))


def random_person(rng: random.Random, player: int, w: int = 640, h: int = 360) -> PersonAnnotation:
    x, y = rng.uniform(0, w - 60), rng.uniform(0, h - 120)
    bw, bh = rng.uniform(30, 120), rng.uniform(60, 200)
    kps = tuple((x + rng.uniform(0, bw), y + rng.uniform(0, bh), rng.choice((0.0, 0.2, 0.5, 0.9))) for _ in range(17))
    return PersonAnnotation(player, (x, y, bw, bh), kps)


def all_anchors(rng: random.Random, transcript: Transcript) -> list[QueryAnchor]:
    """One SpeakingTarget anchor per turn with a random ground truth."""
    return [
        QueryAnchor(i, TaskKind.SPEAKING_TARGET, rng.randrange(transcript.player_count))
        for i in range(len(transcript.turns))
    ]


@pytest.fixture
def rng():
    return random.Random(1234)


# -- acceptance reporting -------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    detail = getattr(item, "acceptance_detail", "")
    _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"[{status}] AC{number:02d} {title}"
        terminalreporter.write_line(f"{line} :: {detail}" if detail else line)
