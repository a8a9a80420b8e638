"""Offline-vs-online gap check with a synthetic oracle.

The same anchors are posed twice: once with the turns following the anchor
spliced into the context (offline) and once strictly causally (online). A
seeded oracle answers correctly with probability ``p_offline`` when it can
see any future turn in the request and ``p_online`` otherwise. The measured
accuracies go through the normal referent parsing and aggregation path, so
the check exercises the harness rather than the oracle.
"""

from __future__ import annotations

import hashlib
import math
import random
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

from mmsi_harness.backends import ChatRequest, InferenceBackend, run_batch
from mmsi_harness.core import AnnotationTrack, TaskKind, Transcript, player_name
from mmsi_harness.dataset import OnlineSample, QueryAnchor, WindowConfig, build_online_samples
from mmsi_harness.evaluation import EvalRecord, accuracy_fractions
from mmsi_harness.prompts import _line, assemble, build_task_prompt, strip_queries
from mmsi_harness.synthetic import synth_session

Z_99 = 2.5758293035489  # two-sided 99% normal quantile
MIN_PER_ARM = 30
_DIALOGUE_RE = re.compile(r"^\[Player\d+\]: ")


class InsufficientSamples(ValueError):
    pass


class SyntheticOracleBackend(InferenceBackend):
    """Answers ``PlayerN`` with a per-request seeded coin flip.

    ``truth`` maps sample id to ``(ground_truth, player_count, causal_lines)``;
    a request holding more dialogue lines than the causal window can only
    have got them from the future.
    """

    def __init__(self, truth: dict[str, tuple[int, int, int]], p_offline: float, p_online: float, seed: int):
        self.truth = truth
        self.p_offline = p_offline
        self.p_online = p_online
        self.seed = seed

    def complete(self, req: ChatRequest) -> str:
        gt, pc, causal_lines = self.truth[req.sample_id]
        dialogue = sum(1 for line in req.user.split("\n") if _DIALOGUE_RE.match(line))
        sees_future = dialogue > causal_lines
        p = self.p_offline if sees_future else self.p_online
        digest = hashlib.sha256(f"{self.seed}:{req.sample_id}:{int(sees_future)}".encode()).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        if rng.random() < p:
            return player_name(gt)
        wrong = (gt + 1 + rng.randrange(max(pc - 1, 1))) % pc
        return player_name(wrong if wrong != gt else (gt + 1) % max(pc, 2))


@dataclass(frozen=True)
class GapReport:
    task: TaskKind
    n: int
    configured: tuple[float, float]
    measured: tuple[Fraction, Fraction]
    halfwidth_points: float

    @property
    def configured_gap_points(self) -> float:
        return (self.configured[0] - self.configured[1]) * 100

    @property
    def measured_gap_points(self) -> float:
        return float((self.measured[0] - self.measured[1]) * 100)

    @property
    def consistent(self) -> bool:
        return abs(self.measured_gap_points - self.configured_gap_points) <= self.halfwidth_points + 1e-9

    def arrow(self, which: str = "measured") -> str:
        off, on = self.measured if which == "measured" else self.configured
        return f"{float(off) * 100:.1f} → {float(on) * 100:.1f}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.value,
            "n_per_arm": self.n,
            "configured": {"offline": self.configured[0], "online": self.configured[1], "arrow": self.arrow("configured")},
            "measured": {
                "offline": str(aggregate_fraction(self.measured[0])),
                "online": str(aggregate_fraction(self.measured[1])),
                "arrow": self.arrow(),
            },
            "configured_gap_points": round(self.configured_gap_points, 6),
            "measured_gap_points": round(self.measured_gap_points, 6),
            "ci99_halfwidth_points": round(self.halfwidth_points, 6),
            "consistent": self.consistent,
        }

    def format_table(self) -> str:
        head = "Offline → Online | Configured | Measured | Gap (pts) | 99% ± (pts) | Consistent"
        row = (
            f"{self.task.short_name} | {self.arrow('configured')} | {self.arrow()} | "
            f"{self.measured_gap_points:.2f} | {self.halfwidth_points:.2f} | {'yes' if self.consistent else 'no'}"
        )
        return f"{head}\n{row}\n"


def aggregate_fraction(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def gap_halfwidth(p_offline: float, p_online: float, n: int, z: float = Z_99) -> float:
    """Normal-approximation half-width, in points, for a difference of two proportions."""
    return 100 * z * math.sqrt((p_offline * (1 - p_offline) + p_online * (1 - p_online)) / n)


def synth_corpus(n_anchors: int, seed: int, player_count: int = 5, turns_per_session: int = 120) -> list[Transcript]:
    """Enough synthetic transcripts to supply ``n_anchors`` anchors with a future."""
    out, have, k = [], 0, 0
    while have < n_anchors:
        s = synth_session(f"gap{k:04d}", turns_per_session, player_count, seed, fps=0.5, anchor_rate=0.0)
        out.append(s.transcript)
        have += len(s.transcript.turns) - 1
        k += 1
    return out


def offline_online_gap_check(
    transcripts: Sequence[Transcript],
    p_offline: float,
    p_online: float,
    n: int = 5000,
    seed: int = 0,
    cfg: WindowConfig | None = None,
    max_in_flight: int = 1,
) -> GapReport:
    if not 0.0 <= p_online <= p_offline <= 1.0:
        raise ValueError("need 0 <= p_online <= p_offline <= 1")
    if n < MIN_PER_ARM:
        raise InsufficientSamples(f"n={n} per arm is below the minimum of {MIN_PER_ARM}")
    cfg = cfg or WindowConfig()
    k_future = max(cfg.k_forecast, 1)
    samples: list[OnlineSample] = []
    for tr in transcripts:
        if len(samples) >= n:
            break
        anchors = []
        for i in range(len(tr.turns) - 1):
            me = tr.turns[i].speaker
            nxt = next((t.speaker for t in tr.turns[i + 1 :] if t.speaker != me), (me + 1) % tr.player_count)
            anchors.append(QueryAnchor(i, TaskKind.SPEAKING_TARGET, nxt))
        empty = AnnotationTrack(tr.session_id, ())
        samples.extend(build_online_samples(tr, empty, anchors, WindowConfig(cfg.d_turns, k_future)))
    if len(samples) < n:
        raise InsufficientSamples(f"only {len(samples)} anchors with future turns available, need {n}")
    samples = samples[:n]

    truth, online_reqs, offline_reqs = {}, [], []
    for s in samples:
        future = tuple(_line(p, u) for p, u in s.forecast_target.utterances)
        truth[s.sample_id] = (s.ground_truth, s.player_count, len(s.dialogue_window))
        prompt = assemble(s, [], None)
        context = strip_queries(prompt.user_text)
        query = build_task_prompt(s.task)
        online_reqs.append(ChatRequest("", f"{context}\n{query}", sample_id=s.sample_id))
        offline_reqs.append(ChatRequest("", "\n".join([context, *future, query]), sample_id=s.sample_id))

    oracle = SyntheticOracleBackend(truth, p_offline, p_online, seed)
    measured = []
    for reqs in (offline_reqs, online_reqs):
        results = run_batch(oracle, reqs, max_in_flight)
        records = [
            EvalRecord.scored(s.sample_id, s.task, text if isinstance(text, str) else "", s.ground_truth,
                              error=None if isinstance(text, str) else str(text))
            for s, (_, text) in zip(samples, results)
        ]  # fmt: skip
        measured.append(accuracy_fractions(records)[TaskKind.SPEAKING_TARGET])
    return GapReport(
        TaskKind.SPEAKING_TARGET, n, (p_offline, p_online), (measured[0], measured[1]),
        gap_halfwidth(p_offline, p_online, n),
    )  # fmt: skip
