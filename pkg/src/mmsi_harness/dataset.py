"""Causal sample construction and supervised fine-tuning export.

Every sample answers a query at the end of its anchor turn using only turns
and frames that finished by then. What comes after the anchor is kept solely
as the forecast target.
"""

from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Iterator, Sequence

from mmsi_harness.core import (
    AnnotationTrack,
    FrameAnnotation,
    TaskKind,
    Transcript,
    Turn,
    ValidationError,
    parse_player_name,
    player_name,
)
from mmsi_harness.forecasting import ForecastTarget, serialize_forecast

if TYPE_CHECKING:
    from mmsi_harness.prompts import RenderedPrompt

MASK_TOKEN = "<MASK>"
DEFAULT_MENTION_PATTERN = r"player\s?\d+"

# Fine-tuning settings reported for the reference models. Exported as metadata
# only; no training happens here.
TRAINING_CONFIG = {
    "method": "lora",
    "lora_rank": 512,
    "lora_alpha": 16,
    "lora_dropout": 0.05,
    "lora_target_modules": ["q_proj", "v_proj"],
    "learning_rate": {"SpeakingTarget": 1e-4, "MentionedPlayer": 1e-4, "PronounCoreference": 1e-3},
    "per_device_batch_size": 1,
    "gradient_accumulation_steps": 4,
    "epochs": 5,
    "optimizer": "adamw_fused",
    "lr_scheduler": "linear",
    "weight_decay": 0.01,
    "max_grad_norm": 0.3,
    "precision": "bf16",
    "loss": "task + forecast, unweighted sum of token cross-entropy",
}


@dataclass(frozen=True)
class WindowConfig:
    """History and forecast sizes, in turns.

    ``frame_horizon_s`` switches the frame window from "span of the windowed
    turns" to a fixed wall-clock horizon ending at the query time.
    """

    d_turns: int = 10
    k_forecast: int = 4
    frame_horizon_s: float | None = None

    def __post_init__(self) -> None:
        if self.d_turns < 1:
            raise ValidationError("d_turns must be >= 1")
        if self.k_forecast < 0:
            raise ValidationError("k_forecast must be >= 0")
        if self.frame_horizon_s is not None and self.frame_horizon_s < 0:
            raise ValidationError("frame_horizon_s must be >= 0")


@dataclass(frozen=True)
class QueryAnchor:
    turn_index: int
    task: TaskKind
    ground_truth: int
    span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        if self.span is not None:
            object.__setattr__(self, "span", (int(self.span[0]), int(self.span[1])))
        if self.task is TaskKind.SPEAKING_TARGET:
            if self.span is not None:
                raise ValidationError("speaking-target anchors take no span")
        elif self.span is None:
            raise ValidationError(f"{self.task.value} anchors need a span")
        if self.ground_truth < 0 or self.turn_index < 0:
            raise ValidationError("turn_index and ground_truth must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "turn_index": self.turn_index,
            "task": self.task.value,
            "ground_truth": self.ground_truth,
            "span": list(self.span) if self.span is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], strict: bool = False) -> QueryAnchor:
        from mmsi_harness.core import _check_fields

        _check_fields(data, ("turn_index", "task", "ground_truth", "span"), "anchor", strict)
        span = data["span"]
        return cls(data["turn_index"], data["task"], data["ground_truth"], tuple(span) if span is not None else None)


def load_anchors(path: str | Path, strict: bool = False) -> list[QueryAnchor]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        try:
            out.append(QueryAnchor.from_dict(json.loads(line), strict))
        except (ValidationError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass(frozen=True)
class OnlineSample:
    sample_id: str
    task: TaskKind
    session_id: str
    player_count: int
    anchor_index: int
    dialogue_window: tuple[Turn, ...]
    frame_window: tuple[FrameAnnotation, ...]
    query_time_t: float
    ground_truth: int
    forecast_target: ForecastTarget
    masked_query_utterance: str | None = None
    query_span: tuple[int, int] | None = None
    source_resolution: tuple[int, int] = (640, 360)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "task": self.task.value,
            "session_id": self.session_id,
            "player_count": self.player_count,
            "anchor_index": self.anchor_index,
            "query_time_t": self.query_time_t,
            "ground_truth": self.ground_truth,
            "dialogue_window": [t.to_dict() for t in self.dialogue_window],
            "frame_window": [f.to_dict() for f in self.frame_window],
            "forecast_target": self.forecast_target.to_dict(),
            "masked_query_utterance": self.masked_query_utterance,
            "query_span": list(self.query_span) if self.query_span else None,
            "source_resolution": list(self.source_resolution),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> OnlineSample:
        span = data.get("query_span")
        return cls(
            sample_id=data["sample_id"],
            task=TaskKind.parse(data["task"]),
            session_id=data["session_id"],
            player_count=data["player_count"],
            anchor_index=data["anchor_index"],
            dialogue_window=tuple(Turn.from_dict(t) for t in data["dialogue_window"]),
            frame_window=tuple(FrameAnnotation.from_dict(f) for f in data["frame_window"]),
            query_time_t=data["query_time_t"],
            ground_truth=data["ground_truth"],
            forecast_target=ForecastTarget.from_dict(data["forecast_target"]),
            masked_query_utterance=data.get("masked_query_utterance"),
            query_span=tuple(span) if span else None,
            source_resolution=tuple(data.get("source_resolution", (640, 360))),
        )

    def track(self) -> AnnotationTrack:
        """The sample's frames as a standalone annotation track."""
        return AnnotationTrack(self.session_id, self.frame_window, self.source_resolution)


def write_samples(samples: Iterable[OnlineSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def read_samples(path: str | Path) -> list[OnlineSample]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    return [OnlineSample.from_dict(json.loads(line)) for line in lines if line.strip()]


def mask_mentioned_name(
    utterance: str,
    span: tuple[int, int],
    pattern: str = DEFAULT_MENTION_PATTERN,
) -> str:
    """Replace exactly ``utterance[span[0]:span[1]]`` with ``<MASK>``.

    The spanned text must look like a player reference (``pattern``, matched
    case-insensitively against the whole span).
    """
    s, e = span
    if not (0 <= s < e <= len(utterance)):
        raise ValidationError(f"span {span} invalid for utterance of length {len(utterance)}")
    if not re.fullmatch(pattern, utterance[s:e], re.IGNORECASE):
        raise ValidationError(f"span text {utterance[s:e]!r} is not a player reference")
    return utterance[:s] + MASK_TOKEN + utterance[e:]


def build_forecast_target(transcript: Transcript, anchor_index: int, k: int) -> ForecastTarget:
    if not 0 <= anchor_index < len(transcript.turns):
        raise ValidationError(f"anchor index {anchor_index} out of range")
    future = transcript.turns[anchor_index + 1 : anchor_index + 1 + max(k, 0)]
    return ForecastTarget.from_utterances([(t.speaker, t.utterance) for t in future])


def frame_window(
    track: AnnotationTrack,
    window: Sequence[Turn],
    query_time: float,
    horizon_s: float | None = None,
    timestamps: Sequence[float] | None = None,
) -> tuple[FrameAnnotation, ...]:
    """Frames with ``lo <= timestamp <= query_time``; ``timestamps`` may be passed in to skip recomputing them."""
    lo = window[0].start if horizon_s is None else query_time - horizon_s
    ts = timestamps if timestamps is not None else [f.timestamp for f in track.frames]
    return track.frames[bisect.bisect_left(ts, lo) : bisect.bisect_right(ts, query_time)]


def build_online_samples(
    transcript: Transcript,
    track: AnnotationTrack,
    anchors: Sequence[QueryAnchor],
    cfg: WindowConfig | None = None,
    mention_pattern: str = DEFAULT_MENTION_PATTERN,
) -> list[OnlineSample]:
    """One causal sample per anchor.

    The dialogue window is the last ``min(d, i + 1)`` turns ending at anchor
    ``i``. The query fires at the anchor turn's end, or at the latest end in
    the window when an earlier turn overlaps past it. Frames are those
    annotated between the first windowed turn's start and the query time.
    """
    cfg = cfg or WindowConfig()
    if track.session_id != transcript.session_id:
        raise ValidationError(
            f"annotation session {track.session_id!r} does not match transcript {transcript.session_id!r}"
        )
    turns = transcript.turns
    stamps = [f.timestamp for f in track.frames]
    samples = []
    for anchor in anchors:
        i = anchor.turn_index
        if not 0 <= i < len(turns):
            raise ValidationError(f"anchor turn index {i} out of range (0..{len(turns) - 1})")
        if anchor.ground_truth >= transcript.player_count:
            raise ValidationError(f"anchor ground truth {anchor.ground_truth} >= player count")
        anchor_turn = turns[i]
        masked = None
        if anchor.span is not None:
            s, e = anchor.span
            if not (0 <= s < e <= len(anchor_turn.utterance)):
                raise ValidationError(f"anchor span {anchor.span} outside turn {i} utterance")
        if anchor.task is TaskKind.MENTIONED_PLAYER:
            masked = mask_mentioned_name(anchor_turn.utterance, anchor.span, mention_pattern)
            named = parse_player_name(anchor_turn.utterance[anchor.span[0] : anchor.span[1]].replace(" ", ""))
            if named is not None and named != anchor.ground_truth:
                raise ValidationError(
                    f"turn {i}: span names {player_name(named)} but ground truth is {player_name(anchor.ground_truth)}"
                )
        window = turns[max(0, i - cfg.d_turns + 1) : i + 1]
        # Normally the anchor's end; later if an earlier turn is still running.
        t = max(turn.end for turn in window)
        samples.append(
            OnlineSample(
                sample_id=f"{transcript.session_id}:{i}:{anchor.task.value}",
                task=anchor.task,
                session_id=transcript.session_id,
                player_count=transcript.player_count,
                anchor_index=i,
                dialogue_window=window,
                frame_window=frame_window(track, window, t, cfg.frame_horizon_s, stamps),
                query_time_t=t,
                ground_truth=anchor.ground_truth,
                forecast_target=build_forecast_target(transcript, i, cfg.k_forecast),
                masked_query_utterance=masked,
                query_span=anchor.span,
                source_resolution=track.source_resolution,
            )
        )
    return samples


def sft_target_text(sample: OnlineSample) -> str:
    """Answer first, then the forecast lines (when there is anything to forecast)."""
    answer = player_name(sample.ground_truth)
    if not len(sample.forecast_target):
        return answer
    coarse, fine = serialize_forecast(sample.forecast_target)
    return "\n".join(x for x in (answer, coarse, fine) if x)


def export_sft_records(
    samples: Sequence[OnlineSample], prompts: Sequence[RenderedPrompt]
) -> Iterator[dict[str, Any]]:
    """Yield a metadata header, then one ``{input, target}`` record per sample."""
    if len(samples) != len(prompts):
        raise ValidationError(f"{len(samples)} samples but {len(prompts)} prompts")
    for s, p in zip(samples, prompts):
        if s.sample_id != p.sample_id:
            raise ValidationError(f"sample {s.sample_id!r} paired with prompt {p.sample_id!r}")
    yield {"type": "header", "schema": 1, "training_config": TRAINING_CONFIG}
    for s, p in zip(samples, prompts):
        yield {
            "type": "record",
            "sample_id": s.sample_id,
            "task": s.task.value,
            "input": {"system": p.system_text, "user": p.user_text, "images": list(p.image_refs)},
            "target": sft_target_text(s),
        }


def write_sft_records(records: Iterable[dict[str, Any]], path: str | Path) -> int:
    """Write records as JSON lines; returns the number of non-header records."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += rec.get("type") == "record"
    return n
