"""Referent scoring, ablation grids and evaluation runs."""

from __future__ import annotations

import itertools
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from mmsi_harness.backends import ChatRequest, InferenceBackend
from mmsi_harness.core import TaskKind
from mmsi_harness.dataset import OnlineSample
from mmsi_harness.forecasting import ForecastResponse, coarse_to_fine_forecast
from mmsi_harness.pipeline import PromptSource
from mmsi_harness.prompts import RenderedPrompt, build_task_prompt, strip_queries
from mmsi_harness.render import OverlayOptions, PerSecond, SamplingMode, parse_mode

_REFERENT_RE = re.compile(r"player\s*(\d+)", re.IGNORECASE)

FORECAST_CHOICES = {
    "none": (False, False, False),
    "speaker_turns": (True, True, False),
    "detailed_utterances": (True, False, True),
    "both": (True, True, True),
}


def parse_referent(text: str) -> int | None:
    """The single player named in ``text``; None if zero or several distinct players appear."""
    found = {int(n) for n in _REFERENT_RE.findall(text)}
    return found.pop() if len(found) == 1 else None


def _exact_round(value: Fraction, places: int = 4) -> Decimal:
    # Round half up on the exact rational, without intermediate float or
    # limited-precision division.
    scale = 10**places
    n = value.numerator * scale
    d = value.denominator
    q, r = divmod(n, d)
    if 2 * r >= d:
        q += 1
    return Decimal(q).scaleb(-places)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    task: TaskKind
    raw_response: str
    predicted: int | None
    ground_truth: int
    correct: bool
    latency_ms: int = 0
    error: str | None = None
    forecast_status: str | None = None
    forecast_speakers: tuple[int, ...] = ()
    forecast_per_position: float | None = None

    def __post_init__(self) -> None:
        if self.correct != (self.predicted is not None and self.predicted == self.ground_truth):
            raise ValueError("correct must equal (predicted == ground_truth)")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")

    @classmethod
    def scored(cls, sample_id: str, task: TaskKind, raw: str, ground_truth: int, **kw: Any) -> EvalRecord:
        pred = parse_referent(raw)
        return cls(sample_id, task, raw, pred, ground_truth, pred is not None and pred == ground_truth, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "task": self.task.value,
            "raw_response": self.raw_response,
            "predicted": self.predicted,
            "ground_truth": self.ground_truth,
            "correct": self.correct,
            "latency_ms": self.latency_ms,
            "error": self.error,
            "forecast_status": self.forecast_status,
            "forecast_speakers": list(self.forecast_speakers),
            "forecast_per_position": self.forecast_per_position,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalRecord:
        return cls(
            data["sample_id"],
            TaskKind.parse(data["task"]),
            data["raw_response"],
            data["predicted"],
            data["ground_truth"],
            data["correct"],
            data.get("latency_ms", 0),
            data.get("error"),
            data.get("forecast_status"),
            tuple(data.get("forecast_speakers", ())),
            data.get("forecast_per_position"),
        )


def accuracy_fractions(
    records: Iterable[EvalRecord], tasks: Iterable[TaskKind] | None = None
) -> dict[TaskKind, Fraction]:
    correct: dict[TaskKind, int] = {}
    total: dict[TaskKind, int] = {}
    for r in records:
        total[r.task] = total.get(r.task, 0) + 1
        correct[r.task] = correct.get(r.task, 0) + int(r.correct)
    wanted = list(tasks) if tasks is not None else sorted(total, key=lambda t: list(TaskKind).index(t))
    out = {}
    for task in wanted:
        if not total.get(task):
            raise ValueError(f"no records for task {task.value}")
        out[task] = Fraction(correct[task], total[task])
    return out


def aggregate_accuracy(
    records: Iterable[EvalRecord], tasks: Iterable[TaskKind] | None = None
) -> dict[TaskKind, Decimal]:
    """Per-task accuracy: exact correct/total, rounded half-up to 4 decimals at the end."""
    return {t: _exact_round(f) for t, f in accuracy_fractions(records, tasks).items()}


def score_forecast_speakers(predicted: Sequence[int], gold: Sequence[int]) -> tuple[bool, Fraction]:
    """Exact-sequence flag and aligned per-position agreement over ``max(len)`` positions."""
    longest = max(len(predicted), len(gold))
    if longest == 0:
        return True, Fraction(1)
    matches = sum(1 for a, b in zip(predicted, gold) if a == b)
    return list(predicted) == list(gold), Fraction(matches, longest)


# -- ablations -----------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    forecast_enabled: bool = True
    speaker_turns: bool = True
    detailed_utterances: bool = True
    forecast_k: int = 4
    overlay: OverlayOptions = field(default_factory=OverlayOptions)
    mode: SamplingMode = field(default_factory=PerSecond)
    modality: str = "L+V"

    def __post_init__(self) -> None:
        if self.modality not in ("L", "L+V"):
            raise ValueError(f"modality must be L or L+V, got {self.modality!r}")
        if self.forecast_enabled and not (self.speaker_turns or self.detailed_utterances):
            raise ValueError("forecasting enabled with both components off")
        if self.forecast_enabled and self.forecast_k not in (2, 4, 8):
            raise ValueError(f"forecast_k must be one of 2, 4, 8; got {self.forecast_k}")

    @property
    def forecast_label(self) -> str:
        if not self.forecast_enabled:
            return "none"
        if self.speaker_turns and self.detailed_utterances:
            return "both"
        return "speaker_turns" if self.speaker_turns else "detailed_utterances"

    def normalized(self) -> AblationConfig:
        """Canonical form: settings that cannot matter are reset to defaults."""
        cfg = self
        if not cfg.forecast_enabled:
            cfg = AblationConfig(False, False, False, 4, cfg.overlay, cfg.mode, cfg.modality)
        if cfg.modality == "L":
            cfg = AblationConfig(
                cfg.forecast_enabled, cfg.speaker_turns, cfg.detailed_utterances, cfg.forecast_k,
                OverlayOptions(False, False, False, cfg.overlay.keypoint_confidence_threshold), PerSecond(1.0), "L",
            )  # fmt: skip
        return cfg

    @property
    def key(self) -> str:
        parts = [self.modality, f"forecast={self.forecast_label}"]
        if self.forecast_enabled:
            parts.append(f"K={self.forecast_k}")
        if self.modality == "L+V":
            parts += [f"overlay={self.overlay.label}", f"mode={self.mode.label}"]
        return "|".join(parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "modality": self.modality,
            "forecast": self.forecast_label,
            "forecast_k": self.forecast_k if self.forecast_enabled else None,
            "overlay": self.overlay.label,
            "keypoint_confidence_threshold": self.overlay.keypoint_confidence_threshold,
            "mode": self.mode.label,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AblationConfig:
        enabled, st, du = FORECAST_CHOICES[data.get("forecast", "both")]
        thr = data.get("keypoint_confidence_threshold", 0.3)
        return cls(
            enabled, st, du, data.get("forecast_k") or 4,
            OverlayOptions.from_label(data.get("overlay", "text+rect+point"), thr),
            parse_mode(data.get("mode", "fps:1")), data.get("modality", "L+V"),
        )  # fmt: skip


GRID_AXES = ("modality", "forecast", "forecast_k", "overlay", "mode")


def expand_grid(spec: dict[str, Any], base: AblationConfig | None = None) -> list[AblationConfig]:
    """Cartesian product over the ablation axes, deduplicated after normalization.

    ``spec`` maps axis name to a value or list of values, e.g.
    ``{"forecast_k": [2, 4, 8], "overlay": ["text", "text+rect", "text+rect+point"]}``.
    Axes left out take their value from ``base``.
    """
    unknown = set(spec) - set(GRID_AXES) - {"keypoint_confidence_threshold"}
    if unknown:
        raise ValueError(f"unknown ablation axes: {sorted(unknown)}")
    base_d = (base or AblationConfig()).to_dict()
    if base_d["forecast_k"] is None:
        base_d["forecast_k"] = 4
    axes = []
    for name in GRID_AXES:
        values = spec.get(name, base_d[name])
        axes.append(values if isinstance(values, list) else [values])
    if any(not v for v in axes):
        return []
    seen: dict[str, AblationConfig] = {}
    for combo in itertools.product(*axes):
        d = dict(zip(GRID_AXES, combo))
        d["keypoint_confidence_threshold"] = spec.get("keypoint_confidence_threshold", base_d["keypoint_confidence_threshold"])
        cfg = AblationConfig.from_dict(d).normalized()
        seen.setdefault(cfg.key, cfg)
    return list(seen.values())


# -- reports ---------------------------------------------------------------------


@dataclass
class ReportRow:
    config: AblationConfig
    records: list[EvalRecord]
    model: str = ""

    @property
    def tasks(self) -> list[TaskKind]:
        present = {r.task for r in self.records}
        return [t for t in TaskKind if t in present]

    def accuracy(self) -> dict[TaskKind, Decimal]:
        return aggregate_accuracy(self.records) if self.records else {}

    @property
    def errors(self) -> int:
        return sum(1 for r in self.records if r.error)

    def forecast_speaker_accuracy(self) -> Decimal | None:
        vals = [Fraction(r.forecast_per_position).limit_denominator(10**6) for r in self.records if r.forecast_per_position is not None]
        if not vals:
            return None
        return _exact_round(sum(vals, Fraction(0)) / len(vals))


@dataclass
class Report:
    rows: list[ReportRow]
    model: str = ""
    dataset: str = ""
    schema: int = 1

    @property
    def tasks(self) -> list[TaskKind]:
        present = {t for row in self.rows for t in row.tasks}
        return [t for t in TaskKind if t in present]

    @property
    def errors(self) -> int:
        return sum(row.errors for row in self.rows)


def _request(prompt: RenderedPrompt, user: str, max_tokens: int) -> ChatRequest:
    return ChatRequest(prompt.system_text, user, prompt.image_refs, max_tokens, 0.0, prompt.sample_id)


def evaluate_sample(
    sample: OnlineSample,
    backend: InferenceBackend,
    cfg: AblationConfig,
    source: PromptSource,
    max_output_tokens: int = 64,
    forecast_text_only: bool = False,
) -> EvalRecord:
    """Forecast (if enabled), then ask the task query with the forecast in context."""
    t0 = time.perf_counter()
    fr: ForecastResponse | None = None
    try:
        prompt = source.prompt_for(sample, cfg.overlay, cfg.mode, cfg.modality == "L+V")
        context = strip_queries(prompt.user_text)
        if cfg.forecast_enabled:
            fr = coarse_to_fine_forecast(
                backend, prompt, cfg.forecast_k, cfg.speaker_turns, cfg.detailed_utterances, forecast_text_only
            )
            extra = fr.context_text()
            if extra:
                context = f"{context}\n{extra}"
        raw = backend.complete(_request(prompt, f"{context}\n{build_task_prompt(sample.task)}", max_output_tokens))
        error = None
    except Exception as exc:  # noqa: BLE001 - recorded per sample
        raw, error = "", f"{type(exc).__name__}: {exc}"
    latency = int((time.perf_counter() - t0) * 1000)
    fkw: dict[str, Any] = {}
    if fr is not None:
        _, per_pos = score_forecast_speakers(fr.parsed.speakers, sample.forecast_target.speakers[: cfg.forecast_k])
        fkw = {
            "forecast_status": fr.parse_status.value,
            "forecast_speakers": tuple(fr.parsed.speakers),
            "forecast_per_position": float(per_pos),
        }
    return EvalRecord.scored(
        sample.sample_id, sample.task, raw, sample.ground_truth, latency_ms=latency, error=error, **fkw
    )


def run_evaluation(
    samples: Sequence[OnlineSample],
    backend: InferenceBackend,
    ablation: AblationConfig,
    source: PromptSource,
    jobs: int = 1,
    model: str = "",
    deterministic: bool = False,
    forecast_text_only: bool = False,
) -> ReportRow:
    """Evaluate every sample under one ablation setting; records come back in sample order."""

    def one(s: OnlineSample) -> EvalRecord:
        rec = evaluate_sample(s, backend, ablation, source, forecast_text_only=forecast_text_only)
        if deterministic:
            rec = EvalRecord(**{**rec.__dict__, "latency_ms": 0})
        return rec

    if jobs <= 1:
        records = [one(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, samples))
    return ReportRow(ablation, records, model)


def run_grid(
    samples: Sequence[OnlineSample],
    backend: InferenceBackend,
    grid: Sequence[AblationConfig],
    source: PromptSource,
    jobs: int = 1,
    model: str = "",
    dataset: str = "",
    deterministic: bool = False,
) -> Report:
    rows = [run_evaluation(samples, backend, cfg, source, jobs, model, deterministic) for cfg in grid]
    return Report(rows, model, dataset)


# -- report rendering -------------------------------------------------------------

CHECK = "✓"


def _flag(on: bool) -> str:
    return CHECK if on else "-"


def percent(value: Decimal) -> str:
    return f"{(value * 100).quantize(Decimal('0.01'))}"


def report_columns(report: Report) -> list[str]:
    cols = ["Model", "Mod", "Forecast", "Speaker Turns", "Detailed Utterances", "Length",
            "Prompt", "Text", "Rect", "Point", "FPS"]  # fmt: skip
    for t in report.tasks:
        cols.append(f"{t.short_name} ({report.dataset})" if report.dataset else t.short_name)
    return cols


def row_cells(report: Report, row: ReportRow) -> list[str]:
    cfg = row.config
    vision = cfg.modality == "L+V"
    acc = row.accuracy()
    cells = [
        row.model or report.model or "-",
        cfg.modality,
        _flag(cfg.forecast_enabled),
        _flag(cfg.forecast_enabled and cfg.speaker_turns),
        _flag(cfg.forecast_enabled and cfg.detailed_utterances),
        str(cfg.forecast_k) if cfg.forecast_enabled else "-",
        _flag(vision and cfg.overlay.any),
        _flag(vision and cfg.overlay.text),
        _flag(vision and cfg.overlay.rect),
        _flag(vision and cfg.overlay.point),
        ("grid6" if cfg.mode.label == "grid6" else f"{cfg.mode.fps:.1f}") if vision else "-",
    ]
    for t in report.tasks:
        cells.append(percent(acc[t]) if t in acc else "-")
    return cells


def report_to_dict(report: Report, include_records: bool = True) -> dict[str, Any]:
    columns = report_columns(report)
    rows = []
    for row in report.rows:
        acc = row.accuracy()
        fsa = row.forecast_speaker_accuracy()
        entry: dict[str, Any] = {
            "key": row.config.key,
            "model": row.model,
            "config": row.config.to_dict(),
            "n": len(row.records),
            "errors": row.errors,
            "accuracy": {t.value: str(v) for t, v in acc.items()},
            "correct": {t.value: sum(r.correct for r in row.records if r.task is t) for t in acc},
            "total": {t.value: sum(1 for r in row.records if r.task is t) for t in acc},
            "forecast_speaker_accuracy": str(fsa) if fsa is not None else None,
            "cells": dict(zip(columns, row_cells(report, row))),
        }
        if include_records:
            entry["records"] = [r.to_dict() for r in row.records]
        rows.append(entry)
    return {"schema": report.schema, "model": report.model, "dataset": report.dataset, "columns": columns, "rows": rows}


def report_from_dict(data: dict[str, Any]) -> Report:
    if data.get("schema") != 1:
        raise ValueError(f"unsupported report schema {data.get('schema')!r}")
    rows = [
        ReportRow(AblationConfig.from_dict(r["config"]), [EvalRecord.from_dict(x) for x in r.get("records", [])], r.get("model", ""))
        for r in data["rows"]
    ]
    return Report(rows, data.get("model", ""), data.get("dataset", ""))


def format_table(report: Report) -> str:
    """Fixed-width text table, one line per ablation row."""
    cols = report_columns(report)
    body = [row_cells(report, row) for row in report.rows]
    widths = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(cols)]

    def fmt(cells: list[str]) -> str:
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    lines = [fmt(cols), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def format_delimited(report: Report, delimiter: str = "\t") -> str:
    lines = [delimiter.join(report_columns(report))]
    lines += [delimiter.join(row_cells(report, row)) for row in report.rows]
    return "\n".join(lines) + "\n"


def emit_report(report: Report, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>.txt`` and ``<stem>.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / f"{stem}.json", "table": out / f"{stem}.txt", "tsv": out / f"{stem}.tsv"}
    paths["json"].write_text(json.dumps(report_to_dict(report), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    paths["table"].write_text(format_table(report), encoding="utf-8")
    paths["tsv"].write_text(format_delimited(report), encoding="utf-8")
    return paths

