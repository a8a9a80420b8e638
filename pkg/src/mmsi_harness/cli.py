"""Command-line entry point: ``mmsi-harness <subcommand> ...``.

Every run writes ``manifest.json`` next to its outputs. Exit codes: 0 ok,
1 evaluation finished with per-sample errors, 2 usage or config error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from mmsi_harness import __version__
from mmsi_harness.backends import make_backend, read_config
from mmsi_harness.core import TaskKind, ValidationError, load_annotations, load_transcript
from mmsi_harness.dataset import (
    WindowConfig,
    build_online_samples,
    export_sft_records,
    load_anchors,
    read_samples,
    write_samples,
    write_sft_records,
)
from mmsi_harness.evaluation import (
    AblationConfig,
    emit_report,
    expand_grid,
    format_delimited,
    format_table,
    report_from_dict,
    report_to_dict,
    run_grid,
)
from mmsi_harness.pipeline import PrerenderedPrompts, render_sample_images, write_prompts
from mmsi_harness.prompts import assemble
from mmsi_harness.render import DEFAULT_RESOLUTION, OverlayOptions, assign_colors, parse_mode

log = logging.getLogger("mmsi_harness")

EXIT_OK, EXIT_SAMPLE_ERRORS, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- manifest ---------------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def path_digest(path: str | Path) -> str:
    """sha256 of a file, or of a directory's sorted (relative path, file digest) pairs."""
    p = Path(path)
    if p.is_file():
        return file_digest(p)
    h = hashlib.sha256()
    for f in sorted(x for x in p.rglob("*") if x.is_file()):
        h.update(f"{f.relative_to(p).as_posix()}\0{file_digest(f)}\n".encode())
    return h.hexdigest()


def config_digest(settings: dict[str, Any]) -> str:
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _now(deterministic: bool) -> str:
    if deterministic:
        return "1970-01-01T00:00:00Z"
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(
    out_dir: Path,
    command: str,
    settings: dict[str, Any],
    inputs: dict[str, str | Path],
    seed: int,
    started: str,
    deterministic: bool,
) -> Path:
    manifest = {
        "tool": "mmsi-harness",
        "version": __version__,
        "command": command,
        "settings": settings,
        "config_digest": config_digest(settings),
        "input_digests": {k: path_digest(v) for k, v in sorted(inputs.items())},
        "seed": seed,
        "started_at": started,
        "finished_at": _now(deterministic),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# -- helpers ------------------------------------------------------------------------


def _files(path: Path, suffixes: tuple[str, ...]) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix in suffixes)
    if path.exists():
        return [path]
    raise FileNotFoundError(f"no such file or directory: {path}")


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 640x360, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _load_json_arg(value: str) -> Any:
    """Inline JSON, or a path to a JSON file."""
    text = value.strip()
    if text.startswith(("{", "[")):
        return json.loads(text)
    return json.loads(Path(value).read_text(encoding="utf-8"))


def bundled_fixture_dir() -> Path:
    return Path(__file__).resolve().parent / "data" / "replay50"


# -- subcommands --------------------------------------------------------------------


def cmd_build_dataset(args: argparse.Namespace) -> int:
    cfg = WindowConfig(args.d, args.k, args.frame_horizon)
    out = Path(args.out)
    transcripts = [
        load_transcript(p, player_count=args.player_count, strict=args.strict)
        for p in _files(Path(args.transcripts), (".jsonl",))
    ]
    tracks = {}
    for p in _files(Path(args.annotations), (".json",)):
        track = load_annotations(p, args.strict)
        tracks[track.session_id] = track
    anchor_files = _files(Path(args.anchors), (".jsonl",))
    if Path(args.anchors).is_dir():
        anchors = {p.stem: load_anchors(p, args.strict) for p in anchor_files}
    elif len(transcripts) == 1:
        anchors = {transcripts[0].session_id: load_anchors(anchor_files[0], args.strict)}
    else:
        raise UsageError("--anchors must be a directory when --transcripts holds several sessions")
    wanted = None if args.task == "all" else TaskKind.parse(args.task)

    samples = []
    for tr in transcripts:
        if tr.session_id not in tracks:
            raise UsageError(f"no annotation track for session {tr.session_id!r}")
        chosen = [a for a in anchors.get(tr.session_id, []) if wanted is None or a.task is wanted]
        samples.extend(build_online_samples(tr, tracks[tr.session_id], chosen, cfg))
    out.mkdir(parents=True, exist_ok=True)
    write_samples(samples, out / "samples.jsonl")
    if args.sft:
        prompts = [assemble(s, [], None, include_forecast_query=bool(len(s.forecast_target))) for s in samples]
        write_sft_records(export_sft_records(samples, prompts), out / "sft.jsonl")
    log.info("wrote %d samples to %s", len(samples), out)
    settings = {
        "d": cfg.d_turns, "k": cfg.k_forecast, "frame_horizon_s": cfg.frame_horizon_s,
        "task": args.task, "sft": args.sft, "player_count": args.player_count, "strict": args.strict,
    }  # fmt: skip
    inputs = {"transcripts": args.transcripts, "annotations": args.annotations, "anchors": args.anchors}
    write_manifest(out, "build-dataset", settings, inputs, 0, args.started, args.deterministic)
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    out = Path(args.out)
    overlay = OverlayOptions(args.prompt_text, args.prompt_rect, args.prompt_point, args.keypoint_threshold)
    mode = parse_mode(args.mode)
    samples = read_samples(args.samples)
    images_dir = out / "images"
    prompts = []
    for s in samples:
        refs = render_sample_images(s, args.frames_dir, images_dir, overlay, mode, args.resolution, ref_base=out)
        colors = assign_colors(s.player_count) if overlay.any and refs else None
        prompts.append(assemble(s, refs, colors, highlight_pronoun=not args.no_highlight))
    out.mkdir(parents=True, exist_ok=True)
    write_prompts(prompts, out / "prompts.jsonl")
    write_samples(samples, out / "samples.jsonl")
    settings = {
        "overlay": overlay.label,
        "keypoint_confidence_threshold": overlay.keypoint_confidence_threshold,
        "mode": mode.label,
        "resolution": list(args.resolution),
        "highlight_pronoun": not args.no_highlight,
    }
    (out / "render.json").write_text(json.dumps(settings, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if args.sft:
        sft_prompts = [
            assemble(s, p.image_refs, assign_colors(s.player_count) if overlay.any and p.image_refs else None,
                     include_forecast_query=bool(len(s.forecast_target)), highlight_pronoun=not args.no_highlight)
            for s, p in zip(samples, prompts)
        ]  # fmt: skip
        write_sft_records(export_sft_records(samples, sft_prompts), out / "sft.jsonl")
    log.info("rendered %d prompts into %s", len(prompts), out)
    inputs = {"samples": args.samples, "frames": args.frames_dir}
    write_manifest(out, "render", settings, inputs, 0, args.started, args.deterministic)
    return EXIT_OK


def _ablation_grid(value: str | None, source: PrerenderedPrompts) -> list[AblationConfig]:
    base = AblationConfig()
    if source.overlay is not None and source.mode is not None:
        base = AblationConfig(overlay=source.overlay, mode=source.mode)
    if value is None:
        return [base.normalized()]
    spec = _load_json_arg(value)
    if isinstance(spec, list):
        return [AblationConfig.from_dict({**base.to_dict(), **d}).normalized() for d in spec]
    if isinstance(spec, dict):
        return expand_grid(spec, base)
    raise UsageError("--ablation must be a JSON object (grid) or a list of objects")


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = read_config(args.config)
    prompts_path = args.prompts
    ablation = args.ablation
    if prompts_path is None:
        if args.backend != "replay":
            raise UsageError("--prompts is required unless replaying the bundled fixture")
        fixture = bundled_fixture_dir()
        prompts_path = str(fixture / "prompts.jsonl")
        cfg["fixture"] = args.fixture or cfg["fixture"] or str(fixture / "replay.json")
        ablation = ablation or str(fixture / "ablation.json")
    if args.fixture:
        cfg["fixture"] = args.fixture
    if args.model:
        cfg["model_name"] = args.model
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    samples_path = Path(args.samples) if args.samples else Path(prompts_path).parent / "samples.jsonl"

    source = PrerenderedPrompts.from_file(prompts_path)
    samples = read_samples(samples_path)
    grid = _ablation_grid(ablation, source)
    backend = make_backend(args.backend, cfg)
    jobs = args.jobs or (int(cfg["max_in_flight"]) if args.backend == "endpoint" else (os.cpu_count() or 1))
    model = args.model or cfg.get("model_name") or args.backend
    try:
        report = run_grid(samples, backend, grid, source, jobs, model, args.dataset, args.deterministic)
    finally:
        close = getattr(backend, "close", None)
        if close is not None:
            close()
    out = Path(args.out)
    emit_report(report, out)
    sys.stdout.write(format_table(report))
    settings = {
        "backend": args.backend,
        "model": model,
        "dataset": args.dataset,
        "grid": [c.to_dict() for c in grid],
        "endpoint": {k: v for k, v in cfg.items() if k not in ("fixture",)} if args.backend == "endpoint" else None,
    }
    inputs: dict[str, str | Path] = {"prompts": prompts_path, "samples": samples_path}
    images = Path(prompts_path).parent / "images"
    if images.is_dir():
        inputs["images"] = images
    if args.backend == "replay":
        inputs["fixture"] = cfg["fixture"]
    write_manifest(out, "eval", settings, inputs, int(cfg["seed"]), args.started, args.deterministic)
    if report.errors:
        log.warning("%d sample(s) errored; see records in %s", report.errors, out / "report.json")
        return EXIT_SAMPLE_ERRORS
    return EXIT_OK


def cmd_gap_check(args: argparse.Namespace) -> int:
    from mmsi_harness.gap import offline_online_gap_check, synth_corpus

    corpus = synth_corpus(args.n, args.seed)
    report = offline_online_gap_check(corpus, args.p_offline, args.p_online, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gap.json").write_text(json.dumps(report.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    (out / "gap.txt").write_text(report.format_table(), encoding="utf-8")
    sys.stdout.write(report.format_table())
    settings = {"p_offline": args.p_offline, "p_online": args.p_online, "n": args.n}
    write_manifest(out, "gap-check", settings, {}, args.seed, args.started, args.deterministic)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    data = json.loads(Path(args.input).read_text(encoding="utf-8"))
    report = report_from_dict(data)
    if args.format == "table":
        sys.stdout.write(format_table(report))
    elif args.format == "tsv":
        sys.stdout.write(format_delimited(report))
    else:
        sys.stdout.write(json.dumps(report_to_dict(report), indent=1, ensure_ascii=False) + "\n")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsi-harness", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--deterministic", action="store_true", help="zero manifest timestamps and latencies")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("build-dataset", help="build causal online samples from transcripts and annotations")
    p.add_argument("--transcripts", required=True, help="transcript .jsonl file or directory")
    p.add_argument("--annotations", required=True, help="annotation .json file or directory")
    p.add_argument("--anchors", required=True, help="anchor .jsonl file, or directory of <session>.jsonl")
    p.add_argument("--task", default="all", help="SpeakingTarget, PronounCoreference, MentionedPlayer or all")
    p.add_argument("--d", type=int, default=10, help="history length in turns (default 10)")
    p.add_argument("--k", type=int, default=4, help="forecast length in turns (default 4)")
    p.add_argument("--frame-horizon", type=float, default=None, help="fixed frame window in seconds")
    p.add_argument("--player-count", type=int, default=None)
    p.add_argument("--sft", action="store_true", help="also write sft.jsonl (text-only inputs)")
    p.add_argument("--strict", action="store_true", help="reject unknown fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("render", help="draw overlays, sample frames and assemble prompts")
    p.add_argument("--samples", required=True)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--prompt-text", action="store_true")
    p.add_argument("--prompt-rect", action="store_true")
    p.add_argument("--prompt-point", action="store_true")
    p.add_argument("--keypoint-threshold", type=float, default=0.3)
    p.add_argument("--mode", default="fps:1.0", help="fps:<rate> or grid6")
    p.add_argument("--resolution", type=_resolution, default=DEFAULT_RESOLUTION, help="WxH, default 640x360")
    p.add_argument("--no-highlight", action="store_true", help="do not mark the queried pronoun")
    p.add_argument("--sft", action="store_true", help="also write sft.jsonl with image inputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="run the evaluation over rendered prompts")
    p.add_argument("--prompts", help="prompts.jsonl from render (omit with --backend replay for the bundled fixture)")
    p.add_argument("--samples", help="samples.jsonl (default: next to --prompts)")
    p.add_argument("--backend", choices=("endpoint", "replay", "baseline"), required=True)
    p.add_argument("--config", help="INI file with a [backend] section")
    p.add_argument("--fixture", help="replay fixture JSON")
    p.add_argument("--ablation", help="JSON grid spec or list of configs, inline or as a file")
    p.add_argument("--model", default="")
    p.add_argument("--dataset", default="")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel samples (default: available cores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gap-check", help="offline vs online gap with a synthetic oracle")
    p.add_argument("--p-offline", type=float, required=True)
    p.add_argument("--p-online", type=float, required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gap_check)

    p = sub.add_parser("report", help="re-render a report.json")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("table", "json", "tsv"), default="table")
    p.set_defaults(func=cmd_report)

    for p in sub.choices.values():
        # Also accepted after the subcommand name.
        p.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    args.started = _now(args.deterministic)
    try:
        return args.func(args)
    except (UsageError, ValidationError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
