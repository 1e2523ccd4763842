"""turnforge command line: batch segmentation, intervals, features and stats.

Exit codes: 0 when every conversation succeeded, 1 when at least one
failed, 2 on configuration errors (bad flags, empty input, unusable
grouping).
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import tomli

from . import __version__
from .errors import InvalidConfig, StatsError, TooFewGroups, TurnforgeError, UnknownSpeakerInGrouping
from .pipeline import (
    features_to_csv,
    histogram_to_csv,
    intervals_to_csv,
    process_stream,
    read_embeddings,
    read_feature_csv,
    read_grouping_csv,
    topic_rows,
    topics_to_csv,
)
from .state_machine import interval_summary, signed_transitions, transition_histogram
from .stats import CompareConfig, compare_groups, decile_proportion_rows, format_table, grouping_from_rows
from .synth import EFFECT_PARAMS, SynthConfig, generate_corpus
from .transcript_io import read_transcripts, tokens_to_csv, tokens_to_jsonl
from .turn_models import MODELS, load_cues, turns_to_jsonl

log = logging.getLogger("turnforge")

INPUT_SUFFIXES = (".csv", ".jsonl", ".ndjson")
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def expand_inputs(patterns: Sequence[str]) -> list[Path]:
    """Resolve files, directories (non-recursive) and globs to sorted paths."""
    found: set[Path] = set()
    for pat in patterns:
        p = Path(pat)
        if p.is_dir():
            found.update(q for q in p.iterdir() if q.is_file() and q.suffix.lower() in INPUT_SUFFIXES)
        elif p.is_file():
            found.add(p)
        else:
            found.update(Path(q) for q in glob.glob(pat) if Path(q).is_file())
    return sorted(found)


# ---------------------------------------------------------------- workers

def _work(path: str, opts: dict) -> list[dict]:
    """Process every conversation in one file; never raises."""
    try:
        cues = load_cues(opts.get("cues"))
        streams = read_transcripts(path)
    except (TurnforgeError, OSError, UnicodeDecodeError, ValueError) as exc:
        return [{"input": path, "conversation_id": None, "status": "error",
                 "reason": f"{type(exc).__name__}: {exc}"}]
    if not streams:
        return [{"input": path, "conversation_id": None, "status": "error", "reason": "EmptyTranscript: no tokens"}]
    embeddings = opts.get("embeddings") or {}
    out = []
    for stream in streams:
        cid = stream.conversation_id
        entry: dict = {"input": path, "conversation_id": cid, "status": "ok", "reason": None}
        try:
            res = process_stream(
                stream,
                models=opts["models"],
                intervals=opts["intervals"],
                features=opts["features"],
                feature_model=opts["model"],
                grid_ms=opts["grid_ms"],
                cues=cues,
                trim=opts["trim_downtime"],
                embeddings=embeddings.get(cid),
                bc_unit=opts["bc_unit"],
            )
            payload: dict = {}
            for model in opts["models"]:
                payload[f"turns:{model}"] = turns_to_jsonl(res.turns[model], model, cid)
            if opts["intervals"]:
                payload["events"] = res.events
            if opts["features"]:
                payload["features"] = res.features
                if opts.get("topics"):
                    payload["topics"] = topic_rows(cid, res.turns[opts["model"]], opts["topics"],
                                                   opts.get("topic_window_ms"), opts.get("substring", False))
            entry["payload"] = payload
        except (TurnforgeError, ValueError) as exc:
            entry.update(status="error", reason=f"{type(exc).__name__}: {exc}")
        out.append(entry)
    return out


def run_batch(paths: Sequence[Path], opts: dict, jobs: int) -> list[dict]:
    """Process files, returning entries sorted by (conversation_id, input)."""
    args = [str(p) for p in paths]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_work, args, [opts] * len(args), chunksize=max(1, len(args) // (4 * jobs))))
    else:
        chunks = [_work(a, opts) for a in args]
    entries = [e for chunk in chunks for e in chunk]
    entries.sort(key=lambda e: (e["conversation_id"] or "", e["input"]))
    return entries


def write_manifest(out_dir: Path, command: str, config: dict, entries: list[dict], started: float) -> None:
    manifest = {
        "tool": "turnforge",
        "version": __version__,
        "command": command,
        "config": config,
        "conversations": [{k: e[k] for k in ("input", "conversation_id", "status", "reason")} for e in entries],
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _exit_code(entries: list[dict]) -> int:
    return EXIT_FAILED if any(e["status"] != "ok" for e in entries) else EXIT_OK


def _config_echo(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _opts(args: argparse.Namespace, *, models: Sequence[str], intervals: bool, features: bool) -> dict:
    topics = None
    if getattr(args, "topics", None):
        topics = json.loads(Path(args.topics).read_text(encoding="utf-8"))
    embeddings = read_embeddings(args.embeddings, args.model) if getattr(args, "embeddings", None) else None
    return {
        "models": list(models),
        "model": args.model,
        "intervals": intervals,
        "features": features,
        "grid_ms": args.grid_ms,
        "cues": args.cues,
        "trim_downtime": args.trim_downtime,
        "bc_unit": getattr(args, "bc_unit", "events"),
        "embeddings": embeddings,
        "topics": topics,
        "topic_window_ms": getattr(args, "topic_window_ms", None),
        "substring": getattr(args, "substring", False),
    }


def _inputs(args: argparse.Namespace) -> list[Path]:
    paths = expand_inputs(args.inputs)
    if not paths:
        raise ConfigError(f"no input transcripts found in {' '.join(args.inputs)}")
    return paths


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _ok(entries: list[dict]) -> list[dict]:
    return [e for e in entries if e["status"] == "ok"]


# ---------------------------------------------------------------- stages

def _write_segments(out: Path, entries: list[dict], models: Sequence[str]) -> None:
    for e in _ok(entries):
        for model in models:
            (out / f"{e['conversation_id']}.{model}.jsonl").write_text(
                e["payload"][f"turns:{model}"], encoding="utf-8")


def _write_intervals(out: Path, entries: list[dict], args: argparse.Namespace) -> None:
    events = [ev for e in _ok(entries) for ev in e["payload"]["events"]]
    (out / "intervals.csv").write_text(intervals_to_csv(events), encoding="utf-8")
    values = [t.signed_interval_ms for t in signed_transitions(events)]
    (out / "histogram.csv").write_text(histogram_to_csv(transition_histogram(values, args.bin_width)),
                                       encoding="utf-8")
    try:
        summary = interval_summary(events, args.outlier_k, args.per_speaker_first).to_dict()
    except TurnforgeError as exc:
        log.warning("no interval summary: %s", exc)
        summary = None
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_features(out: Path, entries: list[dict]) -> Path:
    feats = [f for e in _ok(entries) for f in e["payload"]["features"]]
    path = out / "features.csv"
    path.write_text(features_to_csv(feats), encoding="utf-8")
    topic = [r for e in _ok(entries) for r in e["payload"].get("topics", [])]
    if topic:
        (out / "topics.csv").write_text(topics_to_csv(topic), encoding="utf-8")
    return path


def _write_stats(out: Path, features_csv: Path, args: argparse.Namespace) -> None:
    rows = read_feature_csv(features_csv)
    if not rows:
        raise ConfigError("feature table is empty")
    grouping = grouping_from_rows(read_grouping_csv(args.grouping))
    config = CompareConfig(
        features=args.stats_features.split(",") if args.stats_features else None,
        winsor_level=args.winsor_level,
        ci="t" if args.ci_t else "normal",
        group_order=tuple(args.group_order.split(",")) if args.group_order else (),
        skip_failed=args.skip_failed,
    )
    try:
        run = compare_groups(rows, grouping, config)
    except (TooFewGroups, UnknownSpeakerInGrouping) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc
    report = [c.to_record() for c in run.comparisons]
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(format_table(run.comparisons), encoding="utf-8")
    deciles = decile_proportion_rows(run.comparisons)
    lines = ["feature,group,decile,proportion"] + [
        f"{d['feature']},{d['group']},{d['decile']},{d['proportion']!r}" for d in deciles
    ]
    (out / "deciles.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for feat, why in run.skipped.items():
        log.warning("feature %s skipped: %s", feat, why)


def _batch(args: argparse.Namespace, command: str, *, models, intervals, features) -> tuple[Path, list[dict], float]:
    started = time.perf_counter()
    paths = _inputs(args)
    out = _out_dir(args)
    opts = _opts(args, models=models, intervals=intervals, features=features)
    entries = run_batch(paths, opts, args.jobs)
    for e in entries:
        if e["status"] != "ok":
            log.error("%s (%s): %s", e["conversation_id"] or "?", e["input"], e["reason"])
    log.info("%d conversations, %d failed", len(entries), len(entries) - len(_ok(entries)))
    return out, entries, started


def cmd_segment(args: argparse.Namespace) -> int:
    models = MODELS if args.model == "all" else (args.model,)
    args.model = models[0] if args.model == "all" else args.model
    out, entries, started = _batch(args, "segment", models=models, intervals=False, features=False)
    _write_segments(out, entries, models)
    write_manifest(out, "segment", _config_echo(args), entries, started)
    return _exit_code(entries)


def cmd_intervals(args: argparse.Namespace) -> int:
    out, entries, started = _batch(args, "intervals", models=(), intervals=True, features=False)
    _write_intervals(out, entries, args)
    write_manifest(out, "intervals", _config_echo(args), entries, started)
    return _exit_code(entries)


def cmd_features(args: argparse.Namespace) -> int:
    out, entries, started = _batch(args, "features", models=(), intervals=False, features=True)
    _write_features(out, entries)
    write_manifest(out, "features", _config_echo(args), entries, started)
    return _exit_code(entries)


def cmd_stats(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    if not Path(args.features_csv).is_file():
        raise ConfigError(f"feature table {args.features_csv} not found")
    _write_stats(out, Path(args.features_csv), args)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    """Segment, intervals, features and stats in one pass over the inputs."""
    out, entries, started = _batch(args, "report", models=(args.model,), intervals=True, features=True)
    _write_segments(out, entries, (args.model,))
    _write_intervals(out, entries, args)
    feats = _write_features(out, entries)
    if args.grouping:
        _write_stats(out, feats, args)
    write_manifest(out, "report", _config_echo(args), entries, started)
    return _exit_code(entries)


def _parse_effects(specs: Sequence[str]) -> dict[str, dict[str, float]]:
    effects: dict[str, dict[str, float]] = {}
    for spec in specs:
        try:
            group, rest = spec.split(":", 1)
            key, value = rest.split("=", 1)
            effects.setdefault(group, {})[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad --group-effect {spec!r}; expected GROUP:param=value") from exc
    return effects


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    effects = _parse_effects(args.group_effect or [])
    groups = args.groups.split(",") if args.groups else None
    template = SynthConfig(
        seed=args.seed,
        n_turns=args.n_turns,
        signed_interval_distribution=(args.interval_mean_ms, args.interval_sd_ms),
        turn_duration_distribution=(args.turn_mean_s, args.turn_sd_s, args.turn_min_s),
        words_per_second=args.wps,
        backchannel_probability_per_turn=args.bc_prob,
        interjection_probability=args.interjection_prob,
        terminal_punctuation_probability=args.terminal_prob,
    )
    try:
        corpus = generate_corpus(template, args.n, effects, groups)
    except InvalidConfig as exc:
        raise ConfigError(str(exc)) from exc
    writer = tokens_to_jsonl if args.format == "jsonl" else tokens_to_csv
    # transcripts get their own directory so it can be passed straight to report
    (out / "transcripts").mkdir(exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    for stream, truth in zip(corpus.streams, corpus.truths):
        cid = stream.conversation_id
        (out / "transcripts" / f"{cid}.{args.format}").write_text(writer(stream.tokens), encoding="utf-8")
        (out / "truth" / f"{cid}.truth.json").write_text(json.dumps(truth.to_dict(), indent=2) + "\n", encoding="utf-8")
    if corpus.speaker_groups:
        lines = ["conversation_id,speaker_id,group"] + [
            f"{r['conversation_id']},{r['speaker_id']},{r['group']}" for r in corpus.grouping_rows()
        ]
        (out / "grouping.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d conversations to %s", args.n, out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_batch_args(p: argparse.ArgumentParser, default_model: str = "backbiter") -> None:
    p.add_argument("inputs", nargs="+", help="transcript files, directories or globs")
    p.add_argument("-o", "--out", default="out", help="output directory")
    p.add_argument("--model", default=default_model, help="turn model")
    p.add_argument("--grid-ms", type=int, default=10)
    p.add_argument("--cues", default=None, help="cue-list JSON (default: $TURNFORGE_CUES or bundled)")
    p.add_argument("--trim-downtime", action="store_true", help="drop tokens before both speakers joined")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def _add_interval_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--outlier-k", type=float, default=3.0, help="SD multiple for outlier removal")
    p.add_argument("--bin-width", type=int, default=50, help="histogram bin width in ms")
    p.add_argument("--per-speaker-first", action="store_true",
                   help="average per (conversation, speaker) before pooling")


def _add_feature_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bc-unit", choices=("events", "words"), default="events")
    p.add_argument("--embeddings", default=None, help="JSONL sidecar of turn vectors")
    p.add_argument("--topics", default=None, help="JSON mapping topic -> keyword list")
    p.add_argument("--topic-window-ms", type=int, default=None)
    p.add_argument("--substring", action="store_true", help="substring keyword matching")


def _add_stats_args(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--grouping", required=required, default=None,
                   help="CSV with conversation_id,speaker_id,group")
    p.add_argument("--winsor-level", type=float, default=0.95)
    p.add_argument("--ci-t", action="store_true", help="t-based intervals with G-1 df")
    p.add_argument("--group-order", default=None, help="comma-separated group order for contrasts")
    p.add_argument("--stats-features", default=None, help="comma-separated features to test")
    p.add_argument("--skip-failed", action="store_true", help="skip features whose tests fail")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turnforge", description=__doc__.split("\n")[0])
    parser.add_argument("--config", default=None, help="TOML config file; flags win over it")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    parser.add_argument("--version", action="version", version=f"turnforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="write turn JSONL per conversation")
    _add_batch_args(p, default_model="all")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("intervals", help="classify gaps, pauses and overlaps")
    _add_batch_args(p)
    _add_interval_args(p)
    p.set_defaults(func=cmd_intervals)

    p = sub.add_parser("features", help="per-turn feature table")
    _add_batch_args(p)
    _add_feature_args(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("stats", help="group comparisons over a feature table")
    p.add_argument("features_csv", help="features.csv from the features command")
    p.add_argument("-o", "--out", default="out")
    _add_stats_args(p, required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="all stages in one run")
    _add_batch_args(p)
    _add_interval_args(p)
    _add_feature_args(p)
    _add_stats_args(p, required=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    p.add_argument("-o", "--out", default="synth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-n", type=int, default=10, help="number of conversations")
    p.add_argument("--n-turns", type=int, default=60)
    p.add_argument("--interval-mean-ms", type=float, default=80.0)
    p.add_argument("--interval-sd-ms", type=float, default=500.0)
    p.add_argument("--turn-mean-s", type=float, default=3.0)
    p.add_argument("--turn-sd-s", type=float, default=2.0)
    p.add_argument("--turn-min-s", type=float, default=0.6)
    p.add_argument("--wps", type=float, default=3.0)
    p.add_argument("--bc-prob", type=float, default=0.3)
    p.add_argument("--interjection-prob", type=float, default=0.0)
    p.add_argument("--terminal-prob", type=float, default=0.05)
    p.add_argument("--group-effect", action="append",
                   help=f"GROUP:param=delta, repeatable; param in {', '.join(EFFECT_PARAMS)}")
    p.add_argument("--groups", default=None, help="comma-separated group labels")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=cmd_synth)
    return parser


def load_config(path: str | None, command: str) -> dict:
    """Top-level keys apply to every command; a ``[command]`` table overrides them."""
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    flat = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
    section = data.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] must be a table")
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        # find the subcommand to pick its table, then install file values as defaults
        probe, _ = parser.parse_known_args(argv)
        cfg = load_config(known.config, probe.command)
        subparser = parser._subparsers._group_actions[0].choices[probe.command]  # noqa: SLF001
        valid = {a.dest for a in subparser._actions}  # noqa: SLF001
        root = {"quiet"}
        unknown = sorted(set(cfg) - valid - root)
        if unknown:
            raise ConfigError(f"unknown config keys for {probe.command}: {', '.join(unknown)}")
        parser.set_defaults(**{k: v for k, v in cfg.items() if k in root})
        subparser.set_defaults(**{k: v for k, v in cfg.items() if k in valid})
    return parser.parse_args(argv)


def _validate(args: argparse.Namespace) -> None:
    if hasattr(args, "model"):
        allowed = MODELS + ("all",) if args.command == "segment" else MODELS
        if args.model not in allowed:
            raise ConfigError(f"unknown model {args.model!r}; expected one of {', '.join(allowed)}")
    if getattr(args, "grid_ms", 1) <= 0:
        raise ConfigError("grid_ms must be positive")
    if getattr(args, "jobs", 1) < 1:
        raise ConfigError("jobs must be at least 1")
    level = getattr(args, "winsor_level", 0.5)
    if not 0 < level < 1:
        raise ConfigError("winsor_level must lie in (0, 1)")
    cues = getattr(args, "cues", None)
    if cues and not Path(cues).is_file():
        raise ConfigError(f"cue file {cues} not found")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"turnforge: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        _validate(args)
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (StatsError, InvalidConfig) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
