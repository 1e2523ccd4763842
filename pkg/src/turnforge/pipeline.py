"""Per-conversation processing and the CSV/JSON exports built on it."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .features import (
    FEATURE_NAMES,
    TurnFeatures,
    conversation_weights,
    decile_bin,
    features_as_rows,
    is_missing,
    topic_frequency,
    turn_features,
)
from .state_machine import IntervalEvent, build_state_series, classify_intervals
from .transcript_io import TranscriptStream, join_tokens, trim_downtime, validate_dyad
from .turn_models import CueLists, Turn, segment

INTERVAL_COLUMNS = ("conversation_id", "kind", "start_ms", "stop_ms", "duration_ms", "holder_before", "holder_after")
FEATURE_COLUMNS = ("conversation_id", "speaker_id", "turn_id", *FEATURE_NAMES)


@dataclass
class ConversationResult:
    conversation_id: str
    turns: dict[str, list[Turn]] = field(default_factory=dict)
    events: list[IntervalEvent] = field(default_factory=list)
    features: list[TurnFeatures] = field(default_factory=list)


def process_stream(
    stream: TranscriptStream,
    models: Sequence[str] = ("backbiter",),
    *,
    intervals: bool = True,
    features: bool = True,
    feature_model: str = "backbiter",
    grid_ms: int = 10,
    cues: CueLists | None = None,
    trim: bool = False,
    embeddings: Mapping[int, Sequence[float]] | None = None,
    bc_unit: str = "events",
) -> ConversationResult:
    """Segment, classify intervals and compute turn features for one dyad."""
    validate_dyad(stream)
    if trim:
        stream = trim_downtime(stream)
    result = ConversationResult(stream.conversation_id)
    wanted = list(models)
    if features and feature_model not in wanted:
        wanted.append(feature_model)
    for model in wanted:
        result.turns[model] = segment(stream, model, cues)
    if intervals:
        utterances = join_tokens(stream)
        series = build_state_series(
            utterances, grid_ms, speakers=stream.speaker_order, conversation_id=stream.conversation_id
        )
        result.events = classify_intervals(series)
    if features:
        result.features = turn_features(result.turns[feature_model], embeddings, bc_unit)
    return result


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if is_missing(value) else repr(value)
    return str(value)


def _csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def interval_rows(events: Iterable[IntervalEvent]) -> list[tuple]:
    return [
        (e.conversation_id, e.kind.value, e.start_ms, e.stop_ms, e.duration_ms, e.holder_before, e.holder_after)
        for e in events
    ]


def intervals_to_csv(events: Iterable[IntervalEvent], header: bool = True) -> str:
    text = _csv(INTERVAL_COLUMNS, interval_rows(events))
    return text if header else text.split("\n", 1)[1]


def histogram_to_csv(bins: Iterable[tuple[int, int, int]]) -> str:
    return _csv(("bin_left_ms", "bin_right_ms", "count"), bins)


def feature_table(features: Iterable[TurnFeatures]) -> tuple[list[str], list[dict]]:
    """Feature rows with a conversation weight and corpus decile per feature.

    Deciles are cut over all rows that have a value, weighting each
    (conversation, speaker) equally; rows without a value get no decile.
    """
    rows = features_as_rows(features)
    keys = [(r["conversation_id"], r["speaker_id"]) for r in rows]
    for r, w in zip(rows, conversation_weights(keys)):
        r["weight"] = w
    for name in FEATURE_NAMES:
        idx = [i for i, r in enumerate(rows) if not is_missing(r[name])]
        for r in rows:
            r[f"decile_{name}"] = None
        if not idx:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            binning = decile_bin([rows[i][name] for i in idx], [rows[i]["weight"] for i in idx])
        for i, b in zip(idx, binning.assignments.tolist()):
            rows[i][f"decile_{name}"] = b
    columns = [*FEATURE_COLUMNS, "weight", *(f"decile_{n}" for n in FEATURE_NAMES)]
    return columns, rows


def features_to_csv(features: Iterable[TurnFeatures]) -> str:
    columns, rows = feature_table(features)
    return _csv(columns, ([r[c] for c in columns] for r in rows))


def read_feature_csv(path: str | Path) -> list[dict]:
    """Load a feature CSV, converting numeric columns and blanks to None."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        out = []
        for rec in reader:
            row: dict = {}
            for k, v in rec.items():
                if k in ("conversation_id", "speaker_id"):
                    row[k] = v
                elif k == "turn_id" or k.startswith("decile_"):
                    row[k] = int(v) if v != "" else None
                else:
                    row[k] = float(v) if v != "" else None
            out.append(row)
    return out


def read_grouping_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_embeddings(path: str | Path, model: str | None = None) -> dict[str, dict[int, list[float]]]:
    """Embedding sidecar: JSONL of ``{conversation_id, turn_id, vector}``.

    Records may carry a ``model`` field; those for other turn models are skipped.
    """
    out: dict[str, dict[int, list[float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if model is not None and rec.get("model", model) != model:
                continue
            out.setdefault(str(rec["conversation_id"]), {})[int(rec["turn_id"])] = [float(x) for x in rec["vector"]]
    return out


def topic_rows(conversation_id: str, turns: Sequence[Turn], dictionary: Mapping[str, Sequence[str]],
               window_ms: int | None, substring: bool) -> list[tuple]:
    counts = topic_frequency(turns, dictionary, window_ms, substring)
    return [(conversation_id, bucket, topic, n) for bucket, per in counts.items() for topic, n in per.items()]


def topics_to_csv(rows: Iterable[tuple]) -> str:
    return _csv(("conversation_id", "bucket_start_ms", "topic", "count"), rows)
