"""Token-level transcript ingestion and utterance joining.

Input is either CSV (header required) or JSONL with the fields
``conversation_id, speaker_id, text, start_ms, stop_ms[, confidence]``.
Times are stored as integer milliseconds; fractional inputs are rounded
half away from zero.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .errors import (
    MalformedRecord,
    MixedConversations,
    NegativeDuration,
    NotDyadic,
    OverlappingSameSpeaker,
)

REQUIRED_FIELDS = ("conversation_id", "speaker_id", "text", "start_ms", "stop_ms")
OPTIONAL_FIELDS = ("confidence",)

Format = Literal["csv", "jsonl"]


@dataclass(frozen=True, slots=True)
class Token:
    conversation_id: str
    speaker_id: str
    text: str
    start_ms: int
    stop_ms: int
    confidence: float | None = None

    @property
    def sort_key(self) -> tuple[int, int, str]:
        return (self.start_ms, self.stop_ms, self.speaker_id)


@dataclass(frozen=True, slots=True)
class Utterance:
    """A run of one speaker's tokens separated by at most the join gap."""

    speaker_id: str
    start_ms: int
    stop_ms: int
    tokens: tuple[Token, ...]

    @property
    def text(self) -> str:
        return " ".join(t.text for t in self.tokens)


@dataclass(frozen=True)
class TranscriptStream:
    conversation_id: str
    tokens: tuple[Token, ...]
    speakers: frozenset[str] = field(default_factory=frozenset)
    conversation_start_ms: int | None = None

    def __post_init__(self) -> None:
        if not self.speakers:
            object.__setattr__(self, "speakers", frozenset(t.speaker_id for t in self.tokens))
        if self.conversation_start_ms is None:
            object.__setattr__(self, "conversation_start_ms", _second_speaker_start(self.tokens))

    @classmethod
    def from_tokens(cls, tokens: Iterable[Token], conversation_id: str | None = None) -> TranscriptStream:
        toks = tuple(sorted(tokens, key=lambda t: t.sort_key))
        if conversation_id is None:
            ids = {t.conversation_id for t in toks}
            if len(ids) > 1:
                raise MixedConversations(f"tokens from {len(ids)} conversations: {sorted(ids)}")
            conversation_id = ids.pop() if ids else ""
        return cls(conversation_id=conversation_id, tokens=toks)

    @property
    def speaker_order(self) -> tuple[str, ...]:
        """Speakers ordered by first appearance."""
        seen: dict[str, None] = {}
        for t in self.tokens:
            seen.setdefault(t.speaker_id, None)
        return tuple(seen)


def _second_speaker_start(tokens: Sequence[Token]) -> int | None:
    first = None
    for t in tokens:
        if first is None:
            first = t.speaker_id
        elif t.speaker_id != first:
            return t.start_ms
    return None


def _to_ms(raw: object, line: int, name: str) -> int:
    if raw is None or (isinstance(raw, str) and not raw.strip()):
        raise MalformedRecord(line, f"missing {name}")
    if isinstance(raw, bool):
        raise MalformedRecord(line, f"non-numeric {name}: {raw!r}")
    try:
        value = Decimal(str(raw).strip())
    except InvalidOperation:
        raise MalformedRecord(line, f"non-numeric {name}: {raw!r}") from None
    if not value.is_finite():
        raise MalformedRecord(line, f"non-finite {name}: {raw!r}")
    # ROUND_HALF_UP on Decimal rounds half away from zero
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _record_to_token(rec: dict, line: int) -> Token:
    for name in REQUIRED_FIELDS:
        if name not in rec or rec[name] is None:
            raise MalformedRecord(line, f"missing {name}")
    text = str(rec["text"]).strip()
    if not text:
        raise MalformedRecord(line, "empty text")
    conv = str(rec["conversation_id"]).strip()
    spk = str(rec["speaker_id"]).strip()
    if not conv or not spk:
        raise MalformedRecord(line, "empty conversation_id or speaker_id")
    start = _to_ms(rec["start_ms"], line, "start_ms")
    stop = _to_ms(rec["stop_ms"], line, "stop_ms")
    if start < 0:
        raise MalformedRecord(line, f"negative start_ms {start}")
    if stop < start:
        raise NegativeDuration(line, start, stop)
    conf_raw = rec.get("confidence")
    confidence = None
    if conf_raw is not None and str(conf_raw).strip() != "":
        try:
            confidence = float(conf_raw)
        except (TypeError, ValueError):
            raise MalformedRecord(line, f"non-numeric confidence: {conf_raw!r}") from None
        if not 0.0 <= confidence <= 1.0:
            raise MalformedRecord(line, f"confidence {confidence} outside [0, 1]")
    return Token(conv, spk, text, start, stop, confidence)


def _iter_records(text: str, fmt: Format) -> Iterable[tuple[int, dict]]:
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text, newline=""))
        if reader.fieldnames is None:
            return
        missing = [f for f in REQUIRED_FIELDS if f not in reader.fieldnames]
        if missing:
            raise MalformedRecord(1, f"header lacks columns {missing}")
        for row in reader:
            yield reader.line_num, row
    elif fmt == "jsonl":
        for lineno, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise MalformedRecord(lineno, "record is not an object")
            yield lineno, rec
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _decode(data: bytes | str) -> str:
    if isinstance(data, bytes):
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRecord(0, f"input is not UTF-8: {exc.reason}") from None
    return data


def parse_transcripts(data: bytes | str, fmt: Format = "csv") -> list[TranscriptStream]:
    """Parse raw input that may hold several conversations.

    Returns one sorted stream per conversation, ordered by conversation id.
    """
    by_conv: dict[str, list[Token]] = defaultdict(list)
    for line, rec in _iter_records(_decode(data), fmt):
        tok = _record_to_token(rec, line)
        by_conv[tok.conversation_id].append(tok)
    return [TranscriptStream.from_tokens(toks, cid) for cid, toks in sorted(by_conv.items())]


def parse_transcript(data: bytes | str, fmt: Format = "csv") -> TranscriptStream:
    streams = parse_transcripts(data, fmt)
    if not streams:
        return TranscriptStream(conversation_id="", tokens=())
    if len(streams) > 1:
        raise MixedConversations(
            f"input holds {len(streams)} conversations; use parse_transcripts"
        )
    return streams[0]


def format_for_path(path: str | Path) -> Format:
    suffix = Path(path).suffix.lower()
    if suffix in (".jsonl", ".ndjson", ".json"):
        return "jsonl"
    return "csv"


def read_transcripts(path: str | Path) -> list[TranscriptStream]:
    return parse_transcripts(Path(path).read_bytes(), format_for_path(path))


def validate_dyad(stream: TranscriptStream) -> TranscriptStream:
    if len(stream.speakers) != 2:
        raise NotDyadic(len(stream.speakers))
    return stream


def trim_downtime(stream: TranscriptStream) -> TranscriptStream:
    """Drop tokens starting before both speakers are present."""
    start = stream.conversation_start_ms
    if start is None:
        return stream
    kept = tuple(t for t in stream.tokens if t.start_ms >= start)
    return replace(stream, tokens=kept)


def join_tokens(stream: TranscriptStream, max_gap_ms: int = 20) -> list[Utterance]:
    """Join each speaker's adjacent tokens separated by ``max_gap_ms`` or less.

    Joining is done per speaker; the partner's tokens never split a run.
    Utterances come back sorted by (start_ms, stop_ms, speaker_id).
    """
    per_speaker: dict[str, list[Token]] = defaultdict(list)
    for tok in stream.tokens:
        per_speaker[tok.speaker_id].append(tok)

    utterances: list[Utterance] = []
    for speaker, toks in per_speaker.items():
        toks.sort(key=lambda t: t.sort_key)
        run = [toks[0]]
        for prev, nxt in zip(toks, toks[1:]):
            if nxt.start_ms < prev.stop_ms:
                raise OverlappingSameSpeaker(speaker, prev.stop_ms, nxt.start_ms)
            if nxt.start_ms - prev.stop_ms <= max_gap_ms:
                run.append(nxt)
            else:
                utterances.append(_make_utterance(speaker, run))
                run = [nxt]
        utterances.append(_make_utterance(speaker, run))
    utterances.sort(key=lambda u: (u.start_ms, u.stop_ms, u.speaker_id))
    return utterances


def _make_utterance(speaker: str, run: list[Token]) -> Utterance:
    return Utterance(
        speaker_id=speaker,
        start_ms=run[0].start_ms,
        stop_ms=max(t.stop_ms for t in run),
        tokens=tuple(run),
    )


def tokens_to_csv(tokens: Iterable[Token]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REQUIRED_FIELDS + OPTIONAL_FIELDS)
    for t in tokens:
        conf = "" if t.confidence is None else repr(t.confidence)
        writer.writerow([t.conversation_id, t.speaker_id, t.text, t.start_ms, t.stop_ms, conf])
    return buf.getvalue()


def tokens_to_jsonl(tokens: Iterable[Token]) -> str:
    lines = []
    for t in tokens:
        rec = {
            "conversation_id": t.conversation_id,
            "speaker_id": t.speaker_id,
            "text": t.text,
            "start_ms": t.start_ms,
            "stop_ms": t.stop_ms,
        }
        if t.confidence is not None:
            rec["confidence"] = t.confidence
        lines.append(json.dumps(rec, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)
