"""Turn segmentation: Audiophile, Cliffhanger and Backbiter.

* Audiophile: a turn is everything one speaker says until the partner
  produces a token.
* Cliffhanger: turns end only at terminal punctuation; a partner who starts
  talking mid-sentence is queued until the sentence is finished.
* Backbiter: Audiophile turns, with short back-channel turns moved into a
  registry attached to the partner's surrounding turn.
"""

from __future__ import annotations

import bisect
import json
import os
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .errors import EmptyInput
from .transcript_io import Token, TranscriptStream

Model = Literal["audiophile", "cliffhanger", "backbiter"]
MODELS: tuple[str, ...] = ("audiophile", "cliffhanger", "backbiter")
PRE_JOIN_TURN_ID = -1

_EDGE_PUNCT = re.compile(r"^\W+|\W+$")
_CLOSERS = "\"')]}”’»"


@dataclass(frozen=True)
class CueLists:
    backchannel_cues: frozenset[str]
    not_backchannel_beginnings: frozenset[str]
    terminal_punctuation: frozenset[str]
    version: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> CueLists:
        return cls(
            backchannel_cues=frozenset(w.lower() for w in data["backchannel_cues"]),
            not_backchannel_beginnings=frozenset(w.lower() for w in data["not_backchannel_beginnings"]),
            terminal_punctuation=frozenset(data.get("terminal_punctuation", [".", "?", "!"])),
            version=int(data.get("version", 1)),
        )


def load_cues(path: str | Path | None = None) -> CueLists:
    """Load cue lists from ``path``, ``$TURNFORGE_CUES`` or the bundled file."""
    path = path or os.environ.get("TURNFORGE_CUES")
    if path:
        return CueLists.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    return default_cues()


def _bundled_cues() -> CueLists:
    text = resources.files("turnforge").joinpath("data/cues.json").read_text(encoding="utf-8")
    return CueLists.from_dict(json.loads(text))


_DEFAULT_CUES: CueLists | None = None


def default_cues() -> CueLists:
    global _DEFAULT_CUES
    if _DEFAULT_CUES is None:
        _DEFAULT_CUES = _bundled_cues()
    return _DEFAULT_CUES


@dataclass(frozen=True)
class BackchannelEntry:
    listener_id: str
    text: str
    start_ms: int
    stop_ms: int
    anchored_turn_id: int
    tokens: tuple[Token, ...] = ()


@dataclass
class Turn:
    turn_id: int
    speaker_id: str
    start_ms: int
    stop_ms: int
    text: str
    tokens: tuple[Token, ...]
    backchannels: list[BackchannelEntry] = field(default_factory=list)
    conversation_id: str = ""

    @property
    def duration_ms(self) -> int:
        return self.stop_ms - self.start_ms

    @property
    def word_count(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_tokens(cls, turn_id: int, tokens: Sequence[Token], conversation_id: str = "") -> Turn:
        return cls(
            turn_id=turn_id,
            speaker_id=tokens[0].speaker_id,
            start_ms=min(t.start_ms for t in tokens),
            stop_ms=max(t.stop_ms for t in tokens),
            text=" ".join(t.text for t in tokens),
            tokens=tuple(tokens),
            conversation_id=conversation_id,
        )


def normalize_word(word: str) -> str:
    """Case-fold and strip edge punctuation, keeping internal apostrophes."""
    word = word.replace("’", "'").casefold()
    return _EDGE_PUNCT.sub("", word)


def words_of(text: str) -> list[str]:
    return [w for w in (normalize_word(raw) for raw in text.split()) if w]


def ends_sentence(text: str, cues: CueLists | None = None) -> bool:
    terminal = (cues or default_cues()).terminal_punctuation
    stripped = text.rstrip().rstrip(_CLOSERS)
    return bool(stripped) and stripped[-1] in terminal


def is_backchannel(words: Sequence[str], cues: CueLists | None = None) -> bool:
    """Apply the three back-channel rules to normalized words.

    True iff there are at most three words, strictly more than half of them
    are cue words, and the first word is not a prohibited beginning.
    """
    if not words:
        return False
    cues = cues or default_cues()
    if len(words) > 3:
        return False
    hits = sum(1 for w in words if w in cues.backchannel_cues)
    if 2 * hits <= len(words):
        return False
    return words[0] not in cues.not_backchannel_beginnings


def segment_audiophile(stream: TranscriptStream) -> list[Turn]:
    turns: list[Turn] = []
    run: list[Token] = []
    for tok in stream.tokens:
        if run and tok.speaker_id != run[-1].speaker_id:
            turns.append(Turn.from_tokens(len(turns), run, stream.conversation_id))
            run = []
        run.append(tok)
    if run:
        turns.append(Turn.from_tokens(len(turns), run, stream.conversation_id))
    return turns


class _Sentence:
    __slots__ = ("tokens", "closed")

    def __init__(self) -> None:
        self.tokens: list[Token] = []
        self.closed = False


def segment_cliffhanger(stream: TranscriptStream, cues: CueLists | None = None) -> list[Turn]:
    """One turn per sentence, with partner interjections deferred.

    The sentence holding the floor is emitted when it closes; sentences the
    partner began meanwhile follow in start order. A speaker's last token
    always closes their sentence.
    """
    cues = cues or default_cues()
    last_index = {tok.speaker_id: i for i, tok in enumerate(stream.tokens)}
    open_by: dict[str, _Sentence] = {}
    pending: list[_Sentence] = []
    floor: _Sentence | None = None
    done: list[_Sentence] = []

    for i, tok in enumerate(stream.tokens):
        sent = open_by.get(tok.speaker_id)
        if sent is None:
            sent = _Sentence()
            open_by[tok.speaker_id] = sent
            if floor is None:
                floor = sent
            else:
                pending.append(sent)
        sent.tokens.append(tok)
        if ends_sentence(tok.text, cues) or i == last_index[tok.speaker_id]:
            sent.closed = True
            del open_by[tok.speaker_id]
            while floor is not None and floor.closed:
                done.append(floor)
                floor = pending.pop(0) if pending else None

    return [Turn.from_tokens(i, s.tokens, stream.conversation_id) for i, s in enumerate(done)]


def segment_backbiter(stream: TranscriptStream, cues: CueLists | None = None) -> list[Turn]:
    """Audiophile turns with back-channels moved to a parallel registry.

    A back-channel anchors to the partner's main turn containing its start,
    else the partner's most recent earlier main turn, else a pre-join bucket
    with ``turn_id == -1`` placed first in the result.
    """
    cues = cues or default_cues()
    cands = segment_audiophile(stream)
    flags = [is_backchannel(words_of(c.text), cues) for c in cands]
    # mutual overlapping back-channels: the earlier one keeps the floor
    for i in range(len(cands) - 1):
        if flags[i] and flags[i + 1] and cands[i + 1].start_ms < cands[i].stop_ms:
            flags[i] = False

    main_runs: list[list[Token]] = []
    for cand, flag in zip(cands, flags):
        if flag:
            continue
        if main_runs and main_runs[-1][0].speaker_id == cand.speaker_id:
            main_runs[-1].extend(cand.tokens)
        else:
            main_runs.append(list(cand.tokens))
    main = [Turn.from_tokens(i, run, stream.conversation_id) for i, run in enumerate(main_runs)]

    by_speaker: dict[str, list[Turn]] = defaultdict(list)
    for t in main:
        by_speaker[t.speaker_id].append(t)
    starts = {s: [t.start_ms for t in ts] for s, ts in by_speaker.items()}

    pre_join: list[BackchannelEntry] = []
    for cand, flag in zip(cands, flags):
        if not flag:
            continue
        anchor = None
        for spk, turns in by_speaker.items():
            if spk == cand.speaker_id:
                continue
            j = bisect.bisect_right(starts[spk], cand.start_ms) - 1
            if j >= 0:
                anchor = turns[j]
        entry = BackchannelEntry(
            listener_id=cand.speaker_id,
            text=cand.text,
            start_ms=cand.start_ms,
            stop_ms=cand.stop_ms,
            anchored_turn_id=anchor.turn_id if anchor else PRE_JOIN_TURN_ID,
            tokens=cand.tokens,
        )
        if anchor is None:
            pre_join.append(entry)
        else:
            anchor.backchannels.append(entry)

    if pre_join:
        bucket = Turn(
            turn_id=PRE_JOIN_TURN_ID,
            speaker_id="",
            start_ms=pre_join[0].start_ms,
            stop_ms=pre_join[0].start_ms,
            text="",
            tokens=(),
            backchannels=pre_join,
            conversation_id=stream.conversation_id,
        )
        main.insert(0, bucket)
    return main


def segment(stream: TranscriptStream, model: str, cues: CueLists | None = None) -> list[Turn]:
    if model == "audiophile":
        return segment_audiophile(stream)
    if model == "cliffhanger":
        return segment_cliffhanger(stream, cues)
    if model == "backbiter":
        return segment_backbiter(stream, cues)
    raise ValueError(f"unknown turn model {model!r}; expected one of {MODELS}")


def main_turns(turns: Iterable[Turn]) -> list[Turn]:
    """Drop the pre-join back-channel bucket, if present."""
    return [t for t in turns if t.turn_id != PRE_JOIN_TURN_ID]


@dataclass(frozen=True)
class BackchannelStats:
    share_of_turns_with_bc: float
    share_among_5plus_word_turns: float | None
    bc_words_per_hour: float
    frequency_table: dict[str, int]
    n_participants: int


def backchannel_stats(turns: Iterable[Turn], min_words: int = 5) -> BackchannelStats:
    """Back-channel rates received by speakers, averaged per participant first.

    Participants are keyed by ``speaker_id``; pass ids that are unique per
    person across the corpus. ``bc_words_per_hour`` divides back-channel
    words received during a participant's turns by the time they held them.
    """
    per: dict[str, list[Turn]] = defaultdict(list)
    freq: Counter[str] = Counter()
    for t in turns:
        for bc in t.backchannels:
            freq.update(words_of(bc.text))
        if t.turn_id != PRE_JOIN_TURN_ID:
            per[t.speaker_id].append(t)
    if not per:
        raise EmptyInput("no main turns")

    shares, long_shares, rates = [], [], []
    for spk in sorted(per):
        ts = per[spk]
        shares.append(sum(1 for t in ts if t.backchannels) / len(ts))
        long = [t for t in ts if t.word_count >= min_words]
        if long:
            long_shares.append(sum(1 for t in long if t.backchannels) / len(long))
        hours = sum(t.duration_ms for t in ts) / 3_600_000
        words = sum(len(words_of(bc.text)) for t in ts for bc in t.backchannels)
        if hours > 0:
            rates.append(words / hours)

    def mean(xs: list[float]) -> float:
        return sum(xs) / len(xs)

    return BackchannelStats(
        share_of_turns_with_bc=mean(shares),
        share_among_5plus_word_turns=mean(long_shares) if long_shares else None,
        bc_words_per_hour=mean(rates) if rates else 0.0,
        frequency_table=dict(sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))),
        n_participants=len(per),
    )


def turn_record(turn: Turn, model: str, conversation_id: str | None = None) -> dict:
    return {
        "conversation_id": conversation_id if conversation_id is not None else turn.conversation_id,
        "model": model,
        "turn_id": turn.turn_id,
        "speaker_id": turn.speaker_id,
        "start_ms": turn.start_ms,
        "stop_ms": turn.stop_ms,
        "text": turn.text,
        "backchannels": [
            {"listener_id": b.listener_id, "text": b.text, "start_ms": b.start_ms, "stop_ms": b.stop_ms}
            for b in turn.backchannels
        ],
    }


def turns_to_jsonl(turns: Iterable[Turn], model: str, conversation_id: str | None = None) -> str:
    return "".join(
        json.dumps(turn_record(t, model, conversation_id), ensure_ascii=False) + "\n" for t in turns
    )
