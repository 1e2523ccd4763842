from __future__ import annotations

import json
import time
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turnforge.errors import EmptyInput
from turnforge.transcript_io import Token, TranscriptStream, read_transcripts
from turnforge.turn_models import (
    MODELS,
    PRE_JOIN_TURN_ID,
    CueLists,
    Turn,
    backchannel_stats,
    default_cues,
    ends_sentence,
    is_backchannel,
    load_cues,
    main_turns,
    segment,
    segment_audiophile,
    segment_backbiter,
    segment_cliffhanger,
    turns_to_jsonl,
    words_of,
)

DATA = Path(__file__).parent / "data"

# transcribed by hand from the supplementary cue lists
CUES = [
    "a", "ah", "alright", "awesome", "cool", "dope", "e", "exactly", "god", "gotcha",
    "huh", "hmm", "mhm", "mm", "mmm", "nice", "oh", "okay", "really", "right",
    "sick", "sucks", "sure", "uh", "um", "wow", "yeah", "yep", "yes", "yup",
]
NOT_BEGINNINGS = [
    "and", "but", "i", "i'm", "it", "it's", "like", "so", "that", "that's",
    "we", "we're", "well", "you", "you're",
]


def make(*spec, conv="c1"):
    """spec items: (speaker, text, start, stop)."""
    return TranscriptStream.from_tokens([Token(conv, s, t, a, b) for s, t, a, b in spec], conv)


def texts(turns):
    return [t.text for t in turns]


def test_intro_golden_jsonl():
    stream = read_transcripts(DATA / "intro_tokens.csv")[0]
    for model in ("audiophile", "cliffhanger"):
        golden = (DATA / f"intro.{model}.jsonl").read_text(encoding="utf-8")
        assert turns_to_jsonl(segment(stream, model), model) == golden


def test_intro_turn_texts():
    stream = read_transcripts(DATA / "intro_tokens.csv")[0]
    assert len(segment_audiophile(stream)) == 8
    assert texts(segment_cliffhanger(stream)) == [
        "Hello, my name is Fatima.", "Hi.", "I'm from Egypt.", "Nice to meet you."
    ]


def test_hosted_backchannels_structure():
    stream = read_transcripts(DATA / "hosted_bc_tokens.csv")[0]
    turns = segment_backbiter(stream)
    assert [(t.speaker_id, len(t.backchannels)) for t in turns] == [("S1", 2), ("S2", 1)]
    assert [b.text for b in turns[0].backchannels] == ["yeah", "mhm"]
    assert turns[0].text == "Hi I'm Sam and I live in Ohio where I teach school."
    assert turns[1].text == "Nice to meet you I'm Alex."
    got = Counter(t for turn in turns for t in turn.tokens) + Counter(
        t for turn in turns for b in turn.backchannels for t in b.tokens)
    assert got == Counter(stream.tokens)


def test_cue_lists_match_source():
    raw = json.loads((Path(__file__).parents[1] / "src/turnforge/data/cues.json").read_text(encoding="utf-8"))
    assert raw["backchannel_cues"] == CUES
    assert raw["not_backchannel_beginnings"] == NOT_BEGINNINGS
    assert raw["terminal_punctuation"] == [".", "?", "!"]
    cues = default_cues()
    assert cues.backchannel_cues == frozenset(CUES)
    assert cues.not_backchannel_beginnings == frozenset(NOT_BEGINNINGS)


RULES = json.loads((DATA / "backchannel_rules.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("row", RULES, ids=[r["text"] for r in RULES])
def test_backchannel_rule_table(row):
    assert is_backchannel(words_of(row["text"])) is row["expected"], row["why"]


def test_rule_table_covers_each_boundary():
    assert len(RULES) >= 30
    firsts = {words_of(r["text"])[0] for r in RULES}
    assert set(NOT_BEGINNINGS) <= firsts


def test_spec_examples_for_predicate():
    assert is_backchannel(["yeah"])
    assert not is_backchannel(["i'm", "good"])
    assert not is_backchannel(["yeah", "but", "still"])
    assert not is_backchannel([])


def test_normalization():
    assert words_of("I’m  “Yeah,”  OK!") == ["i'm", "yeah", "ok"]
    assert ends_sentence('done."') and ends_sentence("what?)") and not ends_sentence("so,")


def test_custom_cue_file(tmp_path, monkeypatch):
    path = tmp_path / "cues.json"
    path.write_text(json.dumps({"backchannel_cues": ["totally"], "not_backchannel_beginnings": []}))
    cues = load_cues(path)
    assert is_backchannel(["totally"], cues) and not is_backchannel(["yeah"], cues)
    monkeypatch.setenv("TURNFORGE_CUES", str(path))
    assert load_cues() == cues
    monkeypatch.delenv("TURNFORGE_CUES")
    assert load_cues() == default_cues()


def test_audiophile_single_speaker():
    s = make(("A", "one", 0, 100), ("A", "two", 200, 300))
    assert texts(segment_audiophile(s)) == ["one two"]


def test_audiophile_strict_interleave():
    spec = [("AB"[i % 2], f"w{i}", i * 100, i * 100 + 50) for i in range(10)]
    turns = segment_audiophile(make(*spec))
    assert len(turns) == 10
    assert all(a.speaker_id != b.speaker_id for a, b in zip(turns, turns[1:]))


def test_cliffhanger_splits_at_terminal_punctuation():
    s = make(("A", "Hi.", 0, 100), ("A", "How", 200, 300), ("A", "are", 300, 400), ("A", "you?", 400, 500))
    assert texts(segment_cliffhanger(s)) == ["Hi.", "How are you?"]


def test_cliffhanger_flushes_unpunctuated_speaker():
    s = make(("A", "one", 0, 100), ("A", "two", 100, 200), ("B", "three.", 300, 400))
    turns = segment_cliffhanger(s)
    assert [(t.speaker_id, t.text) for t in turns] == [("A", "one two"), ("B", "three.")]


def test_cliffhanger_multiple_interjections_in_start_order():
    s = make(
        ("A", "I", 0, 100), ("B", "Oh.", 150, 250), ("A", "think", 300, 400),
        ("B", "Yes.", 450, 550), ("A", "so.", 600, 700),
    )
    assert texts(segment_cliffhanger(s)) == ["I think so.", "Oh.", "Yes."]


def test_backbiter_without_backchannels_equals_audiophile():
    s = make(("A", "hello", 0, 100), ("B", "good", 200, 300), ("A", "morning", 400, 500))
    bb = segment_backbiter(s)
    au = segment_audiophile(s)
    assert [(t.speaker_id, t.text, t.start_ms, t.stop_ms) for t in bb] == [
        (t.speaker_id, t.text, t.start_ms, t.stop_ms) for t in au
    ]
    assert all(not t.backchannels for t in bb)


def test_backbiter_substantive_interjection_splits_turn():
    s = make(
        ("A", "so", 0, 100), ("A", "the", 100, 200), ("B", "wow", 150, 300), ("A", "plan", 300, 400),
        ("B", "so", 450, 500), ("B", "anyway", 500, 600), ("B", "I", 600, 650), ("B", "disagree", 650, 800),
        ("A", "is", 810, 900), ("A", "good.", 900, 1000),
    )
    turns = segment_backbiter(s)
    assert [(t.speaker_id, t.text) for t in turns] == [
        ("A", "so the plan"), ("B", "so anyway I disagree"), ("A", "is good.")
    ]
    assert [b.text for b in turns[0].backchannels] == ["wow"]


def test_backbiter_anchor_prefers_containing_turn():
    s = make(("A", "long", 0, 1000), ("B", "talk", 1100, 2000), ("A", "yeah", 1500, 1600), ("B", "here.", 2000, 2100))
    turns = segment_backbiter(s)
    assert [(t.speaker_id, [b.text for b in t.backchannels]) for t in turns] == [("A", []), ("B", ["yeah"])]
    assert turns[1].backchannels[0].anchored_turn_id == turns[1].turn_id


def test_backbiter_prejoin_bucket():
    s = make(("B", "mhm", 0, 100), ("A", "hello", 200, 300), ("A", "there.", 300, 400))
    turns = segment_backbiter(s)
    assert turns[0].turn_id == PRE_JOIN_TURN_ID
    assert [b.text for b in turns[0].backchannels] == ["mhm"]
    assert [t.text for t in main_turns(turns)] == ["hello there."]


def test_backbiter_mutual_backchannels_keep_earlier():
    s = make(("A", "words", 0, 500), ("B", "more", 600, 1000), ("A", "yeah", 1100, 1300), ("B", "mhm", 1200, 1400))
    turns = segment_backbiter(s)
    assert [t.text for t in main_turns(turns)] == ["words", "more", "yeah"]
    assert [b.text for t in turns for b in t.backchannels] == ["mhm"]


def _turn(spk, words, bcs=0, dur=1000):
    toks = tuple(Token("c", spk, f"w{i}", 0, dur) for i in range(words))
    t = Turn(0, spk, 0, dur, " ".join(x.text for x in toks), toks, conversation_id="c")
    from turnforge.turn_models import BackchannelEntry
    t.backchannels = [BackchannelEntry("x", "yeah", 0, 10, 0) for _ in range(bcs)]
    return t


def test_backchannel_stats_every_turn():
    s = backchannel_stats([_turn("A", 6, 1), _turn("B", 2, 1)])
    assert s.share_of_turns_with_bc == 1.0
    assert s.frequency_table == {"yeah": 2}


def test_backchannel_stats_participant_first():
    a = [_turn("A", 6, 1)] + [_turn("A", 6, 0) for _ in range(4)]  # 0.2
    b = [_turn("B", 3, 1), _turn("B", 3, 1)] + [_turn("B", 3, 0) for _ in range(3)]  # 0.4
    s = backchannel_stats(a + b[:1] + b[1:])
    assert s.share_of_turns_with_bc == pytest.approx(0.3)
    assert s.share_among_5plus_word_turns == pytest.approx(0.2)
    b_unequal = b + [_turn("B", 3, 1), _turn("B", 3, 1), _turn("B", 3, 0), _turn("B", 3, 0), _turn("B", 3, 0)]
    assert backchannel_stats(a + b_unequal).share_of_turns_with_bc == pytest.approx(0.3)


def test_backchannel_words_per_hour():
    s = backchannel_stats([_turn("A", 5, 2, dur=3_600_000)])
    assert s.bc_words_per_hour == pytest.approx(2.0)


def test_backchannel_stats_empty():
    with pytest.raises(EmptyInput):
        backchannel_stats([])


def test_intro_segmentation_is_fast():
    stream = read_transcripts(DATA / "intro_tokens.csv")[0]
    segment_cliffhanger(stream)
    best = min(_timed(lambda: (segment_audiophile(stream), segment_cliffhanger(stream))) for _ in range(20))
    assert best < 1e-3


def _timed(fn):
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


# ------------------------------------------------------------ properties

VOCAB = ["yeah", "mhm", "okay", "so", "i'm", "you", "table", "river", "Right.", "go?", "well", "nice!"]


@st.composite
def dyads(draw):
    tokens = []
    for spk in ("A", "B"):
        t = draw(st.integers(0, 200))
        for _ in range(draw(st.integers(1, 25))):
            dur = draw(st.integers(10, 300))
            tokens.append(Token("c1", spk, draw(st.sampled_from(VOCAB)), t, t + dur))
            t += dur + draw(st.integers(0, 600))
    return TranscriptStream.from_tokens(tokens, "c1")


def all_tokens(turns):
    c = Counter()
    for t in turns:
        c.update(t.tokens)
        for b in t.backchannels:
            c.update(b.tokens)
    return c


@settings(max_examples=300, deadline=None)
@given(dyads())
def test_token_conservation_all_models(s):
    for model in MODELS:
        assert all_tokens(segment(s, model)) == Counter(s.tokens), model


@settings(max_examples=200, deadline=None)
@given(dyads())
def test_audiophile_turn_count(s):
    alternations = sum(a.speaker_id != b.speaker_id for a, b in zip(s.tokens, s.tokens[1:]))
    assert len(segment_audiophile(s)) == 1 + alternations


@settings(max_examples=200, deadline=None)
@given(dyads())
def test_cliffhanger_turns_end_at_punctuation_or_stream_end(s):
    last = {t.speaker_id: t for t in s.tokens}
    for turn in segment_cliffhanger(s):
        end = turn.tokens[-1]
        assert ends_sentence(end.text) or end is last[turn.speaker_id]
        assert all(not ends_sentence(t.text) for t in turn.tokens[:-1])


@settings(max_examples=200, deadline=None)
@given(dyads())
def test_backbiter_registry_and_main_turns(s):
    turns = segment_backbiter(s)
    entries = [b for t in turns for b in t.backchannels]
    for t in turns:
        for b in t.backchannels:
            assert is_backchannel(words_of(b.text))
            if t.turn_id != PRE_JOIN_TURN_ID:
                assert b.listener_id != t.speaker_id
    qualifying = [c for c in segment_audiophile(s) if is_backchannel(words_of(c.text))]
    for t in main_turns(turns):
        if is_backchannel(words_of(t.text)):
            # kept only as the earlier of two overlapping back-channel candidates
            assert any(c.speaker_id != t.speaker_id and t.start_ms <= c.start_ms < t.stop_ms for c in qualifying)
    assert len(entries) <= len(qualifying)


@settings(max_examples=100, deadline=None)
@given(dyads())
def test_segmentation_is_deterministic(s):
    again = TranscriptStream.from_tokens(list(reversed(s.tokens)), "c1")
    for model in MODELS:
        assert turns_to_jsonl(segment(s, model), model) == turns_to_jsonl(segment(again, model), model)


def test_cue_lists_are_immutable():
    cues = default_cues()
    assert isinstance(cues, CueLists)
    with pytest.raises(AttributeError):
        cues.backchannel_cues.add("x")  # type: ignore[attr-defined]
