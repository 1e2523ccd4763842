"""Synthetic dyadic transcripts with known ground truth.

Randomness comes from numpy's PCG64 bit generator seeded with the
configured integer, so a seed reproduces the same bytes on any platform.
Truncated normals are drawn by rejection (up to 100 tries), then clamped
at the lower bound.

Timing is built so that the state machine sees exactly one Gap or Overlap
per planted transition and exactly one WSO per planted listener utterance:

* a turn that starts in overlap never starts before its partner's last
  word began (the partner's final word starts earlier when needed), so the
  word streams do not interleave;
* pauses and overlaps never change a turn's planned duration, so its
  realized rate is its word count over that duration;
* a speaker's consecutive turns are separated by at least 30 ms, so they
  never join and the partner always holds the floor alone in between;
* listener utterances sit strictly inside a single partner word, at least
  100 ms from any other listener turn, so no partner token starts while
  they are spoken and they stay one Audiophile candidate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidConfig
from .transcript_io import Token, TranscriptStream
from .turn_models import default_cues

FILLER_WORDS = (
    "table", "river", "garden", "purple", "window", "travel", "music", "coffee",
    "mountain", "yellow", "summer", "pencil", "rocket", "silver", "forest", "ocean",
    "bridge", "candle", "planet", "market", "winter", "basket", "guitar", "lemon",
)
SPEAKER_SLOTS = ("A", "B")
# per-speaker deltas a group effect may shift
EFFECT_PARAMS = ("words_per_second", "turn_mean_s", "interval_mean_ms", "backchannel_probability")
_MARGIN_MS = 100
_SAME_SPEAKER_SEP_MS = 30
_LISTENER_WORD_MS = 100
_HOST_PAD_MS = 30


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_turns: int = 60
    signed_interval_distribution: tuple[float, float] = (80.0, 500.0)
    # (gap_share, gap_median_ms, gap_log_sd, overlap_median_ms, overlap_log_sd);
    # when set, gaps and overlaps are lognormal magnitudes instead of one normal
    signed_interval_mixture: tuple[float, float, float, float, float] | None = None
    turn_duration_distribution: tuple[float, float, float] = (3.0, 2.0, 0.6)
    words_per_second: float = 3.0
    speaker_wps_sd: float = 0.0
    backchannel_probability_per_turn: float = 0.3
    backchannel_vocab: tuple[str, ...] = ()
    backchannel_max_words: int = 2
    terminal_punctuation_probability: float = 0.05
    interjection_probability: float = 0.0
    pause_probability: float = 0.02
    pause_range_ms: tuple[int, int] = (100, 600)
    topic_plants: tuple[tuple[int, str], ...] = ()
    speaker_effects: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    conversation_id: str = "synth-0000"
    speaker_ids: tuple[str, str] = ("A", "B")
    grid_ms: int = 10

    def validate(self) -> None:
        mean_s, sd_s, min_s = self.turn_duration_distribution
        if min_s <= 0:
            raise InvalidConfig("minimum turn duration must be positive")
        if sd_s < 0 or self.signed_interval_distribution[1] < 0 or self.speaker_wps_sd < 0:
            raise InvalidConfig("standard deviations must be non-negative")
        for name in ("backchannel_probability_per_turn", "terminal_punctuation_probability",
                     "interjection_probability", "pause_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if self.n_turns < 1:
            raise InvalidConfig("n_turns must be at least 1")
        if self.words_per_second <= 0:
            raise InvalidConfig("words_per_second must be positive")
        if not 1 <= self.backchannel_max_words <= 3:
            raise InvalidConfig("backchannel_max_words must be 1..3")
        if self.grid_ms <= 0 or any(
            v % self.grid_ms for v in (_MARGIN_MS, _SAME_SPEAKER_SEP_MS, _LISTENER_WORD_MS, _HOST_PAD_MS)
        ):
            raise InvalidConfig("grid_ms must divide 10 ms")
        if len(set(self.speaker_ids)) != 2:
            raise InvalidConfig("need two distinct speaker ids")
        lo, hi = self.pause_range_ms
        if lo <= 20 or hi < lo:
            raise InvalidConfig("pause_range_ms must exceed the 20 ms join gap")
        if self.signed_interval_mixture is not None:
            share, gap_med, gap_sd, ov_med, ov_sd = self.signed_interval_mixture
            if not 0.0 <= share <= 1.0 or gap_med <= 0 or ov_med <= 0 or gap_sd < 0 or ov_sd < 0:
                raise InvalidConfig("signed_interval_mixture needs a share in [0, 1], positive medians, sds >= 0")
        unknown = set(self.speaker_effects) - set(SPEAKER_SLOTS)
        if unknown:
            raise InvalidConfig(f"speaker_effects keys must be slots {SPEAKER_SLOTS}, got {sorted(unknown)}")
        for eff in self.speaker_effects.values():
            bad = set(eff) - set(EFFECT_PARAMS)
            if bad:
                raise InvalidConfig(f"unknown effect parameters {sorted(bad)}; expected {EFFECT_PARAMS}")
        for n, phrase in self.topic_plants:
            if not 0 <= n < self.n_turns or not phrase.split():
                raise InvalidConfig(f"bad topic plant {(n, phrase)!r}")


@dataclass
class GroundTruth:
    conversation_id: str
    speakers: dict[str, str]  # slot -> speaker id
    words_per_second: dict[str, float]  # speaker id -> realized rate parameter
    turns: list[dict]
    signed_intervals: list[int]
    backchannels: list[dict]
    interjections: list[dict]
    topic_counts: dict[str, int]
    speaker_groups: dict[str, str] = field(default_factory=dict)
    planted_effects: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class _Rng:
    def __init__(self, seed: int) -> None:
        self.gen = np.random.Generator(np.random.PCG64(seed))

    def truncnorm(self, mean: float, sd: float, lower: float) -> float:
        if sd == 0:
            return max(mean, lower)
        for _ in range(100):
            x = float(self.gen.normal(mean, sd))
            if x >= lower:
                return x
        return lower

    def uniform(self) -> float:
        return float(self.gen.random())

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        return int(self.gen.integers(lo, hi + 1))

    def choice(self, items: Sequence):
        return items[int(self.gen.integers(0, len(items)))]


def _q(x: float, grid: int) -> int:
    return int(round(x / grid)) * grid


@dataclass
class _TurnPlan:
    slot: str
    words: list[str]
    # word boundaries relative to turn start: (start, stop) per word
    spans: list[tuple[int, int]]
    start: int = 0
    # interjection words and the index of the word stretched to host them
    interjection: list[str] | None = None
    host_index: int | None = None

    @property
    def rel_stop(self) -> int:
        return self.spans[-1][1]

    def segments(self) -> list[tuple[int, int]]:
        """Absolute contiguous speech stretches."""
        segs = []
        s0, e0 = self.spans[0]
        for s, e in self.spans[1:]:
            if s > e0:
                segs.append((s0, e0))
                s0 = s
            e0 = e
        segs.append((s0, e0))
        return [(self.start + a, self.start + b) for a, b in segs]

    @property
    def stop(self) -> int:
        return self.start + self.rel_stop


def _pull_last_word(plan: _TurnPlan, new_start: int, grid: int) -> None:
    """Start the final word at ``new_start``, shortening the words before it."""
    spans = plan.spans
    spans[-1] = (new_start, spans[-1][1])
    k = len(spans) - 2
    while k >= 0 and spans[k][1] > spans[k + 1][0]:
        a = min(spans[k][0], spans[k + 1][0] - grid)
        spans[k] = (a, spans[k + 1][0])
        k -= 1


def _draw_interval(cfg: SynthConfig, rng: _Rng) -> float:
    if cfg.signed_interval_mixture is None:
        mean_ms, sd_ms = cfg.signed_interval_distribution
        return float(rng.gen.normal(mean_ms, sd_ms))
    share, gap_med, gap_sd, ov_med, ov_sd = cfg.signed_interval_mixture
    if rng.uniform() < share:
        return gap_med * math.exp(gap_sd * float(rng.gen.standard_normal()))
    return -ov_med * math.exp(ov_sd * float(rng.gen.standard_normal()))


def _host_need(n_words: int) -> int:
    return n_words * _LISTENER_WORD_MS + 2 * _HOST_PAD_MS


def _plan_turn(
    cfg: SynthConfig, rng: _Rng, slot: str, wps: float, plant: list[str] | None, mean_shift_s: float = 0.0
) -> _TurnPlan:
    g = cfg.grid_ms
    mean_s, sd_s, min_s = cfg.turn_duration_distribution
    mean_s += mean_shift_s
    dur_ms = max(_q(rng.truncnorm(mean_s, sd_s, min_s) * 1000, g), g)
    # stochastic rounding keeps the expected word count at duration * rate
    expected = dur_ms / 1000 * wps
    n_words = int(expected) + (rng.uniform() < expected - int(expected))
    n_words = max(1, n_words)
    n_words = min(n_words, dur_ms // g)
    if plant:
        n_words = max(n_words, len(plant))
        dur_ms = max(dur_ms, n_words * g)
    # pauses come out of the turn's duration so the realized rate is n_words / duration
    pauses = [0] * n_words
    for k in range(1, n_words):
        if rng.uniform() < cfg.pause_probability:
            lo, hi = cfg.pause_range_ms
            pauses[k] = _q(rng.integers(lo, hi), g) or g
    speech = dur_ms - sum(pauses)
    if speech < n_words * g:
        pauses = [0] * n_words
        speech = dur_ms
    bounds = [_q(k * speech / n_words, g) for k in range(n_words + 1)]
    spans = []
    shift = 0
    for k in range(n_words):
        shift += pauses[k]
        spans.append((bounds[k] + shift, bounds[k + 1] + shift))

    words = [rng.choice(FILLER_WORDS) for _ in range(n_words)]
    if plant:
        pos = rng.integers(0, n_words - len(plant))
        words[pos : pos + len(plant)] = plant
    for k in range(n_words - 1):
        if rng.uniform() < cfg.terminal_punctuation_probability:
            words[k] += "."
    words[-1] += "?" if rng.uniform() < 0.2 else "."
    words[0] = words[0].capitalize()
    plan = _TurnPlan(slot, words, spans)
    if n_words >= 3 and rng.uniform() < cfg.interjection_probability:
        inter = [rng.choice(FILLER_WORDS) for _ in range(rng.integers(4, 6))]
        k = n_words // 2
        a, b = spans[k]
        extra = max(0, a + _host_need(len(inter)) - b)
        plan.spans = spans[:k] + [(a, b + extra)] + [(x + extra, y + extra) for x, y in spans[k + 1:]]
        plan.interjection = inter
        plan.host_index = k
    return plan


def _slot_in_word(span: tuple[int, int], n_words: int, rng: _Rng, grid: int) -> int:
    a, b = span
    lo = a + _HOST_PAD_MS
    hi = b - _HOST_PAD_MS - n_words * _LISTENER_WORD_MS
    return lo + rng.integers(0, (hi - lo) // grid) * grid


def _can_host(plan: _TurnPlan, k: int, lo_limit: int, hi_limit: int) -> bool:
    # the next partner word must start before the listener's next turn,
    # otherwise the utterance would run into that turn
    if k + 1 >= len(plan.spans) or plan.start + plan.spans[k + 1][0] >= hi_limit:
        return False
    a, b = plan.spans[k]
    return plan.start + a >= lo_limit + _MARGIN_MS and plan.start + b <= hi_limit - _MARGIN_MS


def _host_words(plan: _TurnPlan, lo_limit: int, hi_limit: int, n_words: int) -> list[int]:
    """Indices of words long enough to host ``n_words`` away from listener turns."""
    need = _host_need(n_words)
    return [
        k for k, (a, b) in enumerate(plan.spans)
        if k != plan.host_index and b - a >= need and _can_host(plan, k, lo_limit, hi_limit)
    ]


def generate_conversation(config: SynthConfig) -> tuple[TranscriptStream, GroundTruth]:
    """Generate one conversation and the parameters it realizes."""
    config.validate()
    cfg = config
    rng = _Rng(cfg.seed)
    g = cfg.grid_ms
    ids = dict(zip(SPEAKER_SLOTS, cfg.speaker_ids))
    vocab = cfg.backchannel_vocab or tuple(sorted(default_cues().backchannel_cues))

    wps: dict[str, float] = {}
    for slot in SPEAKER_SLOTS:
        eff = cfg.speaker_effects.get(slot, {})
        rate = cfg.words_per_second + eff.get("words_per_second", 0.0)
        if cfg.speaker_wps_sd > 0:
            rate += float(rng.gen.normal(0.0, cfg.speaker_wps_sd))
        wps[slot] = max(rate, 0.5)

    plants: dict[int, list[str]] = {}
    for n, phrase in cfg.topic_plants:
        plants.setdefault(n, []).extend(phrase.split())

    plans: list[_TurnPlan] = []
    intervals: list[int] = []
    for i in range(cfg.n_turns):
        slot = SPEAKER_SLOTS[i % 2]
        eff = cfg.speaker_effects.get(slot, {})
        plan = _plan_turn(cfg, rng, slot, wps[slot], plants.get(i), eff.get("turn_mean_s", 0.0))
        if not plans:
            plan.start = 0
            plans.append(plan)
            continue
        prev = plans[-1]
        o = _q(_draw_interval(cfg, rng) + eff.get("interval_mean_ms", 0.0), g)
        # the partner must hold the floor alone for 30 ms before this turn
        seg_start = prev.segments()[-1][0]
        floor_from = seg_start
        if len(plans) >= 2:
            floor_from = max(floor_from, plans[-2].stop)
        o = max(o, floor_from + _SAME_SPEAKER_SEP_MS - prev.stop)
        # the partner's final word must begin before this turn, leaving each
        # earlier word of that stretch at least one grid step
        n_last = sum(1 for a, _ in prev.spans if prev.start + a >= seg_start)
        o = max(o, seg_start + n_last * g - prev.stop)
        # overlap must end inside this turn's first stretch of speech
        first_seg = plan.segments()[0]
        o = max(o, -(first_seg[1] - first_seg[0] - g))
        if o == 0:
            o = g
        if o < 0 and prev.rel_stop + o - g < prev.spans[-1][0]:
            _pull_last_word(prev, prev.rel_stop + o - g, g)
        plan.start = prev.stop + o
        intervals.append(o)
        plans.append(plan)

    tokens: list[Token] = []
    turns_truth: list[dict] = []
    for i, plan in enumerate(plans):
        spk = ids[plan.slot]
        for word, (a, b) in zip(plan.words, plan.spans):
            tokens.append(Token(cfg.conversation_id, spk, word, plan.start + a, plan.start + b))
        turns_truth.append({
            "index": i,
            "speaker_id": spk,
            "start_ms": plan.start,
            "stop_ms": plan.stop,
            "n_words": len(plan.words),
            "text": " ".join(plan.words),
        })

    backchannels: list[dict] = []
    interjections: list[dict] = []
    for i, plan in enumerate(plans):
        listener_slot = SPEAKER_SLOTS[(i + 1) % 2]
        listener = ids[listener_slot]
        bc_prob = cfg.backchannel_probability_per_turn
        bc_prob += cfg.speaker_effects.get(listener_slot, {}).get("backchannel_probability", 0.0)
        lo_limit = plans[i - 1].stop if i >= 1 else -10**9
        hi_limit = plans[i + 1].start if i + 1 < len(plans) else 10**12
        placed: list[tuple[list[str], int, list[dict]]] = []
        if plan.interjection:
            if _can_host(plan, plan.host_index, lo_limit, hi_limit):
                a, b = plan.spans[plan.host_index]
                span = (plan.start + a, plan.start + b)
                placed.append((plan.interjection, _slot_in_word(span, len(plan.interjection), rng, g), interjections))
        if rng.uniform() < min(max(bc_prob, 0.0), 1.0):
            words = [rng.choice(vocab) for _ in range(rng.integers(1, cfg.backchannel_max_words))]
            hosts = _host_words(plan, lo_limit, hi_limit, len(words))
            if hosts:
                a, b = plan.spans[rng.choice(hosts)]
                placed.append((words, _slot_in_word((plan.start + a, plan.start + b), len(words), rng, g), backchannels))
        for words, start, sink in placed:
            words = list(words)
            words[-1] += "."
            for k, w in enumerate(words):
                tokens.append(Token(cfg.conversation_id, listener, w,
                                    start + k * _LISTENER_WORD_MS, start + (k + 1) * _LISTENER_WORD_MS))
            sink.append({"turn_index": i, "listener_id": listener, "start_ms": start,
                         "stop_ms": start + len(words) * _LISTENER_WORD_MS, "text": " ".join(words)})
    backchannels.sort(key=lambda e: e["start_ms"])
    interjections.sort(key=lambda e: e["start_ms"])

    topic_counts: dict[str, int] = {}
    for _, phrase in cfg.topic_plants:
        key = " ".join(phrase.lower().split())
        topic_counts[key] = topic_counts.get(key, 0) + 1

    stream = TranscriptStream.from_tokens(tokens, cfg.conversation_id)
    truth = GroundTruth(
        conversation_id=cfg.conversation_id,
        speakers=ids,
        words_per_second={ids[s]: wps[s] for s in SPEAKER_SLOTS},
        turns=turns_truth,
        signed_intervals=intervals,
        backchannels=backchannels,
        interjections=interjections,
        topic_counts=topic_counts,
        planted_effects={ids[s]: dict(e) for s, e in cfg.speaker_effects.items()},
    )
    return stream, truth


@dataclass
class SynthCorpus:
    streams: list[TranscriptStream]
    truths: list[GroundTruth]
    speaker_groups: dict[tuple[str, str], str]

    def grouping_rows(self) -> list[dict]:
        return [
            {"conversation_id": c, "speaker_id": s, "group": g}
            for (c, s), g in sorted(self.speaker_groups.items())
        ]


def conversation_seeds(seed: int, n: int) -> list[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n)]


def generate_corpus(
    template: SynthConfig,
    n_conversations: int,
    group_effects: Mapping[str, Mapping[str, float]] | None = None,
    groups: Sequence[str] | None = None,
) -> SynthCorpus:
    """Generate independent conversations with per-speaker group labels.

    Each speaker is assigned uniformly at random to one of ``groups``
    (default: the keys of ``group_effects``); that group's parameter deltas
    are added to the speaker's configuration. Speaker ids are
    ``<conversation_id>-A`` and ``<conversation_id>-B``.
    """
    if n_conversations < 1:
        raise InvalidConfig("n_conversations must be at least 1")
    group_effects = dict(group_effects or {})
    labels = list(groups) if groups else sorted(group_effects)
    seeds = conversation_seeds(template.seed, n_conversations)
    assign_rng = _Rng(seeds[0] ^ 0x5EED)
    streams, truths = [], []
    speaker_groups: dict[tuple[str, str], str] = {}
    for i, seed in enumerate(seeds):
        cid = f"synth-{i:04d}"
        sids = (f"{cid}-A", f"{cid}-B")
        effects = {}
        slot_groups = {}
        if labels:
            for slot in SPEAKER_SLOTS:
                label = assign_rng.choice(labels)
                slot_groups[slot] = label
                if group_effects.get(label):
                    effects[slot] = dict(group_effects[label])
        cfg = replace(template, seed=seed, conversation_id=cid, speaker_ids=sids, speaker_effects=effects)
        stream, truth = generate_conversation(cfg)
        truth.speaker_groups = {dict(zip(SPEAKER_SLOTS, sids))[s]: lab for s, lab in slot_groups.items()}
        for sid, lab in truth.speaker_groups.items():
            speaker_groups[(cid, sid)] = lab
        streams.append(stream)
        truths.append(truth)
    return SynthCorpus(streams, truths, speaker_groups)
