"""Turn-level and speaker-level features, plus the binning and winsorizing
helpers used by the group comparisons."""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientDistinctValuesWarning,
    NoTransitionsForSpeaker,
    ZeroDuration,
    ZeroNorm,
)
from .turn_models import PRE_JOIN_TURN_ID, Turn, words_of

FEATURE_NAMES = (
    "pause_s",
    "duration_s",
    "words_per_second",
    "backchannel_rate",
    "cosine_sim_prior",
    "euclid_dist_prior",
)
# features with a natural range are not winsorized
BOUNDED_FEATURES = frozenset({"cosine_sim_prior"})


@dataclass(frozen=True)
class TurnFeatures:
    conversation_id: str
    speaker_id: str
    turn_id: int
    pause_s: float | None
    duration_s: float
    words_per_second: float
    backchannel_rate: float
    cosine_sim_prior: float | None = None
    euclid_dist_prior: float | None = None


@dataclass(frozen=True)
class SpeakerIntervalSummary:
    speaker_id: str
    mean_interval_s: float
    median_interval_s: float
    interval_type: Literal["Gapper", "Overlapper"]
    n_intervals: int


@dataclass(frozen=True)
class DecileBinning:
    boundaries: np.ndarray  # 9 ascending cut points
    assignments: np.ndarray  # bin index in 1..10 per value
    weights: np.ndarray

    def bin_masses(self) -> np.ndarray:
        """Share of total weight per bin, bins 1..10."""
        w = self.weights / self.weights.sum()
        return np.bincount(self.assignments - 1, weights=w, minlength=10)


def embedding_distance(
    v1: Sequence[float], v2: Sequence[float], metric: Literal["cosine", "euclidean"] = "cosine"
) -> float:
    a = np.asarray(v1, dtype=float)
    b = np.asarray(v2, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    metric = metric.lower()
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ZeroNorm("cosine similarity undefined for a zero vector")
        return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    raise ValueError(f"unknown metric {metric!r}")


def turn_features(
    turns: Sequence[Turn],
    embeddings: Mapping[int, Sequence[float]] | None = None,
    bc_unit: Literal["events", "words"] = "events",
) -> list[TurnFeatures]:
    """Compute per-turn transcript features for one conversation.

    ``pause_s`` is the current start minus the previous turn's stop, so it is
    negative when the turn starts in overlap; the first turn has none.
    Similarity fields compare against the previous turn's embedding and are
    left empty when either vector is missing.
    """
    out: list[TurnFeatures] = []
    prev: Turn | None = None
    for t in turns:
        if t.turn_id == PRE_JOIN_TURN_ID:
            continue
        if t.stop_ms == t.start_ms:
            raise ZeroDuration(t.turn_id)
        duration = (t.stop_ms - t.start_ms) / 1000.0
        if bc_unit == "words":
            n_bc = sum(len(words_of(b.text)) for b in t.backchannels)
        else:
            n_bc = len(t.backchannels)
        cos = euc = None
        if embeddings is not None and prev is not None:
            cur_v = embeddings.get(t.turn_id)
            prev_v = embeddings.get(prev.turn_id)
            if cur_v is not None and prev_v is not None:
                cos = embedding_distance(cur_v, prev_v, "cosine")
                euc = embedding_distance(cur_v, prev_v, "euclidean")
        out.append(
            TurnFeatures(
                conversation_id=t.conversation_id,
                speaker_id=t.speaker_id,
                turn_id=t.turn_id,
                pause_s=None if prev is None else (t.start_ms - prev.stop_ms) / 1000.0,
                duration_s=duration,
                words_per_second=t.word_count / duration,
                backchannel_rate=n_bc / duration,
                cosine_sim_prior=cos,
                euclid_dist_prior=euc,
            )
        )
        prev = t
    return out


def speaker_interval_summary(turns: Sequence[Turn], speaker: str) -> SpeakerIntervalSummary:
    """Summarize how ``speaker`` takes the floor from their partner.

    Intervals are the speaker's turn starts minus the stop of the partner
    turn immediately before. A non-negative mean makes a Gapper.
    """
    intervals = []
    ordered = [t for t in turns if t.turn_id != PRE_JOIN_TURN_ID]
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.speaker_id == speaker and prev.speaker_id != speaker:
            intervals.append((cur.start_ms - prev.stop_ms) / 1000.0)
    if not intervals:
        raise NoTransitionsForSpeaker(speaker)
    mean = float(np.mean(intervals))
    return SpeakerIntervalSummary(
        speaker_id=speaker,
        mean_interval_s=mean,
        median_interval_s=float(np.median(intervals)),
        interval_type="Gapper" if mean >= 0 else "Overlapper",
        n_intervals=len(intervals),
    )


def _ngrams(words: list[str], n: int) -> Iterable[str]:
    return (" ".join(words[i : i + n]) for i in range(len(words) - n + 1))


def topic_frequency(
    turns: Iterable[Turn],
    dictionary: Mapping[str, Sequence[str]],
    window_ms: int | None = None,
    substring: bool = False,
) -> dict[int, dict[str, int]]:
    """Keyword hits per topic, bucketed by turn start time.

    Matching is whole-word on normalized words by default; multi-word
    keywords match consecutive words. ``substring`` switches to raw
    case-insensitive substring counting. Buckets are keyed by their start
    (``start_ms // window_ms * window_ms``), or 0 when ``window_ms`` is None.
    """
    keys = {topic: [k.lower() for k in kws] for topic, kws in dictionary.items()}
    out: dict[int, dict[str, int]] = defaultdict(lambda: {topic: 0 for topic in keys})
    for t in turns:
        if t.turn_id == PRE_JOIN_TURN_ID:
            continue
        bucket = 0 if not window_ms else (t.start_ms // window_ms) * window_ms
        counts = out[bucket]
        if substring:
            low = t.text.lower()
            for topic, kws in keys.items():
                counts[topic] += sum(low.count(k) for k in kws)
            continue
        words = words_of(t.text)
        grams: dict[int, Counter[str]] = {}
        for topic, kws in keys.items():
            for k in kws:
                n = len(k.split())
                if n not in grams:
                    grams[n] = Counter(_ngrams(words, n))
                counts[topic] += grams[n][" ".join(k.split())]
    return {b: dict(c) for b, c in sorted(out.items())}


def winsorize(values: Sequence[float], level: float = 0.95) -> np.ndarray:
    """Clamp values to the central ``level`` mass of their distribution.

    Bounds are nearest-rank order statistics at ``(1 - level) / 2`` and
    ``1 - (1 - level) / 2``, which makes the operation idempotent.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("winsorize needs at least one value")
    tail = (1 - level) / 2
    lo, hi = np.percentile(arr, [100 * tail, 100 * (1 - tail)], method="nearest")
    return np.clip(arr, lo, hi)


def weighted_quantile_cuts(values: np.ndarray, weights: np.ndarray, probs: Sequence[float]) -> np.ndarray:
    """Smallest value whose weighted CDF strictly exceeds each probability."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cdf = np.cumsum(weights[order])
    cdf /= cdf[-1]
    # tolerance absorbs float error in the cumulative sum
    idx = np.searchsorted(cdf, np.asarray(probs) + 1e-10, side="right")
    return v[np.minimum(idx, v.size - 1)]


def decile_bin(values: Sequence[float], weights: Sequence[float] | None = None) -> DecileBinning:
    """Cut values into weighted deciles.

    Bin ``i`` holds values in ``[b[i-1], b[i])`` so each value maps to one
    bin and tied values always share it. With fewer than ten distinct
    values some bins stay empty and a warning is emitted.
    """
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if v.shape != w.shape:
        raise ValueError("values and weights differ in length")
    if v.size == 0:
        raise ValueError("decile_bin needs at least one value")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if np.unique(v).size < 10:
        warnings.warn(
            f"only {np.unique(v).size} distinct values; decile bins are merged",
            InsufficientDistinctValuesWarning,
            stacklevel=2,
        )
    cuts = weighted_quantile_cuts(v, w, [j / 10 for j in range(1, 10)])
    assignments = np.searchsorted(cuts, v, side="right") + 1
    return DecileBinning(boundaries=cuts, assignments=assignments.astype(np.int64), weights=w)


def assign_bins(values: Sequence[float], boundaries: np.ndarray) -> np.ndarray:
    return np.searchsorted(boundaries, np.asarray(values, dtype=float), side="right") + 1


def conversation_weights(rows: Iterable[tuple[Hashable, Hashable]]) -> list[float]:
    """Weight each row by one over its (conversation, speaker) row count."""
    rows = list(rows)
    counts = Counter(rows)
    return [1.0 / counts[r] for r in rows]


def features_as_rows(features: Iterable[TurnFeatures]) -> list[dict]:
    return [
        {
            "conversation_id": f.conversation_id,
            "speaker_id": f.speaker_id,
            "turn_id": f.turn_id,
            **{name: getattr(f, name) for name in FEATURE_NAMES},
        }
        for f in features
    ]


def is_missing(x: float | None) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))
