"""Communication-state time series and silence/overlap classification.

The series records, for every ``grid_ms`` frame, which of the two speakers
is vocalizing. Maximal runs of joint silence and joint speech are then
labelled Gap, Pause, Overlap or WSO according to the single-speaker frames
that bound them.
"""

from __future__ import annotations

import math
import statistics
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateDistributionWarning, EmptyTranscript, NoTransitions
from .transcript_io import Utterance


class IntervalKind(str, Enum):
    GAP = "Gap"
    PAUSE = "Pause"
    OVERLAP = "Overlap"
    WSO = "WSO"
    UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class StateSeries:
    conversation_id: str
    grid_ms: int
    t0: int
    speakers: tuple[str, str]
    frames: np.ndarray  # bool, shape (n_frames, 2)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def t1(self) -> int:
        return self.t0 + self.n_frames * self.grid_ms

    def frame_time(self, i: int) -> int:
        return self.t0 + i * self.grid_ms

    def codes(self) -> np.ndarray:
        """0 = silence, 1 = first speaker only, 2 = second only, 3 = both."""
        return self.frames[:, 0].astype(np.int8) + 2 * self.frames[:, 1].astype(np.int8)


@dataclass(frozen=True, slots=True)
class IntervalEvent:
    kind: IntervalKind
    start_ms: int
    stop_ms: int
    duration_ms: int
    holder_before: str | None
    holder_after: str | None
    conversation_id: str = ""


@dataclass(frozen=True, slots=True)
class SignedTransition:
    from_speaker: str
    to_speaker: str
    signed_interval_ms: int
    start_ms: int = 0
    conversation_id: str = ""


@dataclass(frozen=True)
class IntervalSummary:
    median_gap_ms: float | None
    median_overlap_ms: float | None
    median_signed_transition_ms: float
    gap_share: float
    overlap_share: float
    n_gap: int
    n_overlap: int
    n_pause: int
    n_wso: int
    n_unclassified: int
    n_removed: int
    median_pause_ms: float | None = None
    median_wso_ms: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def build_state_series(
    utterances: Sequence[Utterance],
    grid_ms: int = 10,
    speakers: Sequence[str] | None = None,
    conversation_id: str = "",
) -> StateSeries:
    """Sample who is vocalizing on a ``grid_ms`` grid.

    Frame ``i`` sits at ``t0 + i * grid_ms`` and marks speaker ``s`` when some
    utterance of ``s`` satisfies ``start_ms <= t < stop_ms``.
    """
    if not utterances:
        raise EmptyTranscript("no utterances to sample")
    if grid_ms <= 0:
        raise ValueError("grid_ms must be positive")
    if speakers is None:
        order: dict[str, None] = {}
        for u in sorted(utterances, key=lambda u: (u.start_ms, u.speaker_id)):
            order.setdefault(u.speaker_id, None)
        speakers = tuple(order)
    speakers = tuple(speakers)
    if len(speakers) == 1:
        # keep a two-column layout so codes() stays well defined
        speakers = (speakers[0], "")
    if len(speakers) != 2:
        raise ValueError(f"state series needs 2 speakers, got {len(speakers)}")
    col = {s: i for i, s in enumerate(speakers)}

    t0 = (min(u.start_ms for u in utterances) // grid_ms) * grid_ms
    t1 = max(u.stop_ms for u in utterances)
    n = max(_ceil_div(t1 - t0, grid_ms), 0)

    # difference-array marking; +1 at the first covered frame, -1 past the last
    diff = np.zeros((n + 1, 2), dtype=np.int32)
    for u in utterances:
        lo = _ceil_div(u.start_ms - t0, grid_ms)
        hi = _ceil_div(u.stop_ms - t0, grid_ms)
        if hi > lo:
            c = col[u.speaker_id]
            diff[lo, c] += 1
            diff[hi, c] -= 1
    frames = np.cumsum(diff[:n], axis=0) > 0
    return StateSeries(conversation_id, grid_ms, t0, speakers, frames)


def _runs(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (starts, stops, values) of maximal constant runs."""
    n = codes.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    change = np.flatnonzero(codes[1:] != codes[:-1]) + 1
    starts = np.concatenate(([0], change))
    stops = np.concatenate((change, [n]))
    return starts, stops, codes[starts]


def classify_intervals(series: StateSeries) -> list[IntervalEvent]:
    """Label every interior silence run and every joint-speech run.

    Holders are the speakers of the nearest single-speaker frames on each
    side of the run. Leading and trailing silence is not reported; a run
    lacking a single-speaker frame on either side is ``Unclassified``.
    """
    codes = series.codes()
    n = codes.shape[0]
    if n == 0:
        return []
    idx = np.arange(n)
    single = (codes == 1) | (codes == 2)
    prev_single = np.maximum.accumulate(np.where(single, idx, -1))
    next_single = np.minimum.accumulate(np.where(single, idx, n)[::-1])[::-1]

    spk = series.speakers
    g = series.grid_ms
    events: list[IntervalEvent] = []
    starts, stops, values = _runs(codes)
    for a, b, v in zip(starts.tolist(), stops.tolist(), values.tolist()):
        if v in (1, 2):
            continue
        if v == 0 and (a == 0 or b == n):
            continue
        before = int(prev_single[a - 1]) if a > 0 else -1
        after = int(next_single[b]) if b < n else n
        start_ms = series.t0 + a * g
        stop_ms = series.t0 + b * g
        if before < 0 or after >= n:
            kind = IntervalKind.UNCLASSIFIED
            hb = spk[codes[before] - 1] if before >= 0 else None
            ha = spk[codes[after] - 1] if after < n else None
        else:
            hb = spk[codes[before] - 1]
            ha = spk[codes[after] - 1]
            same = hb == ha
            if v == 0:
                kind = IntervalKind.PAUSE if same else IntervalKind.GAP
            else:
                kind = IntervalKind.WSO if same else IntervalKind.OVERLAP
        events.append(
            IntervalEvent(kind, start_ms, stop_ms, stop_ms - start_ms, hb, ha, series.conversation_id)
        )
    return events


def signed_transitions(events: Iterable[IntervalEvent]) -> list[SignedTransition]:
    """Between-speaker intervals: gaps positive, overlaps negative."""
    out = []
    for e in events:
        if e.kind is IntervalKind.GAP:
            value = e.duration_ms
        elif e.kind is IntervalKind.OVERLAP:
            value = -e.duration_ms
        else:
            continue
        out.append(SignedTransition(e.holder_before, e.holder_after, value, e.start_ms, e.conversation_id))
    return out


def _outlier_mask(values: Sequence[float], k: float, lower_bounded: bool) -> np.ndarray | None:
    """Boolean keep-mask, or None when the distribution is degenerate."""
    arr = np.asarray(values, dtype=float)
    if math.isinf(k):
        return np.ones(arr.shape, dtype=bool)
    if arr.size < 2:
        return None
    mu = float(arr.mean())
    sd = float(arr.std(ddof=1))
    if sd == 0.0:
        return None
    if lower_bounded:
        return arr <= mu + k * sd
    return np.abs(arr - mu) <= k * sd


def filter_outliers(values: Sequence[float], k: float = 3.0, lower_bounded: bool = False) -> list[float]:
    """Drop values more than ``k`` standard deviations from the mean.

    One pass: the mean and sample SD are computed once on the full input.
    With ``lower_bounded`` only the upper tail is trimmed, for quantities
    that cannot go below zero. A zero SD leaves the input untouched and
    emits ``DegenerateDistributionWarning``.
    """
    values = list(values)
    if not values:
        raise ValueError("filter_outliers needs at least one value")
    mask = _outlier_mask(values, k, lower_bounded)
    if mask is None:
        if k > 0:
            warnings.warn("zero or undefined standard deviation; nothing filtered",
                          DegenerateDistributionWarning, stacklevel=2)
        return values
    return [v for v, kept in zip(values, mask.tolist()) if kept]


def _median(values: Sequence[float]) -> float | None:
    return float(statistics.median(values)) if values else None


def _filtered(items: list, values: list[float], k: float, lower_bounded: bool) -> list:
    if not values:
        return []
    mask = _outlier_mask(values, k, lower_bounded)
    if mask is None:
        return list(items)
    return [item for item, kept in zip(items, mask.tolist()) if kept]


def interval_summary(
    events: Sequence[IntervalEvent],
    filter_k: float = 3.0,
    per_speaker_first: bool = False,
) -> IntervalSummary:
    """Corpus medians and gap/overlap shares after outlier removal.

    Gaps and overlaps are filtered together as one signed distribution;
    pauses and WSOs are filtered on their upper tail only.
    By default statistics pool all transitions. With ``per_speaker_first``
    they are computed per (conversation, incoming speaker) and then averaged.
    """
    transitions = signed_transitions(events)
    kept = _filtered(transitions, [t.signed_interval_ms for t in transitions], filter_k, False)
    if not kept:
        raise NoTransitions("no gaps or overlaps to summarize")
    pause_raw = [e.duration_ms for e in events if e.kind is IntervalKind.PAUSE]
    wso_raw = [e.duration_ms for e in events if e.kind is IntervalKind.WSO]
    pauses = _filtered(pause_raw, pause_raw, filter_k, True)
    wsos = _filtered(wso_raw, wso_raw, filter_k, True)
    n_unclassified = sum(1 for e in events if e.kind is IntervalKind.UNCLASSIFIED)
    n_removed = (len(transitions) - len(kept)) + (len(pause_raw) - len(pauses)) + (len(wso_raw) - len(wsos))

    gaps = [t.signed_interval_ms for t in kept if t.signed_interval_ms > 0]
    overlaps = [t.signed_interval_ms for t in kept if t.signed_interval_ms < 0]

    if per_speaker_first:
        groups: dict[tuple[str, str], list[int]] = defaultdict(list)
        for t in kept:
            groups[(t.conversation_id, t.to_speaker)].append(t.signed_interval_ms)
        med_signed, med_gap, med_overlap, shares = [], [], [], []
        for key in sorted(groups):
            vals = groups[key]
            g = [v for v in vals if v > 0]
            o = [v for v in vals if v < 0]
            med_signed.append(statistics.median(vals))
            if g:
                med_gap.append(statistics.median(g))
            if o:
                med_overlap.append(statistics.median(o))
            shares.append(len(g) / len(vals))
        gap_share = float(np.mean(shares))
        median_signed = float(np.mean(med_signed))
        median_gap = float(np.mean(med_gap)) if med_gap else None
        median_overlap = float(np.mean(med_overlap)) if med_overlap else None
    else:
        gap_share = len(gaps) / len(kept)
        median_signed = float(statistics.median(t.signed_interval_ms for t in kept))
        median_gap = _median(gaps)
        median_overlap = _median(overlaps)

    return IntervalSummary(
        median_gap_ms=median_gap,
        median_overlap_ms=median_overlap,
        median_signed_transition_ms=median_signed,
        gap_share=gap_share,
        overlap_share=1.0 - gap_share,
        n_gap=len(gaps),
        n_overlap=len(overlaps),
        n_pause=len(pauses),
        n_wso=len(wsos),
        n_unclassified=n_unclassified,
        n_removed=n_removed,
        median_pause_ms=_median(pauses),
        median_wso_ms=_median(wsos),
    )


def transition_histogram(values: Sequence[int], bin_width: int = 50) -> list[tuple[int, int, int]]:
    """Counts of signed intervals in half-open bins ``[left, left + bin_width)``."""
    if not values:
        return []
    lo = (min(values) // bin_width) * bin_width
    hi = (max(values) // bin_width) * bin_width
    n_bins = (hi - lo) // bin_width + 1
    counts = [0] * n_bins
    for v in values:
        counts[(v - lo) // bin_width] += 1
    return [(lo + i * bin_width, lo + (i + 1) * bin_width, c) for i, c in enumerate(counts)]
