"""Exception hierarchy shared across turnforge modules."""

from __future__ import annotations


class TurnforgeError(Exception):
    """Base class for all errors raised by turnforge."""


class TranscriptError(TurnforgeError):
    pass


class MalformedRecord(TranscriptError):
    def __init__(self, line: int, reason: str) -> None:
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NegativeDuration(TranscriptError):
    def __init__(self, line: int, start_ms: int, stop_ms: int) -> None:
        super().__init__(f"line {line}: stop_ms {stop_ms} < start_ms {start_ms}")
        self.line = line


class NotDyadic(TranscriptError):
    def __init__(self, speaker_count: int) -> None:
        super().__init__(f"expected exactly 2 speakers, found {speaker_count}")
        self.speaker_count = speaker_count


class OverlappingSameSpeaker(TranscriptError):
    def __init__(self, speaker_id: str, prev_stop: int, next_start: int) -> None:
        super().__init__(
            f"speaker {speaker_id!r}: token starting at {next_start} ms overlaps "
            f"previous token ending at {prev_stop} ms"
        )
        self.speaker_id = speaker_id


class MixedConversations(TranscriptError):
    pass


class EmptyTranscript(TurnforgeError):
    pass


class EmptyInput(TurnforgeError):
    pass


class NoTransitions(TurnforgeError):
    pass


class ZeroDuration(TurnforgeError):
    def __init__(self, turn_id: int) -> None:
        super().__init__(f"turn {turn_id} has zero duration")
        self.turn_id = turn_id


class NoTransitionsForSpeaker(TurnforgeError):
    pass


class DimensionMismatch(TurnforgeError):
    pass


class ZeroNorm(TurnforgeError):
    pass


class StatsError(TurnforgeError):
    pass


class TooFewGroups(StatsError):
    pass


class TooFewClusters(StatsError):
    pass


class SingularDesign(StatsError):
    pass


class OutOfRange(StatsError):
    pass


class ZeroMargin(StatsError):
    pass


class UnknownSpeakerInGrouping(StatsError):
    pass


class InvalidConfig(TurnforgeError):
    pass


class DegenerateDistributionWarning(UserWarning):
    """Outlier filtering skipped because the standard deviation is zero."""


class InsufficientDistinctValuesWarning(UserWarning):
    """Fewer than ten distinct values; some decile bins are merged."""
