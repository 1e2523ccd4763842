"""Turn segmentation, interval classification and group statistics for
dyadic conversation transcripts."""

from __future__ import annotations

__version__ = "0.1.0"

from .transcript_io import Token, TranscriptStream, join_tokens, parse_transcript, parse_transcripts
from .turn_models import Turn, is_backchannel, segment

__all__ = [
    "Token",
    "TranscriptStream",
    "Turn",
    "is_backchannel",
    "join_tokens",
    "parse_transcript",
    "parse_transcripts",
    "segment",
    "__version__",
]
