"""Stream framing shared by the two sensor codecs.

Both wire protocols delimit frames with the STX/ETX ASCII control bytes and
protect the content with a CRC.  The links are simplex byte streams, so a
receiver that attaches mid-stream, or loses bytes to a glitch, has to
resynchronize by hunting for the next plausible frame start.  `scan_frames`
implements that policy for any fixed-length frame codec: attempt a decode at
each STX candidate and, when the candidate is rejected, slide one byte past
it and rescan.

Candidates whose frame markers are wrong are treated as line noise and only
counted in `bytes_skipped`; candidates that look like a frame but fail the
CRC or carry an out-of-range field count as rejected frames.
"""

from dataclasses import dataclass, field
from typing import Callable

STX = 0x02
ETX = 0x03


class CodecError(ValueError):
    """Base for all encode/decode failures."""


class InvalidField(CodecError):
    """Encode-side: a message field violates its invariant."""


class BadFrame(CodecError):
    """Decode-side: frame markers or length are wrong."""


class BadCrc(CodecError):
    """Decode-side: checksum mismatch."""


class BadField(CodecError):
    """Decode-side: CRC passed but a field is out of range."""


@dataclass
class FramerState:
    """Resynchronization state carried between scan calls.

    `pending` holds the unconsumed tail of the stream (always shorter than
    one frame after a scan), the counters survive for diagnostics.
    """

    pending: bytearray = field(default_factory=bytearray)
    frames_ok: int = 0
    frames_rejected: int = 0
    bytes_skipped: int = 0


def scan_frames(state: FramerState, chunk: bytes, frame_len: int,
                decode: Callable[[bytes], object]) -> list:
    """Feed a chunk through the framer, returning complete decoded frames.

    The result depends only on the concatenated byte stream, never on how
    it was chopped into chunks.
    """
    buf = state.pending
    buf += chunk
    out = []
    pos = 0
    n = len(buf)
    while True:
        idx = buf.find(STX, pos)
        if idx < 0:
            state.bytes_skipped += n - pos
            pos = n
            break
        state.bytes_skipped += idx - pos
        pos = idx
        if n - pos < frame_len:
            break  # incomplete candidate, wait for more bytes
        try:
            msg = decode(bytes(buf[pos:pos + frame_len]))
        except (BadCrc, BadField):
            state.frames_rejected += 1
            state.bytes_skipped += 1
            pos += 1
            continue
        except BadFrame:
            state.bytes_skipped += 1
            pos += 1
            continue
        out.append(msg)
        state.frames_ok += 1
        pos += frame_len
    del buf[:pos]
    return out
