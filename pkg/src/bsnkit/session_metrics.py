"""Session-level aggregation over decoded sensor messages.

The strap reports cumulative quantities in narrow wire fields that wrap
(distance every 256 m, strides and beat number at 255), so totals are
accumulated through `RolloverCounter`, which only ever looks at successive
raw deltas.  Heart-rate statistics come from inter-beat intervals stitched
out of each message's 15-slot timestamp history; the beat-number delta says
how many of those slots are new, and any beats that scrolled out of the
window during an outage are tallied as unrecovered rather than guessed at.
"""

from dataclasses import dataclass, field

from .emg_dsp import EmgReport
from .hxm_codec import TIMESTAMP_MOD, TIMESTAMP_SLOTS, HxmMessage

IBI_MIN_MS = 200    # open bounds: intervals at or outside are rejected
IBI_MAX_MS = 2000

BEAT_NUMBER_MOD = 256
DISTANCE_MOD = 4096  # 256 m  x  16 raw counts per meter
STRIDES_MOD = 256


class MetricsError(ValueError):
    """Base for aggregation failures."""


class InvalidRaw(MetricsError):
    """Raw counter reading at or above the modulus."""


class NoData(MetricsError):
    """The requested statistic has nothing to average."""


class RolloverCounter:
    """Accumulates a true total from a wrapping raw counter.

    The first observation only anchors the phase; every later reading adds
    (raw - last_raw) mod modulus.  Totals are therefore invariant to the
    starting offset of the raw counter, provided no single step exceeds one
    full wrap.
    """

    def __init__(self, modulus: int):
        if modulus <= 0:
            raise MetricsError("modulus must be positive")
        self.modulus = modulus
        self.last_raw: int | None = None
        self.total = 0

    def update(self, raw: int) -> "RolloverCounter":
        if not 0 <= raw < self.modulus:
            raise InvalidRaw(f"raw reading {raw} outside [0, {self.modulus})")
        if self.last_raw is not None:
            self.total += (raw - self.last_raw) % self.modulus
        self.last_raw = raw
        return self


@dataclass
class HrSessionState:
    """Incremental heart-rate state built from strap messages."""

    last_beat_number: int | None = None
    last_timestamps: tuple = ()
    beats_total: int = 0
    beats_unrecovered: int = 0
    ibi_ms: list = field(default_factory=list)
    messages_seen: int = 0
    # per-message heart-rate field stats, zero readings (no detection) skipped
    min_hr: int | None = None
    max_hr: int | None = None
    hr_sum: int = 0
    hr_count: int = 0

    def _note_ibi(self, ibi: int) -> None:
        if IBI_MIN_MS < ibi < IBI_MAX_MS:
            self.ibi_ms.append(ibi)
        else:
            self.beats_unrecovered += 1

    def ingest(self, msg: HxmMessage) -> "HrSessionState":
        """Fold one decoded message into the session."""
        self.messages_seen += 1
        hr = msg.heart_rate
        if hr:
            self.min_hr = hr if self.min_hr is None else min(self.min_hr, hr)
            self.max_hr = hr if self.max_hr is None else max(self.max_hr, hr)
            self.hr_sum += hr
            self.hr_count += 1
        ts = msg.beat_timestamps
        if self.last_beat_number is None:
            self.last_beat_number = msg.heart_beat_number
            self.last_timestamps = ts
            return self
        delta = (msg.heart_beat_number - self.last_beat_number) % BEAT_NUMBER_MOD
        if delta:
            self.beats_total += delta
            if delta <= TIMESTAMP_SLOTS:
                # every new beat's predecessor timestamp is still reachable;
                # at delta == 15 the oldest predecessor is the previous
                # message's newest slot
                for k in range(delta - 1, -1, -1):
                    prev = ts[k + 1] if k + 1 < TIMESTAMP_SLOTS else self.last_timestamps[0]
                    self._note_ibi((ts[k] - prev) % TIMESTAMP_MOD)
            else:
                # outage: beats older than the 15-slot window are gone for
                # good, the window itself still yields 14 intervals
                self.beats_unrecovered += delta - TIMESTAMP_SLOTS
                for k in range(TIMESTAMP_SLOTS - 2, -1, -1):
                    self._note_ibi((ts[k] - ts[k + 1]) % TIMESTAMP_MOD)
        self.last_beat_number = msg.heart_beat_number
        self.last_timestamps = ts
        return self

    def average_hr(self) -> float:
        """Beat-weighted average: 60000 over the mean accepted interval."""
        if not self.ibi_ms:
            raise NoData("no inter-beat intervals recovered")
        return 60000.0 / (sum(self.ibi_ms) / len(self.ibi_ms))

    def message_average_hr(self) -> float:
        """Plain mean of the per-message heart-rate field, for display."""
        if not self.hr_count:
            raise NoData("no nonzero heart-rate readings")
        return self.hr_sum / self.hr_count


@dataclass
class SessionSummary:
    """One workout, reduced to the numbers worth keeping."""

    duration_s: float = 0.0
    avg_hr_bpm: float | None = None
    min_hr_bpm: int | None = None
    max_hr_bpm: int | None = None
    distance_m: float = 0.0
    strides_total: int = 0
    beats_total: int = 0
    loss_fraction: float = 0.0
    message_avg_hr_bpm: float | None = None
    emg: EmgReport | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "duration_s": self.duration_s,
            "avg_hr_bpm": self.avg_hr_bpm,
            "min_hr_bpm": self.min_hr_bpm,
            "max_hr_bpm": self.max_hr_bpm,
            "distance_m": self.distance_m,
            "strides_total": self.strides_total,
            "beats_total": self.beats_total,
            "loss_fraction": self.loss_fraction,
            "message_avg_hr_bpm": self.message_avg_hr_bpm,
            "diagnostics": self.diagnostics,
        }
        d["emg"] = self.emg.to_dict() if self.emg is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSummary":
        emg = d.get("emg")
        return cls(
            duration_s=d.get("duration_s", 0.0),
            avg_hr_bpm=d.get("avg_hr_bpm"),
            min_hr_bpm=d.get("min_hr_bpm"),
            max_hr_bpm=d.get("max_hr_bpm"),
            distance_m=d.get("distance_m", 0.0),
            strides_total=d.get("strides_total", 0),
            beats_total=d.get("beats_total", 0),
            loss_fraction=d.get("loss_fraction", 0.0),
            message_avg_hr_bpm=d.get("message_avg_hr_bpm"),
            emg=EmgReport.from_dict(emg) if emg else None,
            diagnostics=d.get("diagnostics", {}))


def summarize(hr: HrSessionState, distance: RolloverCounter,
              strides: RolloverCounter, emg: EmgReport | None,
              t0: float, t1: float) -> SessionSummary:
    """Assemble the summary for the window [t0, t1] seconds."""
    if t1 < t0:
        raise MetricsError("t1 must not precede t0")
    try:
        avg = hr.average_hr()
    except NoData:
        avg = None
    try:
        msg_avg = hr.message_average_hr()
    except NoData:
        msg_avg = None
    loss = hr.beats_unrecovered / hr.beats_total if hr.beats_total else 0.0
    return SessionSummary(
        duration_s=t1 - t0,
        avg_hr_bpm=avg,
        min_hr_bpm=hr.min_hr,
        max_hr_bpm=hr.max_hr,
        distance_m=distance.total / 16.0,
        strides_total=strides.total,
        beats_total=hr.beats_total,
        loss_fraction=loss,
        message_avg_hr_bpm=msg_avg,
        emg=emg)
