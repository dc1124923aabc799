"""Deterministic synthetic sensor streams with exact ground truth.

Stands in for the strap-and-node hardware at a desk.  Each generator is a
pure function of (profile, duration): it emits the exact wire bytes the
device would have produced, plus a `GroundTruth` record holding everything
a test needs to check the downstream pipeline, computed directly from the
profile rather than by running the pipeline.

Two modeling choices keep the ground truth exact rather than statistical:

* Unused beat-timestamp slots are back-filled with fictional pre-session
  beats at the profile's opening interval, matching a strap that was
  already on the chest before the receiver attached.  Every recovered
  inter-beat interval, including the first, is then known in advance.
* EMG bursts are amplitude-modulated random-sign noise (each sample is
  +A or -A, seeded), so the rectified burst envelope is exactly A and
  scheduled onsets survive rectification and smoothing to the sample.
"""

import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .emg_dsp import SampleSeries
from .hxm_codec import HxmMessage, encode_hxm
from .shimmer_codec import (BATTERY_CUTOFF_MV, DATA_TYPE_EMG, SAMPLE_RATE_HZ,
                            ShimmerPacket, emg_mv, emg_raw_from_mv,
                            encode_shimmer)

# fixed identity the simulated strap reports
SIM_FIRMWARE_ID = 9500
SIM_FIRMWARE_VERSION = 2
SIM_HARDWARE_ID = 9800
SIM_HARDWARE_VERSION = 1

_BACKFILL_SLOTS = 20  # enough fictional history to fill the 15-slot window


class InvalidProfile(ValueError):
    """The profile asks for something the hardware could not produce."""


@dataclass
class HrProfile:
    """Declarative strap scenario.

    `segments` is a list of (duration_s, hr_bpm) legs; the last leg extends
    to the end of the run.  The counter offsets set where the wrapping wire
    fields start, and `drop_messages` lists 1-based message indices omitted
    from the stream, as if those seconds were lost on the air.
    """

    segments: list
    speed_mps: float = 0.0
    stride_rate_hz: float = 0.0
    seed: int = 0
    jitter_ms: float = 0.0
    beat_number_offset: int = 0
    distance_offset_raw: int = 0
    strides_offset: int = 0
    drop_messages: tuple = ()

    def __post_init__(self):
        if not self.segments:
            raise InvalidProfile("at least one segment required")
        for dur, hr in self.segments:
            if dur <= 0:
                raise InvalidProfile("segment durations must be positive")
            if not 30 <= hr <= 240:
                raise InvalidProfile(f"segment rate {hr} outside 30-240 bpm")
        if not 0 <= self.speed_mps * 256 <= 4095:
            raise InvalidProfile("speed must fit the wire field (under 16 m/s)")
        if self.stride_rate_hz < 0 or self.jitter_ms < 0:
            raise InvalidProfile("rates must be nonnegative")
        if not 0 <= self.beat_number_offset < 256:
            raise InvalidProfile("beat_number_offset outside [0, 256)")
        if not 0 <= self.distance_offset_raw < 4096:
            raise InvalidProfile("distance_offset_raw outside [0, 4096)")
        if not 0 <= self.strides_offset < 256:
            raise InvalidProfile("strides_offset outside [0, 256)")

    def hr_at(self, t: float) -> float:
        acc = 0.0
        for dur, hr in self.segments:
            acc += dur
            if t < acc:
                return hr
        return self.segments[-1][1]


@dataclass
class EmgProfile:
    """Declarative EMG-node scenario.

    Bursts are (onset_s, duration_s, amplitude_mv) and must not overlap.
    A draining battery drops packets to battery-report mode once it sags
    below the regulator threshold.
    """

    burst_schedule: list = field(default_factory=list)
    noise_rms_mv: float = 0.0
    battery_start_mv: int = 4100
    battery_drain_mv_per_s: float = 0.0
    seed: int = 0
    sensor_id: int = 0x11
    adc_span_mv: float = 3000.0

    def __post_init__(self):
        if self.noise_rms_mv < 0 or self.battery_drain_mv_per_s < 0:
            raise InvalidProfile("rates must be nonnegative")
        if not 0 <= self.battery_start_mv <= 0xFFFF:
            raise InvalidProfile("battery_start_mv must fit 16 bits")
        last_end = None
        for onset, dur, amp in sorted(self.burst_schedule):
            if onset < 0 or dur <= 0 or amp < 0:
                raise InvalidProfile("bursts need onset >= 0, duration > 0, "
                                     "amplitude >= 0")
            if last_end is not None and onset < last_end:
                raise InvalidProfile("bursts must not overlap")
            last_end = onset + dur


@dataclass
class GroundTruth:
    """What actually happened in a simulated run, straight from the profile."""

    # strap runs
    beat_times_ms: list = field(default_factory=list)
    total_distance_m: float = 0.0   # recoverable span between first and last message
    total_strides: int = 0
    message_count: int = 0
    first_message_s: float | None = None
    last_message_s: float | None = None
    expected_beats_total: int = 0
    expected_beats_unrecovered: int = 0
    expected_ibi_ms: list = field(default_factory=list)
    dropped_messages: list = field(default_factory=list)
    # EMG runs
    emg_series: SampleSeries | None = None
    burst_intervals: list = field(default_factory=list)
    packet_count: int = 0
    low_battery_s: float | None = None

    def to_dict(self) -> dict:
        d = {
            "beat_times_ms": self.beat_times_ms,
            "total_distance_m": self.total_distance_m,
            "total_strides": self.total_strides,
            "message_count": self.message_count,
            "first_message_s": self.first_message_s,
            "last_message_s": self.last_message_s,
            "expected_beats_total": self.expected_beats_total,
            "expected_beats_unrecovered": self.expected_beats_unrecovered,
            "expected_ibi_ms": self.expected_ibi_ms,
            "dropped_messages": self.dropped_messages,
            "burst_intervals": [list(b) for b in self.burst_intervals],
            "packet_count": self.packet_count,
            "low_battery_s": self.low_battery_s,
            "emg_series": None,
        }
        if self.emg_series is not None:
            d["emg_series"] = {"rate_hz": self.emg_series.rate_hz,
                               "samples": self.emg_series.samples.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        emg = d.get("emg_series")
        series = None
        if emg is not None:
            series = SampleSeries(np.array(emg["samples"]), emg["rate_hz"])
        return cls(
            beat_times_ms=d.get("beat_times_ms", []),
            total_distance_m=d.get("total_distance_m", 0.0),
            total_strides=d.get("total_strides", 0),
            message_count=d.get("message_count", 0),
            first_message_s=d.get("first_message_s"),
            last_message_s=d.get("last_message_s"),
            expected_beats_total=d.get("expected_beats_total", 0),
            expected_beats_unrecovered=d.get("expected_beats_unrecovered", 0),
            expected_ibi_ms=d.get("expected_ibi_ms", []),
            dropped_messages=d.get("dropped_messages", []),
            emg_series=series,
            burst_intervals=[tuple(b) for b in d.get("burst_intervals", [])],
            packet_count=d.get("packet_count", 0),
            low_battery_s=d.get("low_battery_s"))


def _beat_times_ms(profile: HrProfile, duration_s: float,
                   rng: np.random.Generator) -> list[int]:
    """Millisecond beat times in (0, duration], rounded like the strap."""
    beats = []
    t = 0.0
    while True:
        ibi = 60.0 / profile.hr_at(t)
        if profile.jitter_ms:
            ibi += rng.normal(0.0, profile.jitter_ms / 1000.0)
            # keep jittered intervals inside the receiver's sanity window
            ibi = min(max(ibi, 0.26), 1.95)
        t += ibi
        if t > duration_s + 1e-9:
            return beats
        beats.append(round(t * 1000.0))


def gen_hxm(profile: HrProfile, duration_s: float) -> tuple[bytes, GroundTruth]:
    """Generate the strap's byte stream: one message per elapsed second."""
    rng = np.random.default_rng(profile.seed)
    real = _beat_times_ms(profile, duration_s, rng)
    first_real = real[0] if real else 1000
    ibi0 = round(60000.0 / profile.hr_at(0.0))
    backfill = [first_real - k * ibi0 for k in range(_BACKFILL_SLOTS, 0, -1)]
    all_beats = backfill + real
    n_back = len(backfill)

    n_msgs = int(duration_s + 1e-9)
    drops = set(profile.drop_messages)
    for d in drops:
        if not 1 <= d <= n_msgs:
            raise InvalidProfile(f"drop index {d} outside 1..{n_msgs}")

    speed_raw = round(profile.speed_mps * 256)

    def vis(m: int) -> int:
        return bisect_right(real, m * 1000)

    def dist_raw_abs(m: int) -> int:
        return profile.distance_offset_raw + round(profile.speed_mps * 16 * m)

    def strides_abs(m: int) -> int:
        return profile.strides_offset + math.floor(profile.stride_rate_hz * m + 1e-9)

    frames = []
    truth = GroundTruth(beat_times_ms=list(real),
                        dropped_messages=sorted(drops))
    surviving = []
    for m in range(1, n_msgs + 1):
        v = vis(m)
        window = all_beats[max(0, n_back + v - 15):n_back + v]
        ts = tuple((b % 65536) for b in reversed(window))
        msg = HxmMessage(
            firmware_id=SIM_FIRMWARE_ID, firmware_version=SIM_FIRMWARE_VERSION,
            hardware_id=SIM_HARDWARE_ID, hardware_version=SIM_HARDWARE_VERSION,
            battery_charge=100,
            heart_rate=max(30, min(240, round(profile.hr_at(m)))),
            heart_beat_number=(profile.beat_number_offset + v) % 256,
            beat_timestamps=ts,
            distance_raw=dist_raw_abs(m) % 4096,
            speed_raw=speed_raw,
            strides=strides_abs(m) % 256)
        if m not in drops:
            frames.append(encode_hxm(msg))
            surviving.append(m)

    truth.message_count = len(surviving)
    if surviving:
        truth.first_message_s = float(surviving[0])
        truth.last_message_s = float(surviving[-1])
    if len(surviving) >= 2:
        first, last = surviving[0], surviving[-1]
        truth.expected_beats_total = vis(last) - vis(first)
        truth.total_distance_m = (dist_raw_abs(last) - dist_raw_abs(first)) / 16.0
        truth.total_strides = strides_abs(last) - strides_abs(first)
        prev_v = vis(first)
        for m in surviving[1:]:
            cur_v = vis(m)
            delta = cur_v - prev_v
            if delta > 255:
                raise InvalidProfile("a drop span hides more than 255 beats, "
                                     "the beat counter would alias")
            if delta:
                if delta <= 15:
                    lo = n_back + prev_v
                else:
                    truth.expected_beats_unrecovered += delta - 15
                    lo = n_back + cur_v - 14
                for p in range(lo, n_back + cur_v):
                    ibi = all_beats[p] - all_beats[p - 1]
                    if 200 < ibi < 2000:
                        truth.expected_ibi_ms.append(ibi)
                    else:
                        truth.expected_beats_unrecovered += 1
            prev_v = cur_v
    return b"".join(frames), truth


def gen_shimmer(profile: EmgProfile, duration_s: float) -> tuple[bytes, GroundTruth]:
    """Generate the EMG node's byte stream: one packet per 2 ms sample."""
    n = round(SAMPLE_RATE_HZ * duration_s)
    rng = np.random.default_rng(profile.seed)
    series = (rng.normal(0.0, profile.noise_rms_mv, n)
              if profile.noise_rms_mv else np.zeros(n))
    intervals = []
    for onset, dur, amp in profile.burst_schedule:
        i0 = round(onset * SAMPLE_RATE_HZ)
        i1 = min(round((onset + dur) * SAMPLE_RATE_HZ), n)
        if i0 >= n:
            continue
        signs = rng.integers(0, 2, i1 - i0) * 2 - 1
        series[i0:i1] = amp * signs
        intervals.append((i0 / SAMPLE_RATE_HZ, i1 / SAMPLE_RATE_HZ))

    drain = profile.battery_drain_mv_per_s
    low_k = None
    if drain > 0 and profile.battery_start_mv >= BATTERY_CUTOFF_MV:
        # battery(t) = start - drain * t drops below the cutoff at t_low
        t_low = (profile.battery_start_mv - BATTERY_CUTOFF_MV) / drain
        k = math.ceil(t_low * SAMPLE_RATE_HZ)
        while profile.battery_start_mv - drain * (k / SAMPLE_RATE_HZ) >= BATTERY_CUTOFF_MV:
            k += 1
        if k < n:
            low_k = k
    elif profile.battery_start_mv < BATTERY_CUTOFF_MV:
        low_k = 0

    raw = np.array([emg_raw_from_mv(v, profile.adc_span_mv) for v in series],
                   dtype=np.int64)
    quantized = np.array([emg_mv(int(r), profile.adc_span_mv) for r in raw])

    frames = []
    for k in range(n):
        t_s = k / SAMPLE_RATE_HZ
        if low_k is not None and k >= low_k:
            mv = round(profile.battery_start_mv - drain * t_s)
            pkt = ShimmerPacket(sensor_id=profile.sensor_id,
                                data_type=DATA_TYPE_EMG,
                                sequence=k % 256,
                                timestamp_ms=(2 * k) % 65536,
                                emg_len=0, emg_raw=0,
                                battery_mv=min(max(mv, 0), BATTERY_CUTOFF_MV))
        else:
            pkt = ShimmerPacket(sensor_id=profile.sensor_id,
                                data_type=DATA_TYPE_EMG,
                                sequence=k % 256,
                                timestamp_ms=(2 * k) % 65536,
                                emg_len=2, emg_raw=int(raw[k]),
                                battery_mv=0)
        frames.append(encode_shimmer(pkt))

    cutoff = n if low_k is None else low_k
    streamed_end = cutoff / SAMPLE_RATE_HZ
    truth = GroundTruth(
        emg_series=SampleSeries(quantized[:cutoff], SAMPLE_RATE_HZ),
        burst_intervals=[(a, min(b, streamed_end)) for a, b in intervals
                         if a < streamed_end],
        packet_count=n,
        low_battery_s=None if low_k is None else low_k / SAMPLE_RATE_HZ)
    return b"".join(frames), truth


@dataclass
class Corruption:
    """One injected fault, indexed by frame within the original stream."""

    kind: str              # "drop" or "bitflip"
    frame_index: int
    byte_index: int | None = None
    bit: int | None = None


def corrupt(stream: bytes, drop_rate: float = 0.0, bitflip_rate: float = 0.0,
            seed: int = 0, *, frame_len: int) -> tuple[bytes, list[Corruption]]:
    """Deterministically damage a stream of fixed-length frames.

    Each frame is independently dropped with `drop_rate`, else has one
    random bit flipped with `bitflip_rate`.  Returns the surviving bytes
    and a log of exactly what was done.
    """
    if frame_len <= 0 or len(stream) % frame_len:
        raise ValueError("stream length must be a multiple of frame_len")
    rng = np.random.default_rng(seed)
    out = []
    log = []
    for i in range(len(stream) // frame_len):
        frame = stream[i * frame_len:(i + 1) * frame_len]
        r_drop, r_flip = rng.random(), rng.random()
        if r_drop < drop_rate:
            log.append(Corruption("drop", i))
            continue
        if r_flip < bitflip_rate:
            byte = int(rng.integers(0, frame_len))
            bit = int(rng.integers(0, 8))
            mutated = bytearray(frame)
            mutated[byte] ^= 1 << bit
            frame = bytes(mutated)
            log.append(Corruption("bitflip", i, byte, bit))
        out.append(frame)
    return b"".join(out), log


def _parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidProfile(f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_hr_profile(path) -> HrProfile:
    """Read a strap scenario from a key=value file.

    Recognized keys: segments (dur:bpm legs, comma separated), speed_mps,
    stride_rate_hz, seed, jitter_ms, beat_number_offset,
    distance_offset_raw, strides_offset, drop_messages (comma separated).
    """
    with open(path) as fh:
        kv = _parse_kv(fh.read())
    if "segments" not in kv:
        raise InvalidProfile("strap profile needs a segments key")
    segments = []
    for leg in kv["segments"].split(","):
        dur, _, hr = leg.strip().partition(":")
        segments.append((float(dur), float(hr)))
    drops = tuple(int(x) for x in kv.get("drop_messages", "").split(",") if x.strip())
    return HrProfile(
        segments=segments,
        speed_mps=float(kv.get("speed_mps", 0.0)),
        stride_rate_hz=float(kv.get("stride_rate_hz", 0.0)),
        seed=int(kv.get("seed", 0)),
        jitter_ms=float(kv.get("jitter_ms", 0.0)),
        beat_number_offset=int(kv.get("beat_number_offset", 0)),
        distance_offset_raw=int(kv.get("distance_offset_raw", 0)),
        strides_offset=int(kv.get("strides_offset", 0)),
        drop_messages=drops)


def load_emg_profile(path) -> EmgProfile:
    """Read an EMG scenario from a key=value file.

    Recognized keys: bursts (onset:dur:amplitude_mv triples, comma
    separated), noise_rms_mv, battery_start_mv, battery_drain_mv_per_s,
    seed, sensor_id, adc_span_mv.
    """
    with open(path) as fh:
        kv = _parse_kv(fh.read())
    bursts = []
    for item in kv.get("bursts", "").split(","):
        item = item.strip()
        if not item:
            continue
        onset, dur, amp = item.split(":")
        bursts.append((float(onset), float(dur), float(amp)))
    return EmgProfile(
        burst_schedule=bursts,
        noise_rms_mv=float(kv.get("noise_rms_mv", 0.0)),
        battery_start_mv=int(kv.get("battery_start_mv", 4100)),
        battery_drain_mv_per_s=float(kv.get("battery_drain_mv_per_s", 0.0)),
        seed=int(kv.get("seed", 0)),
        sensor_id=int(kv.get("sensor_id", "0x11"), 0),
        adc_span_mv=float(kv.get("adc_span_mv", 3000.0)))
