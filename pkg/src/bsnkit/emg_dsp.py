"""Surface-EMG processing: filter, rectify, smooth, quantify.

Everything operates on `SampleSeries`, a uniformly sampled signal in
millivolts.  The usual chain is

    dc_filter -> rectify -> smooth -> activation_timing / rms / ...

and `analyze` runs that chain end to end, returning an `EmgReport` with the
parameters it used recorded alongside the numbers.

Window lengths are given in seconds and converted with w = round(window_s *
rate_hz); windows shorter than two samples are refused.  Smoothing and
windowed RMS use a centered window truncated at the series edges, so output
length always equals input length.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter


class DspError(ValueError):
    """Base for signal-processing failures."""


class InvalidWindow(DspError):
    """Window shorter than two samples, or otherwise unusable."""


class InvalidThreshold(DspError):
    """Activation threshold must be positive."""


class EmptySeries(DspError):
    """The operation needs at least one sample (or one complete trace)."""


class TooShort(DspError):
    """The series does not span enough time for this estimate."""


class ZeroDenominator(DspError):
    """Ratio denominator side carries no signal."""


@dataclass(eq=False)
class SampleSeries:
    """A uniformly sampled signal: `samples` in millivolts at `rate_hz`."""

    samples: np.ndarray
    rate_hz: float = 500.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DspError("samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("samples must be finite")
        if not self.rate_hz > 0:
            raise DspError("rate_hz must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz


def _window_samples(series: SampleSeries, window_s: float) -> int:
    w = round(window_s * series.rate_hz)
    if w < 2:
        raise InvalidWindow(f"window of {window_s} s is under two samples "
                            f"at {series.rate_hz} Hz")
    return w


def dc_filter(series: SampleSeries, cutoff_hz: float = 10.0) -> SampleSeries:
    """Remove the DC offset with a first-order high-pass filter.

    Single-pole RC high-pass, 10 Hz cutoff by default.  The filter starts
    from steady state for the first sample, so a constant input maps to an
    exactly zero output.
    """
    if not cutoff_hz > 0:
        raise DspError("cutoff_hz must be positive")
    x = series.samples
    if len(x) == 0:
        return SampleSeries(x.copy(), series.rate_hz)
    rc = 1.0 / (2.0 * math.pi * cutoff_hz)
    alpha = rc / (rc + 1.0 / series.rate_hz)
    # referencing to the first sample puts the pole at rest at n = 0
    u = x - x[0]
    y = lfilter([alpha, -alpha], [1.0, -alpha], u)
    return SampleSeries(y, series.rate_hz)


def rectify(series: SampleSeries) -> SampleSeries:
    """Full-wave rectification: absolute value, sample by sample."""
    return SampleSeries(np.abs(series.samples), series.rate_hz)


def _sliding_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Centered moving average with edge windows truncated to the series."""
    n = len(x)
    c = np.concatenate(([0.0], np.cumsum(x)))
    i = np.arange(n)
    lo = np.maximum(i - (w - 1) // 2, 0)
    hi = np.minimum(i + w // 2, n - 1)
    return (c[hi + 1] - c[lo]) / (hi - lo + 1)


def smooth(series: SampleSeries, window_s: float) -> SampleSeries:
    """Centered moving-average smoothing; output length equals input length."""
    w = _window_samples(series, window_s)
    if len(series) == 0:
        return SampleSeries(series.samples.copy(), series.rate_hz)
    return SampleSeries(_sliding_mean(series.samples, w), series.rate_hz)


def rms(series: SampleSeries, window_s: float | None = None):
    """Root-mean-square amplitude.

    With no window, returns the scalar RMS of the whole series.  With a
    window, returns a series of the same length holding the RMS over a
    centered window at each sample, edges truncated.
    """
    if window_s is None:
        if len(series) == 0:
            raise EmptySeries("rms of an empty series")
        return float(np.sqrt(np.mean(np.square(series.samples))))
    w = _window_samples(series, window_s)
    if len(series) == 0:
        return SampleSeries(series.samples.copy(), series.rate_hz)
    return SampleSeries(np.sqrt(_sliding_mean(np.square(series.samples), w)),
                        series.rate_hz)


def integral_average(series: SampleSeries) -> float:
    """Mean of the rectified signal, the workhorse amplitude estimate."""
    if len(series) == 0:
        raise EmptySeries("integral average of an empty series")
    return float(np.mean(np.abs(series.samples)))


def peak_to_peak_average(series: SampleSeries, trace_s: float) -> float:
    """Mean peak-to-peak excursion over consecutive traces of `trace_s`.

    The series is split into back-to-back traces; each contributes its
    max minus min, and a trailing partial trace is dropped.
    """
    w = _window_samples(series, trace_s)
    n_traces = len(series) // w
    if n_traces == 0:
        raise EmptySeries("no complete trace in the series")
    x = series.samples[:n_traces * w].reshape(n_traces, w)
    return float(np.mean(x.max(axis=1) - x.min(axis=1)))


def activation_timing(envelope: SampleSeries, threshold: float,
                      min_duration_s: float = 0.1) -> list[tuple[float, float]]:
    """Onset/offset pairs of intervals where the envelope sits on or above
    `threshold`, dropping intervals shorter than `min_duration_s`.

    An interval covering samples i..j maps to (i / rate, (j + 1) / rate),
    so offset minus onset is the dwell time.  Intervals come back ordered
    and disjoint.
    """
    if not threshold > 0:
        raise InvalidThreshold("threshold must be positive")
    x = envelope.samples
    rate = envelope.rate_hz
    active = x >= threshold
    if not active.any():
        return []
    edges = np.flatnonzero(np.diff(active.astype(np.int8)))
    starts = list(edges[~active[edges]] + 1)
    ends = list(edges[active[edges]])
    if active[0]:
        starts.insert(0, 0)
    if active[-1]:
        ends.append(len(x) - 1)
    out = []
    for i0, i1 in zip(starts, ends):
        onset, offset = i0 / rate, (i1 + 1) / rate
        if offset - onset >= min_duration_s:
            out.append((onset, offset))
    return out


def symmetry_ratio(left: SampleSeries, right: SampleSeries) -> float:
    """RMS of the left series over RMS of the right, for bilateral balance."""
    if left.rate_hz != right.rate_hz:
        raise DspError("left and right series must share a sample rate")
    denom = rms(right)
    if denom == 0.0:
        raise ZeroDenominator("right side carries no signal")
    return rms(left) / denom


def fatigue_slope(series: SampleSeries) -> float:
    """Least-squares slope of one-second RMS bins against time, in units of
    amplitude per second.  Sustained effort trends negative as the muscle
    tires.  Needs at least two full seconds."""
    rate = series.rate_hz
    n_bins = int(len(series) / rate)
    if n_bins < 2:
        raise TooShort("fatigue slope needs at least two seconds of signal")
    values = []
    for k in range(n_bins):
        lo, hi = round(k * rate), round((k + 1) * rate)
        values.append(np.sqrt(np.mean(np.square(series.samples[lo:hi]))))
    centers = np.arange(n_bins) + 0.5
    return float(np.polyfit(centers, np.array(values), 1)[0])


@dataclass
class EmgReport:
    """Summary statistics for one EMG recording.

    `params` records the analysis settings that produced the numbers, so a
    stored report can be reproduced.
    """

    rms: float = 0.0
    integral_average: float = 0.0
    peak_to_peak_avg: float = 0.0
    activations: list = field(default_factory=list)
    symmetry_ratio: float | None = None
    fatigue_slope: float = 0.0
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rms": self.rms,
            "integral_average": self.integral_average,
            "peak_to_peak_avg": self.peak_to_peak_avg,
            "activations": [list(a) for a in self.activations],
            "symmetry_ratio": self.symmetry_ratio,
            "fatigue_slope": self.fatigue_slope,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmgReport":
        return cls(rms=d["rms"], integral_average=d["integral_average"],
                   peak_to_peak_avg=d["peak_to_peak_avg"],
                   activations=[tuple(a) for a in d.get("activations", [])],
                   symmetry_ratio=d.get("symmetry_ratio"),
                   fatigue_slope=d.get("fatigue_slope", 0.0),
                   params=d.get("params", {}))

    def to_text(self) -> str:
        lines = [f"rms={self.rms:.6g}",
                 f"integral_average={self.integral_average:.6g}",
                 f"peak_to_peak_avg={self.peak_to_peak_avg:.6g}",
                 f"activations={len(self.activations)}"]
        for onset, offset in self.activations:
            lines.append(f"activation={onset:.3f}:{offset:.3f}")
        if self.symmetry_ratio is not None:
            lines.append(f"symmetry_ratio={self.symmetry_ratio:.6g}")
        lines.append(f"fatigue_slope={self.fatigue_slope:.6g}")
        return "\n".join(lines)


def analyze(series: SampleSeries, *, cutoff_hz: float = 10.0,
            smooth_window_s: float = 0.05, threshold: float | None = None,
            min_duration_s: float = 0.1, trace_s: float = 1.0,
            right: SampleSeries | None = None) -> EmgReport:
    """Run the full chain over one recording and report.

    The activation threshold defaults to twice the baseline RMS of the
    envelope's first second (the subject is assumed at rest while the
    recording starts).  Pass `right` to also report the bilateral
    symmetry ratio of `series` against it.
    """
    if len(series) == 0:
        raise EmptySeries("nothing to analyze")
    filtered = dc_filter(series, cutoff_hz)
    envelope = smooth(rectify(filtered), smooth_window_s)
    if threshold is None:
        baseline = envelope.samples[:round(series.rate_hz)]
        threshold = 2.0 * float(np.sqrt(np.mean(np.square(baseline))))
        if threshold <= 0.0:
            # dead-quiet baseline: fall back to a sliver of the peak
            threshold = 0.05 * float(envelope.samples.max() or 1.0)
    effective_trace = min(trace_s, series.duration_s)
    try:
        ptp = peak_to_peak_average(filtered, effective_trace)
    except (InvalidWindow, EmptySeries):
        ptp = 0.0
    try:
        slope = fatigue_slope(envelope)
    except TooShort:
        slope = 0.0
    ratio = None
    if right is not None:
        ratio = symmetry_ratio(filtered, dc_filter(right, cutoff_hz))
    return EmgReport(
        rms=rms(filtered),
        integral_average=integral_average(filtered),
        peak_to_peak_avg=ptp,
        activations=activation_timing(envelope, threshold, min_duration_s),
        symmetry_ratio=ratio,
        fatigue_slope=slope,
        params={"cutoff_hz": cutoff_hz, "smooth_window_s": smooth_window_s,
                "threshold": threshold, "min_duration_s": min_duration_s,
                "trace_s": effective_trace, "rate_hz": series.rate_hz})


def save_series(series: SampleSeries, path) -> None:
    """Write a series file: `rate_hz=<value>` header, one sample per line."""
    with open(path, "w") as fh:
        fh.write(f"rate_hz={series.rate_hz:g}\n")
        for v in series.samples:
            fh.write(f"{v:.9g}\n")


def load_series(path) -> SampleSeries:
    """Read a series file written by `save_series`."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("rate_hz="):
            raise DspError("series file must start with a rate_hz= header")
        rate = float(header.split("=", 1)[1])
        samples = [float(line) for line in fh if line.strip()]
    return SampleSeries(np.array(samples), rate)
