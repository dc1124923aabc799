"""Base-station pipeline: read sensor streams, fold one session, upload.

Sources are ordered byte streams, either a file of captured frames or a TCP
endpoint standing in for the live link.  One reader thread per source feeds
decoded messages through a queue into a single aggregator, and every raw
byte is persisted under the session directory before any upload is
attempted.  Nothing leaves the machine unless the upload policy says so:
manual mode never uploads from `run_session`, it only uploads when `upload`
is called explicitly.

Uploads are idempotent because the workout id is a client-generated UUID
minted once per session and stored in the local record; resending the same
record can only ever land on the same server row.
"""

import json
import queue
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import httpx

from . import hxm_codec, shimmer_codec
from .emg_dsp import EmptySeries, SampleSeries, analyze
from .framing import FramerState
from .session_metrics import (DISTANCE_MOD, STRIDES_MOD, HrSessionState,
                              RolloverCounter, SessionSummary, summarize)

RECONNECT_CAP_MS = 30000
RECORD_NAME = "record.json"


class GatewayError(Exception):
    """Base for pipeline failures."""


class InvalidConfig(GatewayError):
    pass


class SourceUnreachable(GatewayError):
    """A source never yielded a byte despite exhausting reconnects."""


class UploadFailed(GatewayError):
    """Transport-level upload failure; retry later with the same record."""


class UploadRejected(GatewayError):
    """The service refused the upload; retrying the same record is futile."""


@dataclass
class SourceConfig:
    kind: str                       # "file" or "tcp"
    address: str                    # path, or host:port
    protocol: str                   # "hxm" or "shimmer"
    reconnect_max_attempts: int = 5
    reconnect_backoff_ms: int = 500

    def __post_init__(self):
        if self.kind not in ("file", "tcp"):
            raise InvalidConfig(f"unknown source kind {self.kind!r}")
        if self.protocol not in ("hxm", "shimmer"):
            raise InvalidConfig(f"unknown protocol {self.protocol!r}")
        if self.reconnect_max_attempts < 0 or self.reconnect_backoff_ms < 0:
            raise InvalidConfig("reconnect settings must be nonnegative")


@dataclass
class UploadPolicy:
    mode: str = "manual"            # "manual" or "periodic"
    period_s: float = 60.0
    endpoint: str = ""
    auth_token: str = ""

    def __post_init__(self):
        if self.mode not in ("manual", "periodic"):
            raise InvalidConfig(f"unknown upload mode {self.mode!r}")


def reconnect_delay_ms(source: SourceConfig, attempt: int) -> int | None:
    """Backoff before reconnect `attempt` (1-based): base doubling per
    attempt, capped at 30 s.  None means give up."""
    if attempt < 1:
        raise ValueError("attempts count from 1")
    if attempt > source.reconnect_max_attempts:
        return None
    return min(source.reconnect_backoff_ms * 2 ** (attempt - 1),
               RECONNECT_CAP_MS)


def _read_file(address: str):
    with open(address, "rb") as fh:
        while True:
            chunk = fh.read(4096)
            if not chunk:
                return
            yield chunk


def _read_tcp(source: SourceConfig):
    host, _, port = source.address.rpartition(":")
    addr = (host or "127.0.0.1", int(port))
    got_any = False
    attempt = 1
    while True:
        try:
            sock = socket.create_connection(addr, timeout=10.0)
        except OSError as exc:
            delay = reconnect_delay_ms(source, attempt)
            attempt += 1
            if delay is None:
                if got_any:
                    return
                raise SourceUnreachable(f"{source.address}: {exc}") from exc
            time.sleep(delay / 1000.0)
            continue
        attempt = 1
        with sock:
            while True:
                try:
                    chunk = sock.recv(4096)
                except OSError:
                    break
                if not chunk:
                    break
                got_any = True
                yield chunk


def _reader(idx: int, source: SourceConfig, raw_path: Path, out: queue.Queue):
    """Thread body: persist raw bytes as they arrive and enqueue decoded
    messages in stream order."""
    state = FramerState()
    scan = hxm_codec.scan if source.protocol == "hxm" else shimmer_codec.scan_shimmer
    try:
        chunks = (_read_file(source.address) if source.kind == "file"
                  else _read_tcp(source))
        with open(raw_path, "wb") as raw:
            for chunk in chunks:
                raw.write(chunk)
                raw.flush()
                msgs, state = scan(state, chunk)
                if msgs:
                    out.put(("msgs", idx, msgs))
    except GatewayError as exc:
        out.put(("error", idx, exc))
        return
    except OSError as exc:
        out.put(("error", idx, SourceUnreachable(f"{source.address}: {exc}")))
        return
    out.put(("done", idx, state))


def run_session(sources: list[SourceConfig], policy: UploadPolicy,
                user_id: str, *, session_dir: str = "sessions",
                client=None, started_at: str | None = None,
                workout_id: str | None = None) -> SessionSummary:
    """Drain every source, persist the session locally, return its summary.

    At most one strap source and two EMG sources (left then right) per
    session.  With a periodic policy the finished session is uploaded
    before returning; upload trouble lands in the summary diagnostics
    rather than aborting, since the record is already safe on disk.
    """
    if not sources:
        raise InvalidConfig("at least one source required")
    if sum(1 for s in sources if s.protocol == "hxm") > 1:
        raise InvalidConfig("at most one strap source per session")
    if sum(1 for s in sources if s.protocol == "shimmer") > 2:
        raise InvalidConfig("at most two EMG sources per session")

    workout_id = workout_id or str(uuid.uuid4())
    started_at = started_at or datetime.now(timezone.utc).isoformat()
    outdir = Path(session_dir) / workout_id
    outdir.mkdir(parents=True, exist_ok=True)

    q: queue.Queue = queue.Queue()
    threads = []
    raw_files = {}
    for idx, src in enumerate(sources):
        raw_path = outdir / f"source_{idx}_{src.protocol}.bin"
        raw_files[idx] = raw_path
        t = threading.Thread(target=_reader, args=(idx, src, raw_path, q),
                             daemon=True)
        t.start()
        threads.append(t)

    hr_state = HrSessionState()
    dist_counter = RolloverCounter(DISTANCE_MOD)
    strides_counter = RolloverCounter(STRIDES_MOD)
    hxm_msgs = 0
    hr_rows: list[tuple[int, float]] = []
    dist_rows: list[tuple[int, float]] = []
    emg_series: dict[int, list[float]] = {}
    framer_states: dict[int, FramerState] = {}
    diag = {"unknown_type_packets": 0, "counter_glitches": 0,
            "low_battery_reports": 0}
    first_error: GatewayError | None = None

    pending = len(sources)
    while pending:
        kind, idx, payload = q.get()
        if kind == "done":
            framer_states[idx] = payload
            pending -= 1
        elif kind == "error":
            first_error = first_error or payload
            pending -= 1
        elif sources[idx].protocol == "hxm":
            for msg in payload:
                hr_state.ingest(msg)
                hxm_msgs += 1
                offset_ms = (hxm_msgs - 1) * 1000
                hr_rows.append((offset_ms, float(msg.heart_rate)))
                if msg.distance_raw < DISTANCE_MOD:
                    dist_counter.update(msg.distance_raw)
                else:
                    diag["counter_glitches"] += 1
                strides_counter.update(msg.strides)
                dist_rows.append((offset_ms, dist_counter.total / 16.0))
        else:
            bucket = emg_series.setdefault(idx, [])
            for pkt in payload:
                if pkt.data_type != shimmer_codec.DATA_TYPE_EMG:
                    diag["unknown_type_packets"] += 1
                    continue
                if pkt.battery_mv:
                    diag["low_battery_reports"] += 1
                if pkt.emg_len == 2:
                    bucket.append(shimmer_codec.emg_mv(pkt.emg_raw))
    for t in threads:
        t.join()
    if first_error is not None:
        raise first_error

    shimmer_order = [i for i, s in enumerate(sources) if s.protocol == "shimmer"]
    primary = emg_series.get(shimmer_order[0], []) if shimmer_order else []
    second = (emg_series.get(shimmer_order[1], [])
              if len(shimmer_order) > 1 else [])
    emg_report = None
    if primary:
        rate = shimmer_codec.SAMPLE_RATE_HZ
        right = SampleSeries(second, rate) if second else None
        try:
            emg_report = analyze(SampleSeries(primary, rate), right=right)
        except EmptySeries:
            emg_report = None

    rate = shimmer_codec.SAMPLE_RATE_HZ
    t1 = max([float(hxm_msgs)] + [len(v) / rate for v in emg_series.values()])
    summary = summarize(hr_state, dist_counter, strides_counter, emg_report,
                        0.0, t1)
    summary.diagnostics = dict(diag)
    summary.diagnostics["workout_id"] = workout_id
    summary.diagnostics["sources"] = [
        {"protocol": sources[i].protocol,
         "frames_ok": framer_states[i].frames_ok,
         "frames_rejected": framer_states[i].frames_rejected,
         "bytes_skipped": framer_states[i].bytes_skipped}
        for i in sorted(framer_states)]

    samples = [("hr", off, v) for off, v in hr_rows]
    acc = 0
    for ibi in hr_state.ibi_ms:
        acc += ibi
        samples.append(("ibi", acc, float(ibi)))
    samples += [("distance", off, v) for off, v in dist_rows]
    samples += [("emg", 2 * k, v) for k, v in enumerate(primary)]
    samples += [("emg2", 2 * k, v) for k, v in enumerate(second)]

    record = {
        "workout_id": workout_id,
        "user_id": user_id,
        "started_at": started_at,
        "duration_s": summary.duration_s,
        "summary": summary.to_dict(),
        "samples": [list(row) for row in samples],
    }
    with open(outdir / RECORD_NAME, "w") as fh:
        json.dump(record, fh)

    if policy.mode == "periodic":
        try:
            upload(record, policy, client=client)
        except GatewayError as exc:
            summary.diagnostics["upload_error"] = str(exc)
    return summary


def load_record(session_dir: str, workout_id: str) -> dict:
    """Fetch the persisted record for a past session."""
    with open(Path(session_dir) / workout_id / RECORD_NAME) as fh:
        return json.load(fh)


def upload(record: dict, policy: UploadPolicy, client=None) -> str:
    """Send one persisted session to the ingestion service.

    Returns the server's receipt (the workout id).  `client` may be any
    httpx-compatible client, which is how tests count requests; by default
    one is built from the policy endpoint.
    """
    payload = {
        "user_id": record["user_id"],
        "workout_id": record["workout_id"],
        "started_at": record["started_at"],
        "duration_s": record["duration_s"],
        "summary": record["summary"],
        "samples": [{"sensor": s, "offset_ms": o, "value": v}
                    for s, o, v in record["samples"]],
    }
    own = False
    if client is None:
        if not policy.endpoint:
            raise UploadFailed("no endpoint configured")
        client = httpx.Client(base_url=policy.endpoint, timeout=10.0)
        own = True
    try:
        try:
            resp = client.post(
                "/v1/workouts", json=payload,
                headers={"Authorization": f"Bearer {policy.auth_token}"})
        except Exception as exc:
            raise UploadFailed(str(exc)) from exc
    finally:
        if own:
            client.close()
    if resp.status_code in (200, 201):
        return resp.json()["workout_id"]
    if 400 <= resp.status_code < 500:
        raise UploadRejected(f"{resp.status_code}: {resp.text}")
    raise UploadFailed(f"status {resp.status_code}")


def format_status(summary: SessionSummary, template: str | None = None) -> str:
    """Render the share text for a summary, at most 280 characters.

    The default rendering is "Workout: <min> min, avg HR <bpm> bpm, <m> m",
    dropping the segments the session has no data for.  A custom template
    is formatted with duration_min, avg_hr_bpm, distance_m, strides_total
    and beats_total.
    """
    if template is not None:
        text = template.format(
            duration_min=summary.duration_s / 60.0,
            avg_hr_bpm=summary.avg_hr_bpm if summary.avg_hr_bpm is not None else 0,
            distance_m=summary.distance_m,
            strides_total=summary.strides_total,
            beats_total=summary.beats_total)
        return text[:280]
    text = f"Workout: {summary.duration_s / 60.0:.1f} min"
    if summary.avg_hr_bpm is not None:
        text += f", avg HR {summary.avg_hr_bpm:.0f} bpm"
        text += f", {summary.distance_m:.1f} m"
    elif summary.distance_m > 0:
        text += f", {summary.distance_m:.1f} m"
    return text[:280]


@dataclass
class GatewayConfig:
    sources: list = field(default_factory=list)
    policy: UploadPolicy = field(default_factory=UploadPolicy)
    user_id: str = ""
    session_dir: str = "sessions"


def load_gateway_config(path) -> GatewayConfig:
    """Read a session config: flat key=value lines, sources as
    source.<n>.<field> groups."""
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidConfig(f"expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    groups: dict[str, dict] = {}
    for key, value in kv.items():
        if key.startswith("source."):
            _, n, fieldname = key.split(".", 2)
            groups.setdefault(n, {})[fieldname] = value
    sources = []
    for n in sorted(groups, key=lambda s: (len(s), s)):
        g = groups[n]
        sources.append(SourceConfig(
            kind=g.get("kind", "file"),
            address=g.get("address", ""),
            protocol=g.get("protocol", "hxm"),
            reconnect_max_attempts=int(g.get("reconnect_max_attempts", 5)),
            reconnect_backoff_ms=int(g.get("reconnect_backoff_ms", 500))))
    policy = UploadPolicy(
        mode=kv.get("mode", "manual"),
        period_s=float(kv.get("period_s", 60.0)),
        endpoint=kv.get("endpoint", ""),
        auth_token=kv.get("auth_token", ""))
    return GatewayConfig(sources=sources, policy=policy,
                         user_id=kv.get("user_id", ""),
                         session_dir=kv.get("session_dir", "sessions"))
