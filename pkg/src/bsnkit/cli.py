"""Command-line entry points for the whole pipeline.

    bsnkit simulate hxm|shimmer --profile P --duration S [--seed N]
                    --out STREAM [--truth TRUTH]
    bsnkit decode hxm|shimmer --in STREAM [--emit fields|summary]
    bsnkit emg analyze --in SERIES [--report FILE]
    bsnkit session --config FILE [--post]
    bsnkit serve --config FILE
    bsnkit share --workout ID --webhook URL --endpoint URL --token T --user U

Exit codes: 0 success, 1 validation or decoding failure, 2 file trouble,
3 network trouble.  Everything is deterministic for a given profile and
seed, so pipelines built from these commands are replayable.
"""

import argparse
import dataclasses
import json
import sys

import httpx

from . import hxm_codec, shimmer_codec
from .datastore import DatastoreError
from .emg_dsp import DspError, analyze, load_series
from .framing import FramerState
from .gateway import (GatewayError, SourceUnreachable, UploadFailed,
                      UploadPolicy, UploadRejected, format_status,
                      load_gateway_config, load_record, run_session, upload)
from .sensor_sim import (InvalidProfile, corrupt, gen_hxm, gen_shimmer,
                         load_emg_profile, load_hr_profile)
from .session_metrics import (DISTANCE_MOD, STRIDES_MOD, HrSessionState,
                              MetricsError, NoData, RolloverCounter)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_NETWORK = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsnkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic sensor stream")
    sim.add_argument("sensor", choices=("hxm", "shimmer"))
    sim.add_argument("--profile", required=True)
    sim.add_argument("--duration", type=float, required=True)
    sim.add_argument("--seed", type=int, default=None,
                     help="override the profile seed")
    sim.add_argument("--out", required=True)
    sim.add_argument("--truth", default=None,
                     help="also write the ground-truth JSON here")
    sim.add_argument("--drop-rate", type=float, default=0.0)
    sim.add_argument("--bitflip-rate", type=float, default=0.0)

    dec = sub.add_parser("decode", help="decode a captured stream")
    dec.add_argument("sensor", choices=("hxm", "shimmer"))
    dec.add_argument("--in", dest="infile", required=True)
    dec.add_argument("--emit", choices=("fields", "summary"), default="summary")

    emg = sub.add_parser("emg", help="EMG signal tools")
    emg_sub = emg.add_subparsers(dest="emg_command", required=True)
    ana = emg_sub.add_parser("analyze", help="report on a sample series file")
    ana.add_argument("--in", dest="infile", required=True)
    ana.add_argument("--report", default=None)

    ses = sub.add_parser("session", help="run a gateway session")
    ses.add_argument("--config", required=True)
    ses.add_argument("--post", action="store_true",
                     help="upload the session once it completes")

    srv = sub.add_parser("serve", help="run the ingestion service")
    srv.add_argument("--config", required=True)

    shr = sub.add_parser("share", help="push a workout status to a webhook")
    shr.add_argument("--workout", required=True)
    shr.add_argument("--webhook", required=True)
    shr.add_argument("--endpoint", required=True)
    shr.add_argument("--token", required=True)
    shr.add_argument("--user", required=True)
    return parser


def _cmd_simulate(args) -> int:
    if args.sensor == "hxm":
        profile = load_hr_profile(args.profile)
        if args.seed is not None:
            profile = dataclasses.replace(profile, seed=args.seed)
        stream, truth = gen_hxm(profile, args.duration)
        frame_len = hxm_codec.FRAME_LEN
    else:
        profile = load_emg_profile(args.profile)
        if args.seed is not None:
            profile = dataclasses.replace(profile, seed=args.seed)
        stream, truth = gen_shimmer(profile, args.duration)
        frame_len = shimmer_codec.FRAME_LEN
    if args.drop_rate or args.bitflip_rate:
        stream, _ = corrupt(stream, args.drop_rate, args.bitflip_rate,
                            seed=profile.seed, frame_len=frame_len)
    with open(args.out, "wb") as fh:
        fh.write(stream)
    if args.truth:
        with open(args.truth, "w") as fh:
            json.dump(truth.to_dict(), fh)
    print(f"wrote {len(stream)} bytes ({len(stream) // frame_len} frames) "
          f"to {args.out}")
    return EXIT_OK


def _scan_file(path: str, scanner):
    state = FramerState()
    messages = []
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(4096)
            if not chunk:
                break
            msgs, state = scanner(state, chunk)
            messages.extend(msgs)
    return messages, state


def _cmd_decode(args) -> int:
    if args.sensor == "hxm":
        messages, state = _scan_file(args.infile, hxm_codec.scan)
        if args.emit == "fields":
            for m in messages:
                ts = ",".join(str(t) for t in m.beat_timestamps)
                print(f"heart_rate={m.heart_rate} "
                      f"heart_beat_number={m.heart_beat_number} "
                      f"distance_raw={m.distance_raw} "
                      f"speed_raw={m.speed_raw} strides={m.strides} "
                      f"battery_charge={m.battery_charge} "
                      f"beat_timestamps={ts}")
        else:
            hr = HrSessionState()
            dist = RolloverCounter(DISTANCE_MOD)
            strides = RolloverCounter(STRIDES_MOD)
            for m in messages:
                hr.ingest(m)
                if m.distance_raw < DISTANCE_MOD:
                    dist.update(m.distance_raw)
                strides.update(m.strides)
            try:
                avg = f"{hr.average_hr():.2f}"
            except NoData:
                avg = ""
            print(f"messages={hr.messages_seen}")
            print(f"beats_total={hr.beats_total}")
            print(f"beats_unrecovered={hr.beats_unrecovered}")
            print(f"avg_hr_bpm={avg}")
            print(f"distance_m={dist.total / 16.0:.4f}")
            print(f"strides_total={strides.total}")
    else:
        messages, state = _scan_file(args.infile, shimmer_codec.scan_shimmer)
        if args.emit == "fields":
            for p in messages:
                print(f"sensor_id={p.sensor_id} data_type={p.data_type} "
                      f"sequence={p.sequence} timestamp_ms={p.timestamp_ms} "
                      f"emg_len={p.emg_len} emg_raw={p.emg_raw} "
                      f"battery_mv={p.battery_mv}")
        else:
            emg_count = sum(1 for p in messages if p.emg_len == 2)
            low = sum(1 for p in messages if p.battery_mv)
            print(f"packets={len(messages)}")
            print(f"emg_samples={emg_count}")
            print(f"low_battery_reports={low}")
    print(f"frames_rejected={state.frames_rejected}")
    print(f"bytes_skipped={state.bytes_skipped}")
    return EXIT_OK if state.frames_rejected == 0 else EXIT_INVALID


def _cmd_emg(args) -> int:
    series = load_series(args.infile)
    report = analyze(series)
    text = report.to_text()
    print(text)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def _cmd_session(args) -> int:
    config = load_gateway_config(args.config)
    if not config.user_id:
        print("config is missing user_id", file=sys.stderr)
        return EXIT_INVALID
    summary = run_session(config.sources, config.policy, config.user_id,
                          session_dir=config.session_dir)
    workout_id = summary.diagnostics.get("workout_id", "")
    print(f"workout_id={workout_id}")
    print(f"duration_s={summary.duration_s:.1f}")
    avg = "" if summary.avg_hr_bpm is None else f"{summary.avg_hr_bpm:.2f}"
    print(f"avg_hr_bpm={avg}")
    print(f"distance_m={summary.distance_m:.4f}")
    print(f"beats_total={summary.beats_total}")
    print(f"loss_fraction={summary.loss_fraction:.4f}")
    print(f"status={format_status(summary)}")
    if args.post:
        record = load_record(config.session_dir, workout_id)
        receipt = upload(record, config.policy)
        print(f"uploaded={receipt}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .ingest_service import build_from_config

    app, host, port = build_from_config(args.config)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return EXIT_OK


def _cmd_share(args) -> int:
    try:
        resp = httpx.post(
            f"{args.endpoint.rstrip('/')}/v1/share",
            json={"user_id": args.user, "workout_id": args.workout,
                  "target": args.webhook},
            headers={"Authorization": f"Bearer {args.token}"},
            timeout=10.0)
    except httpx.HTTPError as exc:
        print(f"share failed: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    if resp.status_code == 200:
        print(resp.json().get("text", ""))
        return EXIT_OK
    if resp.status_code == 502:
        print(f"delivery failed: {resp.json().get('detail')}", file=sys.stderr)
        return EXIT_NETWORK
    print(f"share rejected: {resp.status_code} {resp.text}", file=sys.stderr)
    return EXIT_INVALID


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "simulate": _cmd_simulate,
        "decode": _cmd_decode,
        "emg": _cmd_emg,
        "session": _cmd_session,
        "serve": _cmd_serve,
        "share": _cmd_share,
    }
    try:
        return handlers[args.command](args)
    except (InvalidProfile, DspError, MetricsError, DatastoreError,
            UploadRejected, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SourceUnreachable, UploadFailed) as exc:
        print(f"network failure: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except GatewayError as exc:
        print(f"gateway failure: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
