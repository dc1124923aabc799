"""Codec for the chest strap's standard 57-byte data message.

Frame layout:

    offset  size  field
    0       1     STX (0x02)
    1       1     message id (0x26)
    2       1     DLC, payload byte count (always 52)
    3       52    payload, see below
    55      1     CRC-8 of the payload
    56      1     ETX (0x03)

Payload layout, multi-byte fields little-endian:

    firmware_id u16, firmware_version u16, hardware_id u16,
    hardware_version u16, battery_charge u8, heart_rate u8,
    heart_beat_number u8, 15 x beat timestamp u16 (ms, newest first),
    3 reserved bytes, distance u16 (1/16 m), speed u16 (1/256 m/s),
    strides u8, 3 reserved bytes.

The strap streams one message per second over a simplex serial link, so a
receiver can join at any byte offset; `scan` resynchronizes on the STX
marker and drops anything that fails the CRC.  Reserved bytes are written
as zero and ignored on decode, but the CRC covers them.
"""

import struct
from dataclasses import dataclass

from .framing import (BadCrc, BadFrame, BadField, FramerState, InvalidField,
                      scan_frames)

STX = 0x02
ETX = 0x03
MSG_ID = 0x26
PAYLOAD_LEN = 52
FRAME_LEN = 57

TIMESTAMP_SLOTS = 15
TIMESTAMP_MOD = 65536  # beat timestamps wrap at 16 bits of milliseconds

HEART_RATE_MIN = 30
HEART_RATE_MAX = 240
SPEED_RAW_MAX = 4095  # 15.996 m/s in 1/256 m/s steps

_PAYLOAD = struct.Struct("<4H3B15H3xHHB3x")
assert _PAYLOAD.size == PAYLOAD_LEN


def _crc8_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ 0x8C if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC8_TABLE = _crc8_table()


def crc8(data: bytes) -> int:
    """CRC-8 over `data`: reflected polynomial 0x31 (table constant 0x8C),
    initial value 0, no final xor.  Empty input yields 0."""
    crc = 0
    for b in data:
        crc = _CRC8_TABLE[crc ^ b]
    return crc


@dataclass(slots=True)
class HxmMessage:
    firmware_id: int = 0
    firmware_version: int = 0
    hardware_id: int = 0
    hardware_version: int = 0
    battery_charge: int = 0      # percent
    heart_rate: int = 0          # bpm, 0 = no beat detected
    heart_beat_number: int = 0   # rolls over at 255
    beat_timestamps: tuple = (0,) * TIMESTAMP_SLOTS  # ms mod 65536, newest first
    distance_raw: int = 0        # sixteenths of a meter, wraps every 256 m
    speed_raw: int = 0           # 1/256 m/s steps
    strides: int = 0             # rolls over at 255


def _check_fields(msg: HxmMessage, exc: type) -> None:
    hr = msg.heart_rate
    if hr != 0 and not HEART_RATE_MIN <= hr <= HEART_RATE_MAX:
        raise exc(f"heart_rate {hr} outside 0 or {HEART_RATE_MIN}-{HEART_RATE_MAX}")
    if not 0 <= msg.speed_raw <= SPEED_RAW_MAX:
        raise exc(f"speed_raw {msg.speed_raw} exceeds {SPEED_RAW_MAX}")


def _check_widths(msg: HxmMessage) -> None:
    for name, value, top in (
        ("firmware_id", msg.firmware_id, 0xFFFF),
        ("firmware_version", msg.firmware_version, 0xFFFF),
        ("hardware_id", msg.hardware_id, 0xFFFF),
        ("hardware_version", msg.hardware_version, 0xFFFF),
        ("battery_charge", msg.battery_charge, 0xFF),
        ("heart_rate", msg.heart_rate, 0xFF),
        ("heart_beat_number", msg.heart_beat_number, 0xFF),
        ("distance_raw", msg.distance_raw, 0xFFFF),
        ("speed_raw", msg.speed_raw, 0xFFFF),
        ("strides", msg.strides, 0xFF),
    ):
        if not 0 <= value <= top:
            raise InvalidField(f"{name} {value} does not fit the wire field")
    if len(msg.beat_timestamps) != TIMESTAMP_SLOTS:
        raise InvalidField("beat_timestamps must hold exactly 15 entries")
    for ts in msg.beat_timestamps:
        if not 0 <= ts <= 0xFFFF:
            raise InvalidField(f"beat timestamp {ts} does not fit 16 bits")


def encode_hxm(msg: HxmMessage) -> bytes:
    """Serialize a message to its canonical 57-byte frame."""
    _check_widths(msg)
    _check_fields(msg, InvalidField)
    payload = _PAYLOAD.pack(
        msg.firmware_id, msg.firmware_version,
        msg.hardware_id, msg.hardware_version,
        msg.battery_charge, msg.heart_rate, msg.heart_beat_number,
        *msg.beat_timestamps,
        msg.distance_raw, msg.speed_raw, msg.strides)
    return bytes((STX, MSG_ID, PAYLOAD_LEN)) + payload + bytes((crc8(payload), ETX))


def decode_hxm(frame: bytes) -> HxmMessage:
    """Parse one candidate frame, rejecting rather than clamping bad input."""
    if len(frame) != FRAME_LEN:
        raise BadFrame(f"expected {FRAME_LEN} bytes, got {len(frame)}")
    if frame[0] != STX or frame[-1] != ETX:
        raise BadFrame("frame markers missing")
    if frame[1] != MSG_ID:
        raise BadFrame(f"unexpected message id 0x{frame[1]:02x}")
    if frame[2] != PAYLOAD_LEN:
        raise BadFrame(f"unexpected DLC {frame[2]}")
    payload = frame[3:3 + PAYLOAD_LEN]
    if crc8(payload) != frame[55]:
        raise BadCrc(f"crc mismatch, got 0x{frame[55]:02x}")
    fields = _PAYLOAD.unpack(payload)
    msg = HxmMessage(
        firmware_id=fields[0], firmware_version=fields[1],
        hardware_id=fields[2], hardware_version=fields[3],
        battery_charge=fields[4], heart_rate=fields[5],
        heart_beat_number=fields[6],
        beat_timestamps=fields[7:22],
        distance_raw=fields[22], speed_raw=fields[23], strides=fields[24])
    _check_fields(msg, BadField)
    return msg


def scan(state: FramerState, chunk: bytes) -> tuple[list[HxmMessage], FramerState]:
    """Advance the framer over a chunk of the serial stream."""
    return scan_frames(state, chunk, FRAME_LEN, decode_hxm), state


def speed_mps(speed_raw: int) -> float:
    """Convert the wire speed field to meters per second."""
    if not 0 <= speed_raw <= SPEED_RAW_MAX:
        raise InvalidField(f"speed_raw {speed_raw} exceeds {SPEED_RAW_MAX}")
    return speed_raw / 256.0


def distance_m(distance_raw: int) -> float:
    """Convert the wire distance field to meters."""
    if not 0 <= distance_raw <= 0xFFFF:
        raise InvalidField("distance_raw does not fit 16 bits")
    return distance_raw / 16.0
