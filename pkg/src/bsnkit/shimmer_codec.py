"""Codec for the wearable EMG node's 14-byte packet.

Packet layout:

    offset  size  field
    0       1     BOF (0x02)
    1       1     sensor id
    2       1     data type (0x45 = EMG)
    3       1     sequence number, wraps at 255
    4       2     capture timestamp, ms mod 65536, little-endian
    6       1     EMG payload length in bytes (0 or 2)
    7       2     EMG sample, 12-bit ADC counts, little-endian
    9       2     battery millivolts, little-endian; 0 unless the
                  low-battery cutoff has tripped
    11      2     CRC-16/CCITT-FALSE over offsets 1-10, little-endian
    13      1     EOF (0x03)

The node samples at 500 Hz and emits one packet per sample.  Once the
supply drops below the 3 V regulator threshold it stops carrying EMG data
(`emg_len` 0, sample bytes zero) and reports the voltage instead.
"""

import struct
from dataclasses import dataclass

from .framing import (BadCrc, BadFrame, BadField, FramerState, InvalidField,
                      scan_frames)

BOF = 0x02
EOF = 0x03
FRAME_LEN = 14
DATA_TYPE_EMG = 0x45

SAMPLE_RATE_HZ = 500
ADC_MAX = 4095            # 12-bit converter
ADC_SPAN_MV = 3000.0      # full-scale input span, bipolar about mid-rail
BATTERY_CUTOFF_MV = 3000  # regulator threshold below which EMG stops

_CONTENT = struct.Struct("<BBBHBHH")  # offsets 1..10, the CRC-covered span
assert _CONTENT.size == 10


def _crc16_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021 if crc & 0x8000 else crc << 1) & 0xFFFF
        table.append(crc)
    return table


_CRC16_TABLE = _crc16_table()


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: polynomial 0x1021, initial value 0xFFFF, no
    reflection, no final xor.  Empty input yields 0xFFFF."""
    crc = 0xFFFF
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC16_TABLE[(crc >> 8) ^ b]
    return crc


@dataclass(slots=True)
class ShimmerPacket:
    sensor_id: int = 0
    data_type: int = DATA_TYPE_EMG
    sequence: int = 0        # wraps at 255
    timestamp_ms: int = 0    # ms mod 65536
    emg_len: int = 0         # 0 or 2
    emg_raw: int = 0         # ADC counts, 0..4095
    battery_mv: int = 0      # 0 = healthy, else the sagging voltage


def _check_fields(pkt: ShimmerPacket, exc: type) -> None:
    if pkt.emg_len > 2:
        raise exc(f"emg_len {pkt.emg_len} exceeds 2")
    if pkt.emg_raw > ADC_MAX:
        raise exc(f"emg_raw {pkt.emg_raw} exceeds {ADC_MAX}")
    if pkt.battery_mv != 0 and pkt.battery_mv > BATTERY_CUTOFF_MV:
        raise exc(f"battery_mv {pkt.battery_mv} above the reporting threshold")


def encode_shimmer(pkt: ShimmerPacket) -> bytes:
    """Serialize a packet to its 14-byte frame."""
    for name, value, top in (
        ("sensor_id", pkt.sensor_id, 0xFF),
        ("data_type", pkt.data_type, 0xFF),
        ("sequence", pkt.sequence, 0xFF),
        ("timestamp_ms", pkt.timestamp_ms, 0xFFFF),
        ("emg_len", pkt.emg_len, 0xFF),
        ("emg_raw", pkt.emg_raw, 0xFFFF),
        ("battery_mv", pkt.battery_mv, 0xFFFF),
    ):
        if not 0 <= value <= top:
            raise InvalidField(f"{name} {value} does not fit the wire field")
    _check_fields(pkt, InvalidField)
    content = _CONTENT.pack(pkt.sensor_id, pkt.data_type, pkt.sequence,
                            pkt.timestamp_ms, pkt.emg_len, pkt.emg_raw,
                            pkt.battery_mv)
    return bytes((BOF,)) + content + struct.pack("<H", crc16(content)) + bytes((EOF,))


def decode_shimmer(frame: bytes) -> ShimmerPacket:
    """Parse one candidate packet, rejecting rather than clamping bad input."""
    if len(frame) != FRAME_LEN:
        raise BadFrame(f"expected {FRAME_LEN} bytes, got {len(frame)}")
    if frame[0] != BOF or frame[-1] != EOF:
        raise BadFrame("frame markers missing")
    content = frame[1:11]
    (stored,) = struct.unpack("<H", frame[11:13])
    if crc16(content) != stored:
        raise BadCrc(f"crc mismatch, got 0x{stored:04x}")
    fields = _CONTENT.unpack(content)
    pkt = ShimmerPacket(sensor_id=fields[0], data_type=fields[1],
                        sequence=fields[2], timestamp_ms=fields[3],
                        emg_len=fields[4], emg_raw=fields[5],
                        battery_mv=fields[6])
    _check_fields(pkt, BadField)
    return pkt


def scan_shimmer(state: FramerState, chunk: bytes) -> tuple[list[ShimmerPacket], FramerState]:
    """Advance the framer over a chunk of the node's stream."""
    return scan_frames(state, chunk, FRAME_LEN, decode_shimmer), state


def emg_mv(emg_raw: int, adc_span_mv: float = ADC_SPAN_MV) -> float:
    """Convert ADC counts to millivolts about the mid-rail reference."""
    if not 0 <= emg_raw <= ADC_MAX:
        raise InvalidField(f"emg_raw {emg_raw} exceeds {ADC_MAX}")
    return (emg_raw / ADC_MAX - 0.5) * adc_span_mv


def emg_raw_from_mv(mv: float, adc_span_mv: float = ADC_SPAN_MV) -> int:
    """Quantize a millivolt value to ADC counts, saturating at the rails."""
    raw = round((mv / adc_span_mv + 0.5) * ADC_MAX)
    return min(max(raw, 0), ADC_MAX)
