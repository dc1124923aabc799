"""Body sensor network toolkit: codecs, EMG analysis, session metrics,
simulation, gateway and ingestion service for a two-sensor workout rig.
"""

from .framing import BadCrc, BadFrame, BadField, CodecError, FramerState
from .hxm_codec import HxmMessage, decode_hxm, encode_hxm
from .shimmer_codec import ShimmerPacket, decode_shimmer, encode_shimmer
from .emg_dsp import EmgReport, SampleSeries, analyze
from .session_metrics import HrSessionState, RolloverCounter, SessionSummary, summarize
from .sensor_sim import EmgProfile, GroundTruth, HrProfile, gen_hxm, gen_shimmer

__version__ = "0.1.0"

__all__ = [
    "BadCrc", "BadFrame", "BadField", "CodecError", "FramerState",
    "HxmMessage", "decode_hxm", "encode_hxm",
    "ShimmerPacket", "decode_shimmer", "encode_shimmer",
    "EmgReport", "SampleSeries", "analyze",
    "HrSessionState", "RolloverCounter", "SessionSummary", "summarize",
    "EmgProfile", "GroundTruth", "HrProfile", "gen_hxm", "gen_shimmer",
    "__version__",
]
