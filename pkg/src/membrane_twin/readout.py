"""Digitisation, preprocessing, normalisation and the sensor wire protocol.

Frame layout on the wire (all integers little-endian)::

    offset  size  field
    0       2     magic 0xA5 0x5A
    2       1     version (1)
    3       1     p, number of photodiodes
    4       1     l, number of LEDs
    5       4     frame_index (u32)
    9       8     t_start_us (u64)
    17      3*n   n = p*l + p samples, u24 each: codes (LED-major), then dark row
    17+3n   2     CRC-16/CCITT-FALSE over every preceding byte

Codes are stored LED-major: the ``p`` readings taken while LED 1 is lit come
first, which is also the order of the flattened feature vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .optics import OpticsParams

ADC_BITS = 24
ADC_MAX = (1 << ADC_BITS) - 1
DISCARD_BITS = 7
MAGIC = b"\xa5\x5a"
WIRE_VERSION = 1
HEADER = struct.Struct("<2sBBBIQ")
BAUD = 2_000_000
BITS_PER_BYTE = 10  # 8N1 UART framing
STD_FLOOR = 1e-12


class FrameError(ValueError):
    pass


class BadMagic(FrameError):
    pass


class BadCRC(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class NormSourceMismatch(ValueError):
    pass


@dataclass
class MeasurementFrame:
    codes: np.ndarray              # (p, l) unsigned 24-bit ADC codes
    dark: np.ndarray               # (p,) codes with every LED off
    frame_index: int = 0
    t_start: int = 0               # microseconds

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.dark = np.asarray(self.dark, dtype=np.int64).ravel()
        if self.codes.ndim != 2 or self.dark.shape != (self.codes.shape[0],):
            raise FrameError("codes must be (p, l) with a length-p dark row")
        for arr in (self.codes, self.dark):
            if arr.size and (arr.min() < 0 or arr.max() > ADC_MAX):
                raise FrameError("codes must fit in 24 bits")

    def __eq__(self, other):
        if not isinstance(other, MeasurementFrame):
            return NotImplemented
        return (self.frame_index == other.frame_index and self.t_start == other.t_start
                and np.array_equal(self.codes, other.codes) and np.array_equal(self.dark, other.dark))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    norm_source: str


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source: str
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = self.std <= STD_FLOOR
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        self.std = np.maximum(self.std, STD_FLOOR)

    def to_json(self) -> str:
        return json.dumps({
            "source": self.source,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "degenerate": self.degenerate.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        d = json.loads(text)
        return cls(np.array(d["mean"]), np.array(d["std"]), d["source"], np.array(d["degenerate"], dtype=bool))


# -- digitisation ------------------------------------------------------------


def digitize(analog, params: OpticsParams, rng_seed, frame_index: int = 0, t_start: int = 0) -> MeasurementFrame:
    """Noisy 24-bit conversion of a ``(p, l)`` analog scan.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    analog = np.asarray(analog, dtype=np.float64)
    if np.any(analog < 0):
        raise ValueError("negative analog input")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    fs = params.full_scale
    sigma = params.noise * fs
    dark_level = params.dark * fs
    p = analog.shape[0]
    noise = rng.standard_normal(analog.size + p) * sigma
    lit = analog + dark_level + noise[:analog.size].reshape(analog.shape)
    off = dark_level + noise[analog.size:]

    def quantise(v):
        v = np.clip(v, 0.0, fs)
        return np.floor(v / fs * ADC_MAX).astype(np.int64)

    return MeasurementFrame(quantise(lit), quantise(off), frame_index, t_start)


def preprocess(frame: MeasurementFrame) -> np.ndarray:
    """Dark-offset subtraction followed by dropping the 7 low bits."""
    c = np.maximum(frame.codes - frame.dark[:, None], 0)
    return (c >> DISCARD_BITS) << DISCARD_BITS


def flatten(matrix) -> np.ndarray:
    """LED-major flattening: channel ``p*i + j`` is PD ``j`` under LED ``i``."""
    return np.asarray(matrix, dtype=np.float64).T.reshape(-1)


def unflatten(vector, n_pds: int) -> np.ndarray:
    return np.asarray(vector).reshape(-1, n_pds).T


def fit_norm(matrices, source: str) -> NormStats:
    """Channel statistics over training matrices ``(n, p, l)`` or vectors ``(n, p*l)``."""
    arr = np.asarray(matrices, dtype=np.float64)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 training frames to fit normalisation")
    X = arr.transpose(0, 2, 1).reshape(arr.shape[0], -1) if arr.ndim == 3 else arr
    return NormStats(X.mean(axis=0), X.std(axis=0), source)


def normalize_array(x, stats: NormStats) -> np.ndarray:
    """Normalise already-flattened feature rows ``(n, p*l)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = (x - stats.mean) / stats.std
    out[:, stats.degenerate] = 0.0
    return out


def normalize(matrix, stats: NormStats) -> FeatureVector:
    """Flatten one ``(p, l)`` matrix and normalise it with training statistics."""
    v = flatten(matrix)
    return FeatureVector(normalize_array(v, stats)[0], stats.source)


def denormalize(vector, stats: NormStats) -> np.ndarray:
    values = vector.values if isinstance(vector, FeatureVector) else vector
    if isinstance(vector, FeatureVector) and vector.norm_source != stats.source:
        raise NormSourceMismatch(f"{vector.norm_source!r} != {stats.source!r}")
    return np.asarray(values) * stats.std + stats.mean


# -- timing ------------------------------------------------------------------


def frame_bytes(n_pds: int, n_leds: int) -> int:
    return HEADER.size + 3 * (n_pds * n_leds + n_pds) + 2


def uart_transfer_us(n_bytes: int, baud: float = BAUD, bits_per_byte: int = BITS_PER_BYTE) -> float:
    return n_bytes * bits_per_byte / baud * 1e6


@dataclass
class ScheduleReport:
    slots: list                   # (label, start_us, duration_us)
    active_us: float
    overhead_us: float
    period_us: float
    max_rate_hz: float
    target_hz: float | None
    feasible: bool


def schedule(n_leds: int, strobe_us: float = 180.0, dark_slots: int = 1,
             overhead_us: float = 5500.0, target_hz: float | None = 90.0) -> ScheduleReport:
    """Time-division multiplexed frame timing.

    One strobe slot per LED followed by ``dark_slots`` all-off slots; the
    overhead covers UART transfer and housekeeping.

    Raises:
        ValueError: if ``target_hz`` cannot be met.
    """
    if n_leds < 1:
        raise ValueError("need at least one LED")
    slots = [(f"led{i + 1}", i * strobe_us, strobe_us) for i in range(n_leds)]
    slots += [(f"dark{k + 1}", (n_leds + k) * strobe_us, strobe_us) for k in range(dark_slots)]
    active = (n_leds + dark_slots) * strobe_us
    period = active + overhead_us
    rate = 1e6 / period
    feasible = target_hz is None or period <= 1e6 / target_hz + 1e-9
    if not feasible:
        raise ValueError(f"{target_hz} Hz infeasible: frame period {period:.1f} us "
                         f"exceeds {1e6 / target_hz:.1f} us")
    return ScheduleReport(slots, active, overhead_us, period, rate, target_hz, feasible)


# -- wire codec --------------------------------------------------------------


def _crc_table():
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
        table.append(crc & 0xFFFF)
    return table


_CRC_TABLE = _crc_table()


def crc16_ccitt_false(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout."""
    crc = 0xFFFF
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[(crc >> 8) ^ b]
    return crc


def encode_frame(frame: MeasurementFrame) -> bytes:
    p, l = frame.codes.shape
    if p > 255 or l > 255:
        raise FrameError("p and l must fit in one byte")
    samples = np.concatenate([frame.codes.T.ravel(), frame.dark]).astype("<u4")
    packed = samples.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    body = HEADER.pack(MAGIC, WIRE_VERSION, p, l, frame.frame_index, frame.t_start) + packed
    return body + struct.pack("<H", crc16_ccitt_false(body))


def decode_frame(data: bytes) -> MeasurementFrame:
    frame, used = _decode_one(memoryview(data), 0)
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return frame


def _decode_one(buf, offset):
    if len(buf) - offset < HEADER.size:
        raise TruncatedFrame("buffer shorter than frame header")
    magic, version, p, l, index, t0 = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic).hex()}")
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported wire version {version}")
    n = p * l + p
    end = offset + frame_bytes(p, l)
    if len(buf) < end:
        raise TruncatedFrame(f"need {end - offset} bytes, have {len(buf) - offset}")
    body = bytes(buf[offset:end - 2])
    (crc,) = struct.unpack_from("<H", buf, end - 2)
    if crc16_ccitt_false(body) != crc:
        raise BadCRC(f"CRC mismatch at frame offset {offset}")
    raw = np.frombuffer(body, dtype=np.uint8, offset=HEADER.size).reshape(n, 3).astype(np.int64)
    samples = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
    codes = samples[:p * l].reshape(l, p).T
    return MeasurementFrame(codes, samples[p * l:], index, t0), end


def iter_frames(data: bytes):
    """Decode a concatenation of encoded frames."""
    buf = memoryview(data)
    offset = 0
    while offset < len(buf):
        frame, offset = _decode_one(buf, offset)
        yield frame


# -- stream alignment --------------------------------------------------------


def align_streams(sensor_times, truth_times):
    """Pair each truth frame with the latest sensor frame at or before it.

    Returns:
        list of ``(truth_index, sensor_index)``; truth frames older than every
        sensor frame are dropped.
    """
    s = np.asarray(sensor_times, dtype=np.float64)
    t = np.asarray(truth_times, dtype=np.float64)
    if s.size == 0 or t.size == 0:
        raise ValueError("empty stream")
    if np.any(np.diff(s) < 0) or np.any(np.diff(t) < 0):
        raise ValueError("timestamps must be monotone")
    idx = np.searchsorted(s, t, side="right") - 1
    return [(int(k), int(i)) for k, i in enumerate(idx) if i >= 0]


def repeatability_band(frames, full_scale_codes: int = ADC_MAX) -> np.ndarray:
    """Per-sample deviation from each channel's median, as a fraction of full scale."""
    codes = np.stack([f.codes for f in frames]).astype(np.float64)
    med = np.median(codes, axis=0)
    return (codes - med) / full_scale_codes


def sigma_for_band(band: float = 0.0035, coverage: float = 0.99) -> float:
    """Noise sigma (fraction of full scale) putting ``coverage`` of samples inside ``+-band``."""
    return band / norm.ppf(0.5 + coverage / 2)

