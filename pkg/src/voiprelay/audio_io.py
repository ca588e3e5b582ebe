"""PCM clips, WAV files, canonical-format conversion and media framing.

Canonical form is 16-bit signed little-endian, mono, 16 kHz: the format
ffmpeg produces with ``-acodec pcm_s16le -ac 1 -ar 16000``.
"""

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (FrameTooLarge, IoFailure, MixedStreams, NotFound, NotRiff,
                     UnsupportedEncoding)

CANONICAL_RATE = 16000
CANONICAL_CHANNELS = 1
S16LE = "S16LE"
BYTES_PER_SAMPLE = 2

DEFAULT_FRAME_MS = 20
MAX_PAYLOAD_BYTES = 1200

_U32 = 0xFFFFFFFF


class AudioClip:
    """Immutable block of interleaved 16-bit samples."""

    __slots__ = ("sample_rate", "channels", "sample_format", "samples")

    def __init__(self, samples, sample_rate=CANONICAL_RATE, channels=CANONICAL_CHANNELS,
                 sample_format=S16LE):
        if sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if channels <= 0:
            raise ValueError("channels must be positive")
        if sample_format != S16LE:
            raise ValueError(f"unsupported sample format {sample_format}")
        arr = np.array(samples, dtype=np.int16).reshape(-1)
        if arr.size % channels:
            raise ValueError("sample count is not a multiple of the channel count")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(sample_rate))
        object.__setattr__(self, "channels", int(channels))
        object.__setattr__(self, "sample_format", sample_format)

    def __setattr__(self, name, value):
        raise AttributeError("AudioClip is immutable")

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return (self.sample_rate == other.sample_rate and self.channels == other.channels
                and np.array_equal(self.samples, other.samples))

    __hash__ = None

    def __repr__(self):
        return (f"AudioClip(rate={self.sample_rate}, channels={self.channels}, "
                f"frames={self.num_frames})")

    @property
    def num_frames(self):
        return self.samples.size // self.channels

    @property
    def duration_s(self):
        return self.num_frames / self.sample_rate

    @property
    def is_canonical(self):
        return self.sample_rate == CANONICAL_RATE and self.channels == CANONICAL_CHANNELS

    def as_channels(self):
        """Samples as a ``(frames, channels)`` array."""
        return self.samples.reshape(-1, self.channels)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_int16(x):
    return np.clip(_round_half_away(x), -32768, 32767).astype(np.int16)


def read_wav(path):
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            rate = w.getframerate()
            channels = w.getnchannels()
            width = w.getsampwidth()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        msg = str(e)
        if "RIFF" in msg or "WAVE" in msg:
            raise NotRiff(f"{path}: {msg}") from None
        if "unknown format" in msg:
            raise UnsupportedEncoding(f"{path}: {msg}") from None
        raise NotRiff(f"{path}: {msg}") from None
    except EOFError:
        raise NotRiff(f"{path}: truncated header") from None
    return AudioClip(_decode_pcm(raw, width), rate, channels)


def _decode_pcm(raw, width):
    if width == 2:
        return np.frombuffer(raw, dtype="<i2")
    if width == 1:
        # 8-bit WAV is unsigned
        return (np.frombuffer(raw, dtype=np.uint8).astype(np.int16) - 128) << 8
    if width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        return b[:, 2].view(np.int8).astype(np.int16) << 8 | b[:, 1].astype(np.int16)
    if width == 4:
        return (np.frombuffer(raw, dtype="<i4") >> 16).astype(np.int16)
    raise UnsupportedEncoding(f"unsupported PCM sample width {width}")


def write_wav(clip, path):
    path = Path(path)
    try:
        with wave.open(str(path), "wb") as w:
            w.setnchannels(clip.channels)
            w.setsampwidth(BYTES_PER_SAMPLE)
            w.setframerate(clip.sample_rate)
            w.writeframes(clip.samples.astype("<i2").tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def canonicalize(clip):
    """Downmix to mono and resample to 16 kHz.

    Downmix is the arithmetic channel mean; resampling is linear
    interpolation.  Both round half away from zero.  A canonical clip is
    returned as-is.
    """
    if clip.is_canonical:
        return clip
    mono = clip.as_channels().astype(np.float64)
    if clip.channels > 1:
        mono = _round_half_away(mono.mean(axis=1))
    else:
        mono = mono[:, 0]
    if clip.sample_rate != CANONICAL_RATE:
        mono = _resample_linear(mono, clip.sample_rate, CANONICAL_RATE)
    return AudioClip(_to_int16(mono), CANONICAL_RATE, 1)


def _resample_linear(x, src_rate, dst_rate):
    n_out = int(_round_half_away(np.float64(x.size) * dst_rate / src_rate))
    if x.size == 0 or n_out == 0:
        return np.zeros(0)
    pos = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(pos, np.arange(x.size), x)


@dataclass(frozen=True)
class MediaPacket:
    seq: int
    timestamp_samples: int
    stream_id: int
    payload: bytes

    HEADER = struct.Struct("!III")

    def __post_init__(self):
        if len(self.payload) % 2:
            raise ValueError("payload must hold whole 16-bit samples")
        if len(self.payload) > MAX_PAYLOAD_BYTES:
            raise FrameTooLarge(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD_BYTES}")

    def to_bytes(self):
        return self.HEADER.pack(self.seq & _U32, self.timestamp_samples & _U32,
                                self.stream_id & _U32) + self.payload

    @classmethod
    def from_bytes(cls, data):
        seq, ts, sid = cls.HEADER.unpack_from(data)
        return cls(seq, ts, sid, bytes(data[cls.HEADER.size:]))


def samples_per_frame(frame_ms, sample_rate=CANONICAL_RATE):
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    n = sample_rate * frame_ms // 1000
    if n * BYTES_PER_SAMPLE > MAX_PAYLOAD_BYTES:
        raise FrameTooLarge(f"{frame_ms} ms frame is {n * BYTES_PER_SAMPLE} bytes, "
                            f"over the {MAX_PAYLOAD_BYTES}-byte cap")
    return n


def frame_count(duration_ms, frame_ms):
    return math.ceil(duration_ms / frame_ms)


def packetize(clip, frame_ms=DEFAULT_FRAME_MS, stream_id=0):
    if not clip.is_canonical:
        raise ValueError("packetize expects a canonical clip")
    spf = samples_per_frame(frame_ms)
    n = -(-clip.samples.size // spf)
    padded = np.zeros(n * spf, dtype="<i2")
    padded[:clip.samples.size] = clip.samples
    frames = padded.reshape(n, spf) if n else padded.reshape(0, spf)
    return [MediaPacket(k, k * spf, stream_id, frames[k].tobytes()) for k in range(n)]


def depacketize(packets, expected_frames, frame_ms=DEFAULT_FRAME_MS):
    """Reassemble by sequence number; gaps are zero-filled.

    Duplicates keep the first arrival and sequence numbers at or beyond
    ``expected_frames`` are ignored.
    """
    spf = samples_per_frame(frame_ms)
    out = np.zeros(expected_frames * spf, dtype=np.int16)
    stream = None
    seen = set()
    for p in packets:
        if stream is None:
            stream = p.stream_id
        elif p.stream_id != stream:
            raise MixedStreams(f"packets from streams {stream} and {p.stream_id}")
        if p.seq >= expected_frames or p.seq in seen:
            continue
        seen.add(p.seq)
        data = np.frombuffer(p.payload, dtype="<i2")[:spf]
        out[p.seq * spf:p.seq * spf + data.size] = data
    return AudioClip(out, CANONICAL_RATE, 1)
