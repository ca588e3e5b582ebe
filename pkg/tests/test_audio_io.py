import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voiprelay.audio_io import (AudioClip, MediaPacket, canonicalize, depacketize,
                                frame_count, packetize, read_wav, samples_per_frame, write_wav)
from voiprelay.errors import (FrameTooLarge, MixedStreams, NotFound, NotRiff,
                              UnsupportedEncoding)

from conftest import tone


def test_read_16s_file(tmp_path):
    p = tmp_path / "a.wav"
    write_wav(AudioClip(tone(300, 16.0), 16000, 1), p)
    clip = read_wav(p)
    assert clip.samples.size == 256_000
    assert (clip.sample_rate, clip.channels, clip.sample_format) == (16000, 1, "S16LE")


def test_empty_wav(tmp_path):
    p = tmp_path / "empty.wav"
    write_wav(AudioClip([], 16000, 1), p)
    assert p.stat().st_size == 44
    clip = read_wav(p)
    assert clip.samples.size == 0 and clip.sample_rate == 16000 and clip.channels == 1


def test_data_chunk_size(tmp_path):
    p = tmp_path / "a.wav"
    write_wav(AudioClip(np.zeros(256_000, np.int16)), p)
    raw = p.read_bytes()
    i = raw.index(b"data")
    assert struct.unpack("<I", raw[i + 4:i + 8])[0] == 512_000


def _wav_header(fmt_tag, rate=16000, channels=1, bits=16, data=b""):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_read_errors(tmp_path):
    with pytest.raises(NotFound):
        read_wav(tmp_path / "missing.wav")
    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"this is not a wave file at all")
    with pytest.raises(NotRiff):
        read_wav(junk)
    mp3 = tmp_path / "mp3.wav"
    mp3.write_bytes(_wav_header(0x55, data=b"\0" * 10))  # MPEG layer 3 tag
    with pytest.raises(UnsupportedEncoding):
        read_wav(mp3)


def test_read_8bit_and_stereo(tmp_path):
    p = tmp_path / "u8.wav"
    p.write_bytes(_wav_header(1, rate=8000, channels=2, bits=8, data=bytes([128, 255, 0, 128])))
    clip = read_wav(p)
    assert clip.sample_rate == 8000 and clip.channels == 2
    assert clip.samples.tolist() == [0, 127 * 256, -128 * 256, 0]


def test_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    clip = AudioClip(rng.integers(-32768, 32768, 4000), 16000, 1)
    write_wav(clip, tmp_path / "x.wav")
    assert read_wav(tmp_path / "x.wav") == clip
    stereo = AudioClip(rng.integers(-32768, 32768, 4000), 44100, 2)
    write_wav(stereo, tmp_path / "s.wav")
    assert read_wav(tmp_path / "s.wav") == stereo


def test_clip_invariants():
    with pytest.raises(ValueError):
        AudioClip([1, 2, 3], 16000, 2)
    with pytest.raises(ValueError):
        AudioClip([1, 2], 0, 1)
    clip = AudioClip([1, 2])
    with pytest.raises(ValueError):
        clip.samples[0] = 5


def test_canonicalize_identity_and_downmix():
    clip = AudioClip(tone(300, 0.1))
    assert canonicalize(clip) == clip
    mono = tone(300, 0.1)
    stereo = AudioClip(np.repeat(mono, 2), 16000, 2)
    assert canonicalize(stereo) == AudioClip(mono)


def test_downmix_rounds_half_away_from_zero():
    stereo = AudioClip([1, 2, -1, -2, 3, 4], 16000, 2)
    assert canonicalize(stereo).samples.tolist() == [2, -2, 4]


def test_upsample_preserves_tone():
    n = 8000
    clip = AudioClip(tone(440, 1.0, rate=8000), 8000, 1)
    out = canonicalize(clip)
    assert out.sample_rate == 16000 and out.channels == 1
    assert out.samples.size == 2 * n
    spectrum = np.abs(np.fft.rfft(out.samples.astype(float)))
    peak_hz = np.argmax(spectrum) * 16000 / out.samples.size
    assert peak_hz == 440.0


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([8000, 11025, 22050, 44100, 48000]), st.integers(1, 2),
       st.integers(0, 3000), st.integers(0, 2**32 - 1))
def test_canonicalize_duration_and_idempotence(rate, channels, frames, seed):
    rng = np.random.default_rng(seed)
    clip = AudioClip(rng.integers(-32768, 32768, frames * channels), rate, channels)
    once = canonicalize(clip)
    assert once.is_canonical
    # duration preserved within one output sample
    assert abs(once.samples.size - frames * 16000 / rate) <= 1
    assert canonicalize(once) == once


def test_packetize_16s():
    packets = packetize(AudioClip(tone(300, 16.0)), 20)
    assert len(packets) == 800
    assert all(len(p.payload) == 640 for p in packets)
    assert [p.seq for p in packets] == list(range(800))
    assert all(p.timestamp_samples == p.seq * 320 for p in packets)


def test_packetize_pads_single_sample():
    packets = packetize(AudioClip([1234]), 20)
    assert len(packets) == 1
    assert len(packets[0].payload) == 640
    assert np.frombuffer(packets[0].payload, "<i2").tolist() == [1234] + [0] * 319


def test_frame_too_large():
    assert samples_per_frame(20) == 320
    with pytest.raises(FrameTooLarge):
        packetize(AudioClip(tone(300, 0.1)), 60)
    with pytest.raises(FrameTooLarge):
        MediaPacket(0, 0, 0, bytes(1202))


def test_packet_wire_round_trip():
    p = MediaPacket(7, 7 * 320, 0xDEADBEEF, bytes(range(64)))
    assert MediaPacket.from_bytes(p.to_bytes()) == p
    with pytest.raises(ValueError):
        MediaPacket(0, 0, 0, b"\x01")


def test_depacketize_lossless_gap_and_total_loss():
    clip = AudioClip(tone(300, 16.0))
    packets = packetize(clip, 20)
    assert depacketize(packets, 800, 20) == clip
    missing = [p for p in packets if p.seq != 5]
    out = depacketize(missing, 800, 20).samples
    assert not out[5 * 320:6 * 320].any()
    assert np.array_equal(out[:5 * 320], clip.samples[:5 * 320])
    assert np.array_equal(out[6 * 320:], clip.samples[6 * 320:])
    empty = depacketize([], 800, 20)
    assert empty.samples.size == 256_000 and not empty.samples.any()


def test_depacketize_duplicates_late_and_mixed():
    a = MediaPacket(0, 0, 1, np.full(320, 5, "<i2").tobytes())
    b = MediaPacket(0, 0, 1, np.full(320, 9, "<i2").tobytes())
    late = MediaPacket(3, 960, 1, np.full(320, 7, "<i2").tobytes())
    out = depacketize([a, b, late], 2, 20).samples
    assert out.size == 640 and out[:320].tolist() == [5] * 320 and not out[320:].any()
    with pytest.raises(MixedStreams):
        depacketize([a, MediaPacket(1, 320, 2, bytes(640))], 2, 20)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20_000), st.sampled_from([10, 20, 30]), st.integers(0, 2**32 - 1))
def test_packetize_depacketize_inverse(n, frame_ms, seed):
    rng = np.random.default_rng(seed)
    clip = AudioClip(rng.integers(-32768, 32768, n))
    packets = packetize(clip, frame_ms)
    assert len(packets) == frame_count(n * 1000 / 16000, frame_ms)
    rng.shuffle(packets)
    out = depacketize(packets, len(packets), frame_ms)
    assert np.array_equal(out.samples[:n], clip.samples)
    assert not out.samples[n:].any()
