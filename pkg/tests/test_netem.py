from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from voiprelay.audio_io import MediaPacket
from voiprelay.netem import (Channel, ImpairmentProfile, ScheduledDelivery, effective_path,
                             impair, packet_cost, shape)
from voiprelay.prng import MASK64


def pkt(seq, payload=640):
    return MediaPacket(seq, seq * 320, 0, bytes(payload))


def reference_bucket(stream, rate_kbps, depth):
    """Exact-arithmetic FIFO token bucket, written independently of netem."""
    rate = Fraction(rate_kbps, 8)  # bytes per ms
    tokens, last, prev = Fraction(depth), None, None
    out = []
    for packet, depart in stream:
        t = Fraction(depart)
        if prev is not None and t < prev:
            t = prev
        if last is not None:
            tokens = min(Fraction(depth), tokens + (t - last) * rate)
        cost = len(packet.payload) + 40
        if tokens < cost:
            t += (cost - tokens) / rate
            tokens = Fraction(cost)
        tokens -= cost
        last = prev = t
        out.append(t)
    return out


def test_million_bytes_at_100kbps():
    # 2000 packets of 500 wire bytes = 1,000,000 bytes, all offered at t=0
    stream = [(pkt(k, 460), 0.0) for k in range(2000)]
    depth = 500  # one packet
    out = shape(stream, ImpairmentProfile(100, bucket_depth_bytes=depth))
    analytic_ms = 8 * 1_000_000 / (1000 * 100) * 1000  # 8N/(1000 R) seconds
    one_packet_ms = 500 / 12.5
    assert abs(out[-1].arrive_time_ms - analytic_ms) <= one_packet_ms
    assert out[-1].arrive_time_ms == pytest.approx(float(reference_bucket(stream, 100, depth)[-1]))


def test_second_packet_waits_one_serialization_time():
    cost = 640 + 40
    out = shape([(pkt(0), 0.0), (pkt(1), 0.0)],
                ImpairmentProfile(100, bucket_depth_bytes=cost))
    assert out[0].arrive_time_ms == 0.0
    assert out[1].arrive_time_ms == pytest.approx(cost / (100 / 8))  # 54.4 ms


def test_unconstrained_channel_only_adds_latency():
    stream = [(pkt(k), 20.0 * k) for k in range(100)]
    prof = ImpairmentProfile.unlimited()
    shaped = shape(stream, prof)
    assert all(d.arrive_time_ms == d.depart_time_ms for d in shaped)
    late = impair(shaped, ImpairmentProfile(10**9, base_latency_ms=50.0))
    assert all(d.arrive_time_ms == d.depart_time_ms + 50.0 for d in late)


def test_latency_is_added_after_serialization():
    stream = [(pkt(k), 0.0) for k in range(3)]
    prof = ImpairmentProfile(100, base_latency_ms=50.0, bucket_depth_bytes=680)
    out = impair(shape(stream, prof), prof)
    assert [d.arrive_time_ms for d in out] == pytest.approx([50.0, 104.4, 158.8])


def test_total_loss():
    stream = [(pkt(k), 20.0 * k) for k in range(50)]
    prof = ImpairmentProfile(1000, loss_prob=1.0, seed=3)
    assert all(d.dropped for d in impair(shape(stream, prof), prof))


def _xorshift_reference(seed):
    """Independent transcription of SplitMix64-seeded xorshift64*."""
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    state = (z ^ (z >> 31)) or 0x9E3779B97F4A7C15
    while True:
        state ^= state >> 12
        state ^= (state << 25) & MASK64
        state ^= state >> 27
        yield ((state * 0x2545F4914F6CDD1D) & MASK64) >> 11


def test_loss_statistics_and_determinism():
    stream = [(pkt(k, 160), 20.0 * k) for k in range(10_000)]
    prof = ImpairmentProfile(10_000, loss_prob=0.1, seed=42)
    run1 = impair(shape(stream, prof), prof)
    run2 = impair(shape(stream, prof), prof)
    drops1 = {d.packet.seq for d in run1 if d.dropped}
    drops2 = {d.packet.seq for d in run2 if d.dropped}
    assert 910 <= len(drops1) <= 1090
    assert drops1 == drops2
    # two draws per packet (loss, jitter); loss draw decides the drop
    gen = _xorshift_reference(42)
    expected = set()
    for k in range(10_000):
        u_loss, _ = next(gen), next(gen)
        if u_loss * 2.0**-53 < 0.1:
            expected.add(k)
    assert drops1 == expected


def test_drop_sets_nest_across_loss_levels():
    stream = [(pkt(k, 160), 20.0 * k) for k in range(2000)]
    sets = []
    for p in (0.0, 0.05, 0.1, 0.2):
        prof = ImpairmentProfile(10_000, loss_prob=p, seed=7)
        sets.append({d.packet.seq for d in impair(shape(stream, prof), prof) if d.dropped})
    assert sets[0] == set()
    assert sets[0] <= sets[1] <= sets[2] <= sets[3]


def test_jitter_bounds_and_clamp():
    stream = [(pkt(k), 20.0 * k) for k in range(500)]
    prof = ImpairmentProfile(10**9, base_latency_ms=5.0, jitter_ms=30.0, seed=11)
    out = impair(shape(stream, prof), prof)
    for d in out:
        assert d.arrive_time_ms >= d.depart_time_ms
        assert d.arrive_time_ms <= d.depart_time_ms + 35.0
    # some packets hit the clamp (5 - 30 < 0)
    assert any(d.arrive_time_ms == d.depart_time_ms for d in out)


def test_profile_invariants():
    with pytest.raises(ValueError):
        ImpairmentProfile(0)
    with pytest.raises(ValueError):
        ImpairmentProfile(100, loss_prob=1.5)
    with pytest.raises(ValueError):
        ImpairmentProfile(100, bucket_depth_bytes=0)
    with pytest.raises(ValueError):
        shape([(pkt(0), 5.0), (pkt(1), 1.0)], ImpairmentProfile(100))


def _saturated(n, payload=640, gap=20.0):
    return [(pkt(k, payload), gap * k) for k in range(n)]


def _delivered_kbps(deliveries):
    got = [d for d in deliveries if not d.dropped]
    span = got[-1].arrive_time_ms - got[0].depart_time_ms
    return 8 * sum(d.wire_bytes for d in got) / span


def test_effective_path_min_rule():
    stream = _saturated(1000)  # 272 kbps offered for 20 s
    assert _delivered_kbps(effective_path(ImpairmentProfile(100),
                                          ImpairmentProfile(100)).run(stream)) == pytest.approx(100, rel=0.02)
    assert _delivered_kbps(effective_path(ImpairmentProfile(50),
                                          ImpairmentProfile(100)).run(stream)) == pytest.approx(50, rel=0.02)
    assert _delivered_kbps(effective_path(ImpairmentProfile(100),
                                          ImpairmentProfile(50)).run(stream)) == pytest.approx(50, rel=0.02)


def test_goodput_is_rate_minus_header_overhead():
    stream = _saturated(1000)
    out = effective_path(ImpairmentProfile(100), ImpairmentProfile(100)).run(stream)
    span = out[-1].arrive_time_ms - out[0].depart_time_ms
    goodput = 8 * sum(len(d.packet.payload) for d in out) / span
    assert goodput == pytest.approx(100 * 640 / 680, rel=0.02)


def test_unconstrained_composition_is_identity():
    stream = _saturated(200)
    out = effective_path(ImpairmentProfile.unlimited(1), ImpairmentProfile.unlimited(2)).run(stream)
    assert [(d.depart_time_ms, d.arrive_time_ms) for d in out] == [(t, t) for _, t in stream]


def test_single_hop_channel_matches_shape_then_impair():
    stream = _saturated(300)
    prof = ImpairmentProfile(120, base_latency_ms=10, jitter_ms=8, loss_prob=0.1, seed=5)
    assert Channel(prof).run(stream) == impair(shape(stream, prof), prof)


bursts = st.lists(st.tuples(st.floats(0, 200), st.integers(0, 600).map(lambda n: n - n % 2)),
                  min_size=1, max_size=120)


def _stream_from(bursts_):
    t, stream = 0.0, []
    for k, (gap, payload) in enumerate(bursts_):
        t += gap
        stream.append((pkt(k, payload), t))
    return stream


@settings(max_examples=100, deadline=None)
@given(bursts, st.integers(8, 2000), st.integers(680, 5000))
def test_shaper_matches_reference_and_bounds_rate(bursts_, rate, depth):
    stream = _stream_from(bursts_)
    prof = ImpairmentProfile(rate, bucket_depth_bytes=depth)
    out = shape(stream, prof)
    ref = reference_bucket(stream, rate, depth)
    assert [d.arrive_time_ms for d in out] == pytest.approx([float(t) for t in ref])
    times = [d.arrive_time_ms for d in out]
    # no reordering, never early
    assert times == sorted(times)
    assert all(d.arrive_time_ms >= d.depart_time_ms for d in out)
    # bytes released in any window fit the rate plus one bucket of burst
    costs = [packet_cost(d.packet) for d in out]
    for i in range(len(out)):
        total = 0
        for j in range(i, len(out)):
            total += costs[j]
            assert total <= depth + (times[j] - times[i]) * rate / 8 + 1e-6


@settings(max_examples=50, deadline=None)
@given(bursts, st.integers(8, 500), st.floats(0, 1), st.floats(0, 50), st.integers(0, 2**64 - 1))
def test_channel_is_deterministic(bursts_, rate, loss, jitter, seed):
    stream = _stream_from(bursts_)
    prof = ImpairmentProfile(rate, 5.0, jitter, loss, seed)
    a = Channel(prof, ImpairmentProfile(rate * 2, seed=seed ^ 1)).run(stream)
    b = Channel(prof, ImpairmentProfile(rate * 2, seed=seed ^ 1)).run(stream)
    assert a == b
    for d in a:
        assert isinstance(d, ScheduledDelivery)
        assert d.dropped or d.arrive_time_ms >= d.depart_time_ms
