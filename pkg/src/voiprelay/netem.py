"""Deterministic per-direction channel impairment.

The shaper is a token bucket standing in for wondershaper's rate limit.
Loss, fixed latency and uniform jitter are applied afterwards, driven by
the pinned xorshift64* generator so drop sets reproduce exactly.
"""

from dataclasses import dataclass

from .prng import XorShift64Star

HEADER_OVERHEAD_BYTES = 40
DEFAULT_BUCKET_DEPTH = 2400
UNLIMITED_KBPS = 10 ** 9


@dataclass(frozen=True)
class ImpairmentProfile:
    rate_kbps: int
    base_latency_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    seed: int = 0
    bucket_depth_bytes: int = DEFAULT_BUCKET_DEPTH

    def __post_init__(self):
        if self.rate_kbps <= 0:
            raise ValueError("rate_kbps must be positive")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must lie in [0, 1]")
        if self.base_latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be nonnegative")
        if self.bucket_depth_bytes <= 0:
            raise ValueError("bucket_depth_bytes must be positive")

    @classmethod
    def unlimited(cls, seed=0):
        return cls(UNLIMITED_KBPS, seed=seed)

    @property
    def bytes_per_ms(self):
        # kbps * 1000 / 8 bytes per second
        return self.rate_kbps / 8.0

    def describe(self):
        return (f"rate={self.rate_kbps}kbps latency={self.base_latency_ms}ms "
                f"jitter=+-{self.jitter_ms}ms loss={self.loss_prob} seed={self.seed} "
                f"depth={self.bucket_depth_bytes}B")


@dataclass(frozen=True)
class ScheduledDelivery:
    packet: object
    depart_time_ms: float
    arrive_time_ms: float | None  # None means dropped

    @property
    def dropped(self):
        return self.arrive_time_ms is None

    @property
    def wire_bytes(self):
        return len(self.packet.payload) + HEADER_OVERHEAD_BYTES


def packet_cost(packet):
    return len(packet.payload) + HEADER_OVERHEAD_BYTES


class TokenBucket:
    """Stateful FIFO token-bucket shaper.

    A packet is released once the bucket holds its cost in bytes.  The
    bucket starts full.  Packets larger than the depth are admitted by
    letting the bucket go into debt, so they still pace at the set rate.
    """

    def __init__(self, rate_kbps, depth_bytes=DEFAULT_BUCKET_DEPTH):
        self.rate = rate_kbps / 8.0
        self.depth = float(depth_bytes)
        self.tokens = float(depth_bytes)
        self.last = None
        self.last_release = float("-inf")

    def offer(self, t_ms, cost):
        t = max(t_ms, self.last_release)
        if self.last is None:
            self.last = t
        self.tokens = min(self.depth, self.tokens + (t - self.last) * self.rate)
        self.last = t
        if self.tokens < cost:
            wait = (cost - self.tokens) / self.rate
            t += wait
            self.tokens = float(cost)
            self.last = t
        self.tokens -= cost
        self.last_release = t
        return t


def shape(stream, profile):
    """Schedule ``(packet, depart_ms)`` pairs through the profile's token bucket.

    Only queueing delay is added here; latency, jitter and loss belong to
    :func:`impair`.  Output order equals input order.
    """
    bucket = TokenBucket(profile.rate_kbps, profile.bucket_depth_bytes)
    out = []
    prev = float("-inf")
    for packet, depart in stream:
        if depart < prev:
            raise ValueError("stream must be ordered by departure time")
        prev = depart
        out.append(ScheduledDelivery(packet, depart, bucket.offer(depart, packet_cost(packet))))
    return out


class Impairer:
    """Per-packet loss and delay using one seeded stream.

    Two uniforms are drawn per packet (loss, then jitter) whether or not the
    packet is dropped, so for a fixed seed the drop set at loss p is a subset
    of the drop set at any larger p.
    """

    def __init__(self, profile):
        self.profile = profile
        self.rng = XorShift64Star(profile.seed)

    def apply(self, d):
        p = self.profile
        u_loss = self.rng.random()
        u_jit = self.rng.random()
        if d.dropped:
            return d
        if u_loss < p.loss_prob:
            return ScheduledDelivery(d.packet, d.depart_time_ms, None)
        arrive = d.arrive_time_ms + p.base_latency_ms + (2.0 * u_jit - 1.0) * p.jitter_ms
        return ScheduledDelivery(d.packet, d.depart_time_ms, max(arrive, d.depart_time_ms))


def impair(deliveries, profile):
    imp = Impairer(profile)
    return [imp.apply(d) for d in deliveries]


class Channel:
    """Incremental series composition of one or more impairment profiles.

    Each hop shapes, then impairs.  Hops after the first see the previous
    hop's arrival time as their departure time; a hop's shaper is fed in
    emission order, which is its arrival order only when jitter is zero.
    """

    def __init__(self, *profiles):
        if not profiles:
            raise ValueError("a channel needs at least one hop")
        self.profiles = profiles
        self._buckets = [TokenBucket(p.rate_kbps, p.bucket_depth_bytes) for p in profiles]
        self._impairers = [Impairer(p) for p in profiles]

    def submit(self, packet, depart_ms):
        cost = packet_cost(packet)
        arrive = depart_ms
        for bucket, imp in zip(self._buckets, self._impairers):
            if arrive is None:
                # keep this hop's random stream aligned with the packet index
                imp.apply(ScheduledDelivery(packet, depart_ms, None))
                continue
            released = bucket.offer(arrive, cost)
            arrive = imp.apply(ScheduledDelivery(packet, arrive, released)).arrive_time_ms
        return ScheduledDelivery(packet, depart_ms, arrive)

    def run(self, stream):
        return [self.submit(p, t) for p, t in stream]


def effective_path(sender_uplink, receiver_downlink):
    """Sender uplink followed by receiver downlink."""
    return Channel(sender_uplink, receiver_downlink)
