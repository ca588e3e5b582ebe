"""Channel statistics, audio fidelity and impairment sweeps."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .audio_io import MediaPacket
from .errors import LengthMismatch
from .netem import Channel, ImpairmentProfile, HEADER_OVERHEAD_BYTES
from .prng import mix_seed


@dataclass(frozen=True)
class MetricsReport:
    packets_sent: int = 0
    packets_received: int = 0
    packet_loss_rate: float = 0.0
    latency_mean_ms: float = 0.0
    latency_p50_ms: float = 0.0
    latency_p95_ms: float = 0.0
    latency_max_ms: float = 0.0
    jitter_ms: float = 0.0
    throughput_kbps: float = 0.0
    snr_db: float = math.nan  # nan: not measured
    duration_checked_s: float = 0.0

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


COLUMNS = [f for f in MetricsReport.__dataclass_fields__]


def channel_stats(sent, received, duration_s=None):
    """Compare a sender's delivery schedule with what the receiver kept.

    ``sent`` holds :class:`~voiprelay.netem.ScheduledDelivery` items (one per
    emitted packet); ``received`` holds objects with ``packet`` and
    ``arrive_time_ms``.  Jitter is the mean absolute difference between
    consecutive inter-arrival and inter-departure gaps, in sequence order.
    """
    n_sent = len({d.packet.seq for d in sent})
    if n_sent == 0:
        return MetricsReport()
    depart = {}
    for d in sent:
        depart.setdefault(d.packet.seq, d.depart_time_ms)
    got = {}
    for r in sorted(received, key=lambda r: r.arrive_time_ms):
        got.setdefault(r.packet.seq, r)
    seqs = sorted(got)
    if duration_s is None:
        times = sorted(depart.values())
        gap = float(np.median(np.diff(times))) if len(times) > 1 else 0.0
        duration_s = (times[-1] - times[0] + gap) / 1000.0
    lat = np.array([got[s].arrive_time_ms - depart[s] for s in seqs], dtype=float)
    if len(seqs) > 1:
        a = np.array([got[s].arrive_time_ms for s in seqs])
        dep = np.array([depart[s] for s in seqs])
        jitter = float(np.mean(np.abs(np.diff(a) - np.diff(dep))))
    else:
        jitter = 0.0
    bits = 8 * sum(len(got[s].packet.payload) for s in seqs)
    return MetricsReport(
        packets_sent=n_sent,
        packets_received=len(seqs),
        packet_loss_rate=1.0 - len(seqs) / n_sent,
        latency_mean_ms=float(lat.mean()) if lat.size else 0.0,
        latency_p50_ms=float(np.percentile(lat, 50)) if lat.size else 0.0,
        latency_p95_ms=float(np.percentile(lat, 95)) if lat.size else 0.0,
        latency_max_ms=float(lat.max()) if lat.size else 0.0,
        jitter_ms=jitter,
        throughput_kbps=bits / duration_s / 1000.0 if duration_s > 0 else 0.0,
        duration_checked_s=duration_s,
    )


def snr(clean, degraded):
    """Signal-to-noise ratio of ``degraded`` against ``clean`` in dB."""
    c = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    d = np.asarray(getattr(degraded, "samples", degraded), dtype=np.float64)
    if c.shape != d.shape:
        raise LengthMismatch(f"clean has {c.size} samples, degraded has {d.size}")
    noise = float(np.sum((c - d) ** 2))
    signal = float(np.sum(c ** 2))
    if noise == 0.0:
        return math.inf
    if signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / noise)


def format_db(x):
    if math.isnan(x):
        return "n/a"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.2f}"


# sweeps ----------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantBitrate:
    """Synthetic workload: fixed-size packets at a fixed offered load (incl. headers)."""

    kbps: float
    duration_s: float
    interval_ms: float = 20.0

    @property
    def payload_bytes(self):
        total = self.kbps * self.interval_ms / 8.0
        payload = int(round(total)) - HEADER_OVERHEAD_BYTES
        if payload < 0:
            raise ValueError("offered load too small for the header overhead")
        return payload - payload % 2

    def stream(self):
        n = int(math.ceil(self.duration_s * 1000.0 / self.interval_ms))
        body = bytes(self.payload_bytes)
        return [(MediaPacket(k, k, 0, body), k * self.interval_ms) for k in range(n)]


@dataclass
class SweepRow:
    profile: ImpairmentProfile
    metrics: MetricsReport
    tracking_id: str | None = None
    outcome: str = "Success"


@dataclass
class SweepTable:
    rows: list

    def to_tsv(self):
        head = ["rate_kbps", "latency_ms", "jitter_ms", "loss_prob", "seed", "outcome"] + COLUMNS
        lines = ["\t".join(head)]
        for r in self.rows:
            p, m = r.profile, r.metrics
            vals = [p.rate_kbps, p.base_latency_ms, p.jitter_ms, p.loss_prob, p.seed, r.outcome]
            for c in COLUMNS:
                v = getattr(m, c)
                vals.append(format_db(v) if c == "snr_db" else
                            (f"{v:.4f}" if isinstance(v, float) else v))
            lines.append("\t".join(str(v) for v in vals))
        return "\n".join(lines) + "\n"


def cell_config(base_config, profile):
    """Simulation config for one grid cell; its seed depends only on the cell."""
    return replace(base_config,
                   sender_up_kbps=profile.rate_kbps,
                   latency_ms=profile.base_latency_ms,
                   jitter_ms=profile.jitter_ms,
                   loss_prob=profile.loss_prob,
                   bucket_depth_bytes=profile.bucket_depth_bytes,
                   seed=mix_seed(base_config.seed, profile.seed) & ((1 << 64) - 1))


def _run_cbr(profile, base_config, workload):
    from .orchestrator import channel_profiles
    cfg = cell_config(base_config, profile)
    up, down = channel_profiles(cfg)
    deliveries = Channel(up, down).run(workload.stream())
    received = [_Arrival(d.packet, d.arrive_time_ms) for d in deliveries if not d.dropped]
    return SweepRow(profile, channel_stats(deliveries, received, workload.duration_s))


@dataclass(frozen=True)
class _Arrival:
    packet: MediaPacket
    arrive_time_ms: float


def sweep(grid, base_config, context, workload=None, parallelism=4):
    """Run one in-memory simulation per impairment profile in ``grid``.

    With ``workload=None`` each cell relays audio through the full pipeline;
    a :class:`ConstantBitrate` workload exercises only the channel.
    """
    from .orchestrator import run_simulation

    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")

    def one(i_profile):
        i, profile = i_profile
        if workload is not None:
            return _run_cbr(profile, base_config, workload)
        cfg = cell_config(base_config, profile)
        tid = f"sweep-{mix_seed(cfg.seed, base_config.tracking_id):016x}-{i}"
        rec = run_simulation(replace(cfg, tracking_id=tid), context)
        metrics = rec.metrics or MetricsReport()
        return SweepRow(profile, metrics, tid, rec.outcome)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        rows = list(pool.map(one, enumerate(grid)))
    table = SweepTable(rows)
    if getattr(context, "log_root", None) is not None:
        context.log_root.mkdir(parents=True, exist_ok=True)
        with (context.log_root / "sweep_summary.tsv").open("a") as f:
            f.write(table.to_tsv())
    return table
