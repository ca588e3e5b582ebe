"""End-to-end relay pipeline, batch runner and the dynamic-mixing worker pool.

One simulation runs these steps in order; the first failure skips to
teardown, which always runs::

    create_key  create_security_group  launch_node  fetch_source
    apply_bandwidth  start_receiver  start_sender  wait_duration  hangup
    remove_bandwidth  post_process  upload  teardown
"""

import json
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .audio_io import (AudioClip, DEFAULT_FRAME_MS, canonicalize, read_wav, write_wav)
from .clock import VirtualClock
from .errors import (EmptySource, MissingCleanPair, NoSource,
                     VoipRelayError)
from .evalkit import MetricsReport, channel_stats, snr
from .netem import ImpairmentProfile, effective_path
from .prng import mix_seed
from .provision import (NO_FAULTS, AuditLog, ConnectionPool, FaultInjector, NodeSpec,
                        Provisioner, Quotas)
from .session import Receiver, ReceiverSpec, SenderSpec, post_process, run_sender
from .simconfig import generate_tracking_id, next_tracking_id, validate
from .storage import ObjectStore, fetch_source
from .transport import LocalResolver, MemoryNetwork, Endpoint

log = logging.getLogger(__name__)

STEPS = (
    "create_key", "create_security_group", "launch_node", "fetch_source", "apply_bandwidth",
    "start_receiver", "start_sender", "wait_duration", "hangup", "remove_bandwidth",
    "post_process", "upload", "teardown",
)

SUCCESS = "Success"
FAILURE = "Failure"


@dataclass
class SimulationContext:
    """Everything a simulation needs besides its config."""

    corpus_root: Path
    object_store: ObjectStore
    work_dir: Path
    log_root: Path | None = None
    provisioner: Provisioner = field(default_factory=Provisioner)
    connections: ConnectionPool | None = None
    faults: FaultInjector = field(default_factory=FaultInjector)
    clock_factory: object = VirtualClock
    network_factory: object = MemoryNetwork
    frame_ms: int = DEFAULT_FRAME_MS
    call_timeout_ms: int = 2000
    transform: object = None

    def __post_init__(self):
        if self.provisioner.faults is NO_FAULTS:
            self.provisioner.faults = self.faults
        if self.connections is None:
            self.connections = ConnectionPool(self.provisioner.quotas)

    @classmethod
    def create(cls, root, corpus_root=None, quotas=None, faults=None, seed=0, **kw):
        root = Path(root)
        audit = AuditLog(root / "audit.log")
        faults = faults or FaultInjector()
        prov = Provisioner(quotas or Quotas(), key_dir=root / "keys", audit=audit,
                           faults=faults, seed=seed)
        return cls(corpus_root=Path(corpus_root) if corpus_root else root / "corpus",
                   object_store=ObjectStore(root / "objects", audit=audit),
                   work_dir=root / "work", log_root=root / "logs", provisioner=prov,
                   faults=faults, **kw)


@dataclass
class JobRecord:
    job_id: str
    tracking_id: str
    source: str
    outcome: str
    failed_step: str | None = None
    reason: str | None = None
    timings: dict = field(default_factory=dict)
    output: str | None = None
    metrics: MetricsReport | None = None
    attempts: int = 1
    worker_id: int | None = None

    @property
    def ok(self):
        return self.outcome == SUCCESS

    def to_dict(self):
        d = asdict(self)
        d["metrics"] = self.metrics.as_dict() if self.metrics else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("metrics") is not None:
            d["metrics"] = MetricsReport.from_dict(d["metrics"])
        return cls(**d)


@dataclass
class RunReport:
    total_jobs: int
    successes: int
    failures: int
    completion_accuracy: float | None
    records: list = field(default_factory=list, repr=False)
    max_in_flight: int = 0

    @property
    def accuracy_text(self):
        return format_accuracy(self.successes, self.total_jobs)

    def summary(self):
        return f"completion accuracy: {self.accuracy_text} ({self.successes}/{self.total_jobs})"

    def __str__(self):
        return self.summary()


def format_accuracy(successes, total):
    """Percentage with two decimals, rounded half up; ``n/a`` for no jobs."""
    if total == 0:
        return "n/a"
    pct = (Decimal(successes) * 100 / Decimal(total)).quantize(Decimal("0.01"), ROUND_HALF_UP)
    return f"{pct}%"


def compute_report(records, max_in_flight=0):
    records = list(records)
    ok = sum(r.ok for r in records)
    total = len(records)
    return RunReport(total, ok, total - ok, ok / total if total else None, records, max_in_flight)


class StepFailure(Exception):
    def __init__(self, step, reason):
        super().__init__(f"{step}: {reason}")
        self.step = step
        self.reason = reason


class _StepLog:
    def __init__(self, log_root, tracking_id, clock):
        self.clock = clock
        self.path = None
        if log_root is not None:
            d = Path(log_root) / tracking_id
            d.mkdir(parents=True, exist_ok=True)
            self.path = d / "steps.log"
            self.path.write_text("")

    def write(self, step, status, detail=""):
        if self.path is None:
            return
        with self.path.open("a") as f:
            f.write(f"{self.clock.now_ms():.3f}\t{step}\t{status}\t{detail}\n")

    def write_record(self, record):
        if self.path is not None:
            (self.path.parent / "record.json").write_text(json.dumps(record.to_dict(), indent=1))


def channel_profiles(config):
    """Sender uplink (carries the loss/latency/jitter extensions) and receiver downlink."""
    up = ImpairmentProfile(config.sender_up_kbps, config.latency_ms, config.jitter_ms,
                           config.loss_prob, mix_seed(config.seed, "sender_up"),
                           config.bucket_depth_bytes)
    down = ImpairmentProfile(config.receiver_down_kbps, 0.0, 0.0, 0.0,
                             mix_seed(config.seed, "receiver_down"), config.bucket_depth_bytes)
    return up, down


def reverse_profiles(config):
    """Receiver uplink and sender downlink; only signaling travels this way."""
    return (ImpairmentProfile(config.receiver_up_kbps, seed=mix_seed(config.seed, "receiver_up")),
            ImpairmentProfile(config.sender_down_kbps, seed=mix_seed(config.seed, "sender_down")))


def load_source(paths):
    """Concatenate canonicalized clips in the given order."""
    clips = [canonicalize(read_wav(p)) for p in paths]
    if not clips:
        raise NoSource("source corpus is empty")
    return AudioClip(np.concatenate([c.samples for c in clips]), 16000, 1)


class _Simulation:
    def __init__(self, config, ctx, source_paths=None, attempt=0, job_id=None):
        self.config = config
        self.ctx = ctx
        self.tid = config.tracking_id
        self.attempt = attempt
        self.job_id = job_id or self.tid
        self.clock = ctx.clock_factory()
        self.steplog = _StepLog(ctx.log_root, self.tid, self.clock)
        self.source_paths = source_paths
        self.timings = {}
        self.keys, self.groups, self.nodes = [], [], []
        self.tokens = None
        self.endpoints = []
        self.receiver = None
        self.call = None
        self.output = None
        self.metrics = None
        self.scratch = Path(ctx.work_dir) / self.tid

    # each step --------------------------------------------------------------

    def create_key(self):
        c = self.config
        for role, region in (("sender", c.sender_region), ("receiver", c.receiver_region)):
            self.keys.append(self.ctx.provisioner.create_key(region, f"{role}_{self.tid}",
                                                             self.clock, self.tid))

    def create_security_group(self):
        c = self.config
        for role, region in (("sender", c.sender_region), ("receiver", c.receiver_region)):
            self.groups.append(self.ctx.provisioner.create_security_group(
                region, f"{role}_{self.tid}", self.clock, self.tid))

    def launch_node(self):
        c = self.config
        self.tokens = self.ctx.connections.acquire(2)
        for role, region, itype, ami, key, group in (
                ("sender", c.sender_region, c.sender_instance_type, c.sender_ami,
                 self.keys[0], self.groups[0]),
                ("receiver", c.receiver_region, c.receiver_instance_type, c.receiver_ami,
                 self.keys[1], self.groups[1])):
            spec = NodeSpec(f"{role}_{self.tid}", region, itype, ami, self.tid, c.disk_gb)
            self.nodes.append(self.ctx.provisioner.launch_node(
                spec, key, group, c.use_prebaked_image, self.clock, self.attempt))
        self.clock.sleep_until(max(n.ready_at for n in self.nodes))

    def fetch_source(self):
        paths = self.source_paths
        if paths is None:
            paths = fetch_source(self.config.src_audio_config, self.ctx.corpus_root)
        if not paths:
            raise NoSource(f"corpus {self.config.src_audio_config!r} has no audio")
        self.source = load_source(paths)

    def apply_bandwidth(self):
        up, down = channel_profiles(self.config)
        self.channel = effective_path(up, down)
        self.steplog.write("apply_bandwidth", "INFO",
                           f"uplink {up.describe()}; downlink {down.describe()}")

    def start_receiver(self):
        self.network = self.ctx.network_factory()
        self.resolver = LocalResolver(self.network)
        rx_ep = Endpoint(f"receiver_{self.tid}", self.network, self.resolver, auto_answer=True)
        self.endpoints.append(rx_ep)
        self.scratch.mkdir(parents=True, exist_ok=True)
        self.raw_path = self.scratch / "recording.wav"
        self.receiver = Receiver(ReceiverSpec(self.raw_path), rx_ep, self.clock,
                                 self.config.duration_s, self.ctx.frame_ms).start()

    def start_sender(self):
        tx_ep = Endpoint(f"sender_{self.tid}", self.network, self.resolver)
        self.endpoints.append(tx_ep)
        self.call = tx_ep.call(self.endpoints[0].address, self.ctx.call_timeout_ms,
                               self.clock.now_ms())

    def wait_duration(self):
        spec = SenderSpec(Path(self.config.src_audio_config), self.endpoints[0].address)
        self.sent = run_sender(spec, self.call, self.endpoints[1], self.channel, self.clock,
                               self.config.duration_s, self.ctx.frame_ms, clip=self.source,
                               transform=self.ctx.transform)

    def hangup(self):
        self.endpoints[1].hangup(self.call, now_ms=self.clock.now_ms())
        try:
            self.recording = self.receiver.join(timeout=0.5)
        except TimeoutError:
            self.receiver.kill()
            self.recording = self.receiver.join()

    def remove_bandwidth(self):
        self.channel = None

    def post_process(self):
        self.final_path = post_process(self.raw_path)
        recorded = read_wav(self.final_path)
        m = channel_stats(self.sent.deliveries, self.recording.received, self.config.duration_s)
        self.metrics = replace(m, snr_db=snr(self.sent.played, recorded))

    def upload(self):
        self.output = self.ctx.object_store.upload(
            self.final_path, self.config.storage_url, f"{self.tid}.wav", self.tid).url

    # driver ---------------------------------------------------------------

    def _release(self):
        if self.receiver is not None:
            self.receiver.kill()
            try:
                self.receiver.join(timeout=5)
            except (TimeoutError, VoipRelayError, OSError):
                pass
        for ep in self.endpoints:
            ep.close()
        self.endpoints = []
        if self.tokens is not None:
            self.tokens.release()
            self.tokens = None

    def teardown(self):
        prov = self.ctx.provisioner
        self._release()
        for node in self.nodes:
            prov.terminate_node(node, self.clock)
        for group in self.groups:
            prov.delete_group(group, self.clock, self.tid)
        for key in self.keys:
            prov.delete_key(key, self.clock, self.tid)

    def _timed(self, step, fn):
        t0 = self.clock.now_ms()
        try:
            if step != "launch_node":  # the provisioner injects its own setup faults
                self.ctx.faults.check(self.tid, step, self.attempt)
            fn()
        except Exception as e:
            self.timings[step] = self.clock.now_ms() - t0
            self.steplog.write(step, "FAILURE", f"{type(e).__name__}: {e}")
            raise StepFailure(step, f"{type(e).__name__}: {e}") from e
        self.timings[step] = self.clock.now_ms() - t0
        self.steplog.write(step, "SUCCESS")

    def run(self):
        failure = None
        try:
            validate(self.config)
        except Exception as e:
            failure = StepFailure("validate", f"{type(e).__name__}: {e}")
        if failure is None:
            for step in STEPS[:-1]:
                try:
                    self._timed(step, getattr(self, step))
                except StepFailure as f:
                    failure = f
                    break
        try:
            self._timed("teardown", self.teardown)
        except StepFailure as f:
            failure = failure or f
        finally:
            # backstop: nothing may outlive the simulation
            self._release()
            self.ctx.provisioner.purge(self.tid, self.clock)
        if failure is None:
            rec = JobRecord(self.job_id, self.tid, self._source_label(), SUCCESS,
                            timings=dict(self.timings), output=self.output, metrics=self.metrics,
                            attempts=self.attempt + 1)
        else:
            rec = JobRecord(self.job_id, self.tid, self._source_label(), FAILURE, failure.step,
                            failure.reason, dict(self.timings), attempts=self.attempt + 1)
        self.steplog.write("job", "SUCCESS" if rec.ok else "FAILURE",
                           "" if rec.ok else f"{rec.failed_step}: {rec.reason}")
        self.steplog.write_record(rec)
        return rec

    def _source_label(self):
        if self.source_paths is not None and len(self.source_paths) == 1:
            return str(self.source_paths[0])
        return self.config.src_audio_config


def run_simulation(config, context, source_paths=None, attempt=0, job_id=None):
    """Run one relay simulation end to end.  Never raises; see ``JobRecord``."""
    if config.tracking_id is None:
        config = replace(config, tracking_id=next_tracking_id(config.seed))
    return _Simulation(config, context, source_paths, attempt, job_id).run()


def run_batch(configs, parallelism, context, retries=1):
    """Run many simulations with at most ``parallelism`` in flight.

    Jobs without a tracking id get ``generate_tracking_id(seed, index)``.
    A failed job is retried up to ``retries`` more times.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    configs = [c if c.tracking_id else replace(c, tracking_id=generate_tracking_id(c.seed, i))
               for i, c in enumerate(configs)]
    lock = threading.Lock()
    in_flight = 0
    peak = 0

    def job(cfg):
        nonlocal in_flight, peak
        with lock:
            in_flight += 1
            peak = max(peak, in_flight)
        try:
            rec = run_simulation(cfg, context)
            for attempt in range(1, retries + 1):
                if rec.ok:
                    break
                rec = run_simulation(cfg, context, attempt=attempt)
            return rec
        finally:
            with lock:
                in_flight -= 1

    if not configs:
        return compute_report([])
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        records = list(pool.map(job, configs))
    return compute_report(records, peak)


# dynamic mixing ---------------------------------------------------------------

IDLE, BUSY, STOPPED = "Idle", "Busy", "Stopped"

DEFAULT_WORKER_CONFIG = dict(
    region="us-east-1", instance_type="t2.micro", ami="ami-prebaked", kbps=1000,
)


@dataclass
class WorkerState:
    worker_id: int
    status: str = IDLE
    job_id: str | None = None
    jobs_done: int = 0
    relaunches: int = 0


class _Worker:
    """A persistent sender/receiver pair that relays one clip per job."""

    def __init__(self, worker_id, ctx, seed, settings, tid_prefix):
        self.state = WorkerState(worker_id)
        self.ctx = ctx
        self.seed = seed
        self.settings = settings
        self.tid_prefix = tid_prefix
        self.generation = 0
        self.clock = ctx.clock_factory()
        self.resources = None
        self.endpoints = ()

    @property
    def tid(self):
        return f"{self.tid_prefix}-w{self.state.worker_id:03d}-g{self.generation}"

    def start(self):
        prov, s, tid = self.ctx.provisioner, self.settings, self.tid
        keys, groups, nodes = [], [], []
        self.resources = (keys, groups, nodes)
        with self.ctx.connections.acquire(2):
            for role in ("sender", "receiver"):
                keys.append(prov.create_key(s["region"], f"{role}_{tid}", self.clock, tid))
                groups.append(prov.create_security_group(s["region"], f"{role}_{tid}",
                                                         self.clock, tid))
                nodes.append(prov.launch_node(
                    NodeSpec(f"{role}_{tid}", s["region"], s["instance_type"], s["ami"], tid),
                    keys[-1], groups[-1], True, self.clock))
            self.clock.sleep_until(max(n.ready_at for n in nodes))
        net = self.ctx.network_factory()
        resolver = LocalResolver(net)
        rx = Endpoint(f"receiver_{tid}", net, resolver, auto_answer=True)
        try:
            tx = Endpoint(f"sender_{tid}", net, resolver)
        except Exception:
            rx.close()
            raise
        self.endpoints = (tx, rx)
        up = ImpairmentProfile(s["kbps"], s.get("latency_ms", 0.0), s.get("jitter_ms", 0.0),
                               s.get("loss_prob", 0.0), mix_seed(self.seed, tid, "up"))
        down = ImpairmentProfile(s["kbps"], seed=mix_seed(self.seed, tid, "down"))
        self.profiles = (up, down)
        self.state.status = IDLE

    def stop(self):
        for ep in self.endpoints:
            ep.close()
        self.endpoints = ()
        if self.resources is not None:
            self.ctx.provisioner.purge(self.tid, self.clock)
            self.resources = None
        self.state.status = STOPPED

    def relay(self, src, dest, transform=None, attempt=0):
        """Relay one clip; returns per-step timings and metrics."""
        self.ctx.faults.check(src.name, "relay", attempt)
        frame_ms = self.ctx.frame_ms
        clip = canonicalize(read_wav(src))
        if transform is not None:
            clip = canonicalize(transform(clip))
        duration_s = clip.num_frames / clip.sample_rate
        tx, rx = self.endpoints
        raw = Path(self.ctx.work_dir) / self.tid / f"{src.stem}.raw.wav"
        raw.parent.mkdir(parents=True, exist_ok=True)
        t0 = self.clock.now_ms()
        with self.ctx.connections.acquire(2):
            receiver = Receiver(ReceiverSpec(raw), rx, self.clock, duration_s, frame_ms).start()
            try:
                call = tx.call(rx.address, self.ctx.call_timeout_ms, self.clock.now_ms())
            except Exception:
                receiver.kill()
                receiver.join()
                raise
            channel = effective_path(*self.profiles)
            sent = run_sender(SenderSpec(src, rx.address), call, tx, channel, self.clock,
                              duration_s, frame_ms, clip=clip)
            tx.hangup(call, now_ms=self.clock.now_ms())
            try:
                rec = receiver.join(timeout=0.5)
            except TimeoutError:
                receiver.kill()
                rec = receiver.join()
        out = read_wav(post_process(raw, raw.with_suffix(".canon.wav")))
        relayed = AudioClip(out.samples[:clip.num_frames], 16000, 1)
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_wav(relayed, dest)
        m = channel_stats(sent.deliveries, rec.received, duration_s)
        played = AudioClip(sent.played.samples[:clip.num_frames], 16000, 1)
        return {"relay": self.clock.now_ms() - t0}, replace(m, snr_db=snr(played, relayed))


@dataclass
class MixResult:
    report: RunReport
    workers: list
    trace: list

    def jobs_per_worker(self):
        return {w.worker_id: w.jobs_done for w in self.workers}


def list_wavs(d):
    d = Path(d)
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".wav")


def dynamic_mix(src_dir, relay_dir, clean_dir, num, context, seed=0, transform=None,
                settings=None, verify_clean=True):
    """Relay every WAV in ``src_dir`` through a pool of ``num`` persistent workers.

    Jobs are taken FIFO (sorted filenames) by whichever worker is free.  A
    job whose worker breaks is retried once on a freshly launched worker.
    All workers are stopped and their resources released before returning.
    """
    if num < 1:
        raise ValueError("num must be at least 1")
    src_dir, relay_dir, clean_dir = Path(src_dir), Path(relay_dir), Path(clean_dir)
    files = list_wavs(src_dir) if src_dir.is_dir() else []
    if not files:
        raise EmptySource(f"no WAV files in {src_dir}")
    settings = {**DEFAULT_WORKER_CONFIG, **(settings or {})}
    prefix = f"mix-{seed & 0xFFFFFFFF:08x}"

    jobs = queue.Queue()
    for i, f in enumerate(files):
        jobs.put((i, f))
    trace = []
    trace_lock = threading.Lock()
    records = []

    def emit(*event):
        with trace_lock:
            trace.append((time.monotonic(),) + event)

    def take(worker_id):
        # dequeue and trace atomically so the trace shows the true backlog
        with trace_lock:
            try:
                item = jobs.get_nowait()
            except queue.Empty:
                trace.append((time.monotonic(), "exit", worker_id, None, 0))
                return None
            trace.append((time.monotonic(), "take", worker_id, item[1].name, jobs.qsize()))
            return item

    workers = [_Worker(w, context, seed, settings, prefix) for w in range(num)]

    def worker_loop(worker):
        try:
            worker.start()
            emit("start", worker.state.worker_id, None, None)
        except Exception as e:
            log.info("worker %d failed to start: %s", worker.state.worker_id, e)
            worker.stop()
            emit("start_failed", worker.state.worker_id, None, str(e))
            return
        while (item := take(worker.state.worker_id)) is not None:
            idx, src = item
            job_id = f"{prefix}-j{idx:05d}"
            worker.state.status, worker.state.job_id = BUSY, job_id
            records.append(_run_mix_job(worker, job_id, src, relay_dir, clean_dir, transform,
                                        verify_clean))
            worker.state.jobs_done += 1
            emit("done", worker.state.worker_id, src.name, None)
            if worker.state.status == STOPPED:
                # relaunch failed; the remaining workers drain the queue
                emit("broken", worker.state.worker_id, None, None)
                return
            worker.state.status, worker.state.job_id = IDLE, None
        worker.stop()

    threads = [threading.Thread(target=worker_loop, args=(w,), name=f"mix-worker-{w.state.worker_id}")
               for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    # every worker failed to start: whatever is still queued fails outright
    while True:
        try:
            idx, src = jobs.get_nowait()
        except queue.Empty:
            break
        records.append(JobRecord(f"{prefix}-j{idx:05d}", "-", str(src), FAILURE, "start_worker",
                                 "no worker available"))
    records.sort(key=lambda r: r.job_id)
    return MixResult(compute_report(records), [w.state for w in workers], trace)


def _run_mix_job(worker, job_id, src, relay_dir, clean_dir, transform, verify_clean):
    if verify_clean and not (clean_dir / src.name).is_file():
        err = MissingCleanPair(src.name)
        return JobRecord(job_id, worker.tid, str(src), FAILURE, "verify_clean", str(err),
                         worker_id=worker.state.worker_id)
    dest = relay_dir / src.name
    last = None
    for attempt in range(2):
        try:
            timings, metrics = worker.relay(src, dest, transform, attempt)
            return JobRecord(job_id, worker.tid, str(src), SUCCESS, timings=timings,
                             output=str(dest), metrics=metrics, attempts=attempt + 1,
                             worker_id=worker.state.worker_id)
        except Exception as e:  # any failure breaks the worker; relaunch and retry once
            last = e
            log.info("worker %d failed on %s (%s); relaunching", worker.state.worker_id,
                     src.name, e)
            worker.stop()
            worker.generation += 1
            worker.state.relaunches += 1
            try:
                worker.start()
            except Exception as e2:
                last = e2
                break
    return JobRecord(job_id, worker.tid, str(src), FAILURE, "relay",
                     f"{type(last).__name__}: {last}", attempts=2,
                     worker_id=worker.state.worker_id)


def check_work_conservation(trace):
    """True if no worker ever went idle for good while jobs were still queued."""
    return all(e[4] == 0 for e in trace if e[1] == "exit")
